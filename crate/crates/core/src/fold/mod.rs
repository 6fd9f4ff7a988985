//! Folding a 2D grid onto a point cloud with a per-cloud overfit network.

mod grid;
mod loss;
mod model;
mod train;

pub use grid::{grid_neighbors, make_grid, Grid};
pub use loss::{chamfer, loss_grad_points, nearest_other, repulsion, LossReport};
pub use model::{params_checksum, Codeword, Dense, FoldTrace, FoldingModel, ModelDims, LEAKY_SLOPE};
pub use train::{evaluate_loss, loss_and_grad, train, TrainConfig, Trained};
