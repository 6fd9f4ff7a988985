use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::fold::grid::{make_grid, Grid};
use crate::fold::loss::{loss_grad_points, LossReport};
use crate::fold::model::{FoldingModel, ModelDims};
use crate::knn::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Loss of the model's fold of `grid` onto the cloud and the gradient w.r.t.
/// every model parameter.
pub fn loss_and_grad(model: &FoldingModel, x_index: &SpatialIndex, grid: &[Point3]) -> Result<(LossReport, Vec<f64>)> {
    let x = x_index.points();
    let codeword = model.encode_with_argmax(x)?;
    let trace = model.fold_traced(grid, &codeword.values)?;
    let (report, d_points) = loss_grad_points(x_index, &trace.output)?;
    let mut grad = vec![0.0; model.num_params()];
    let d_code = model.fold_backward(&trace, &codeword.values, &d_points, &mut grad);
    model.encode_backward(x, &codeword, &d_code, &mut grad);
    Ok((report, grad))
}

/// Loss only, for finite-difference checks and reporting.
pub fn evaluate_loss(model: &FoldingModel, x_index: &SpatialIndex, grid: &[Point3]) -> Result<LossReport> {
    let code = model.encode_cloud(x_index.points())?;
    let recon = model.fold(grid, &code)?;
    Ok(loss_grad_points(x_index, &recon)?.0)
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    beta1_t: f64,
    beta2_t: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1_t: 1.0,
            beta2_t: 1.0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        self.beta1_t *= cfg.beta1;
        self.beta2_t *= cfg.beta2;
        let c1 = 1.0 - self.beta1_t;
        let c2 = 1.0 - self.beta2_t;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: FoldingModel,
    pub grid: Grid,
    pub reconstruction: Vec<Point3>,
    /// Loss before each optimizer step.
    pub history: Vec<LossReport>,
}

/// Overfits a freshly initialized folding model to one cloud with
/// full-batch Adam.
pub fn train(points: &[Point3], config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    let grid = make_grid(points.len())?;
    let x_index = SpatialIndex::build(points)?;
    let mut model = FoldingModel::init(config.seed, config.dims)?;
    let mut adam = Adam::new(model.num_params());
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let (report, grad) = loss_and_grad(&model, &x_index, &grid.points)
            .map_err(|_| Error::TrainingDiverged { iteration })?;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration });
        }
        history.push(report);
        adam.step(config, &mut model.params, &grad);
    }
    let code = model
        .encode_cloud(points)
        .map_err(|_| Error::TrainingDiverged { iteration: config.iterations })?;
    let reconstruction = model
        .fold(&grid.points, &code)
        .map_err(|_| Error::TrainingDiverged { iteration: config.iterations })?;
    Ok(Trained {
        model,
        grid,
        reconstruction,
        history,
    })
}
