//! Chamfer and repulsion losses with gradients w.r.t. the reconstruction.
//!
//! Nearest-neighbor correspondences are recomputed on every evaluation and
//! held constant when differentiating.

use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::knn::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub chamfer: f64,
    pub repulsion: f64,
}

impl LossReport {
    fn new(chamfer: f64, repulsion: f64) -> Self {
        LossReport {
            total: chamfer + repulsion,
            chamfer,
            repulsion,
        }
    }
}

fn nonempty(points: &[Point3], what: &str) -> Result<()> {
    if points.is_empty() {
        Err(Error::InvalidArgument(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

/// Symmetric Chamfer distance: summed squared nearest-neighbor distances in
/// both directions.
pub fn chamfer(x: &[Point3], recon: &[Point3]) -> Result<f64> {
    nonempty(x, "original point set")?;
    nonempty(recon, "reconstruction")?;
    let x_index = SpatialIndex::build(x)?;
    let r_index = SpatialIndex::build(recon)?;
    Ok(chamfer_with(&x_index, &r_index))
}

fn chamfer_with(x_index: &SpatialIndex, r_index: &SpatialIndex) -> f64 {
    let mut total = 0.0;
    for (_, d) in r_index.nearest_one_batch(x_index.points()) {
        total += d;
    }
    for (_, d) in x_index.nearest_one_batch(r_index.points()) {
        total += d;
    }
    total
}

/// Index of each point's nearest *other* point and the squared distance.
pub fn nearest_other(index: &SpatialIndex) -> Vec<(usize, f64)> {
    use rayon::prelude::*;
    let pts = index.points();
    (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let nn = index.nearest(&pts[i], 2).expect("index holds at least two points");
            if nn[0].0 != i {
                nn[0]
            } else {
                nn[1]
            }
        })
        .collect()
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Population variance of each point's squared distance to its nearest
/// other point.
pub fn repulsion(recon: &[Point3]) -> Result<f64> {
    if recon.len() < 2 {
        return Err(Error::InvalidArgument("repulsion needs at least two points".into()));
    }
    let index = SpatialIndex::build(recon)?;
    let sq: Vec<f64> = nearest_other(&index).iter().map(|n| n.1).collect();
    Ok(mean_var(&sq).1)
}

/// Loss `chamfer + repulsion` and its gradient w.r.t. every reconstructed
/// point. Repulsion is zero for a single-point reconstruction.
pub fn loss_grad_points(x_index: &SpatialIndex, recon: &[Point3]) -> Result<(LossReport, Vec<Point3>)> {
    nonempty(recon, "reconstruction")?;
    let x = x_index.points();
    let r_index = SpatialIndex::build(recon)?;
    let mut grad = vec![[0.0; 3]; recon.len()];

    let mut ch = 0.0;
    for (p, (j, d)) in x.iter().zip(r_index.nearest_one_batch(x)) {
        ch += d;
        for a in 0..3 {
            grad[j][a] += 2.0 * (recon[j][a] - p[a]);
        }
    }
    for (i, (j, d)) in x_index.nearest_one_batch(recon).into_iter().enumerate() {
        ch += d;
        for a in 0..3 {
            grad[i][a] += 2.0 * (recon[i][a] - x[j][a]);
        }
    }

    let mut rep = 0.0;
    if recon.len() >= 2 {
        let nn = nearest_other(&r_index);
        let sq: Vec<f64> = nn.iter().map(|n| n.1).collect();
        let (mean, var) = mean_var(&sq);
        rep = var;
        let scale = 2.0 / recon.len() as f64;
        for (i, &(j, s)) in nn.iter().enumerate() {
            let coef = scale * (s - mean) * 2.0;
            for a in 0..3 {
                let g = coef * (recon[i][a] - recon[j][a]);
                grad[i][a] += g;
                grad[j][a] -= g;
            }
        }
    }
    let report = LossReport::new(ch, rep);
    if !report.total.is_finite() {
        return Err(Error::NonFinite { what: "loss" });
    }
    Ok((report, grad))
}
