//! Embedded oracle checks, runnable from the command line.
//!
//! Every check compares a production code path against an independent,
//! slower or hand-derived answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{sq_dist, Point3};
use crate::error::Result;
use crate::fold::{chamfer, evaluate_loss, loss_and_grad, FoldingModel, Grid, ModelDims};
use crate::knn::SpatialIndex;
use crate::mapping::{build_mapping, occupancy_stats, select_line, Axis, Insertion};
use crate::refine::inverse_density_weights;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String>;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Largest relative error between analytic and central-difference
/// directional derivatives of the training loss, over random unit
/// directions in parameter space.
pub fn gradient_check(model: &FoldingModel, x: &[Point3], grid: &Grid, directions: usize, seed: u64) -> Result<f64> {
    let index = SpatialIndex::build(x)?;
    let (_, grad) = loss_and_grad(model, &index, &grid.points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut d: Vec<f64> = (0..model.params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        let shifted = |sign: f64| -> Result<f64> {
            let mut m = model.clone();
            for (p, dv) in m.params.iter_mut().zip(&d) {
                *p += sign * h * dv;
            }
            Ok(evaluate_loss(&m, &index, &grid.points)?.total)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        let scale = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(worst)
}

/// Toy problem for the gradient check: 2×2 lattice, four points.
pub fn toy_gradient_problem(seed: u64) -> Result<(FoldingModel, Vec<Point3>, Grid)> {
    let dims = ModelDims {
        encoder: [4; 4],
        folding_hidden: [4, 4],
    };
    let model = FoldingModel::init(seed, dims)?;
    let x = vec![[0.1, -0.3, 0.2], [0.7, 0.4, -0.5], [-0.6, 0.2, 0.9], [0.3, 0.8, 0.05]];
    Ok((model, x, Grid::lattice(2, 2)?))
}

fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, sq_dist(p, q))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |s: &[Point3], t: &[Point3]| -> f64 {
        s.iter()
            .map(|p| t.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    one(a, b) + one(b, a)
}

fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

fn check_gradient() -> Result<String> {
    let (model, x, grid) = toy_gradient_problem(0)?;
    let err = gradient_check(&model, &x, &grid, 20, 1)?;
    if err < GRADIENT_TOLERANCE {
        Ok(format!("max relative error {err:.2e}"))
    } else {
        Err(fail(format!("max relative error {err:.2e}")))
    }
}

fn fail(msg: String) -> crate::Error {
    crate::Error::InvalidArgument(msg)
}

fn check_knn() -> Result<String> {
    let pts = random_points(500, 2);
    let index = SpatialIndex::build(&pts)?;
    let queries = random_points(200, 3);
    for k in [1, 5, 9] {
        for q in queries.iter().chain(&pts[..50]) {
            let got: Vec<(usize, f64)> = index.nearest(q, k)?;
            if got != brute_knn(&pts, q, k) {
                return Err(fail(format!("k={k} mismatch at {q:?}")));
            }
        }
    }
    Ok("500 points, k in {1,5,9}, 250 queries".into())
}

fn check_chamfer() -> Result<String> {
    let mut worst = 0.0f64;
    for s in 0..10 {
        let a = random_points(10 + 4 * s as usize, 10 + s);
        let b = random_points(50 - 3 * s as usize, 20 + s);
        worst = worst.max((chamfer(&a, &b)? - brute_chamfer(&a, &b)).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(fail(format!("max deviation {worst:.1e}")))
    }
}

fn check_refine_weights() -> Result<String> {
    let recon = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
    let w = inverse_density_weights(&recon, 2, 2);
    if (w[0] - 1.5).abs() < 1e-15 {
        Ok(format!("weights {w:?}"))
    } else {
        Err(fail(format!("expected 1.5 at the origin, got {w:?}")))
    }
}

fn check_mapping_trace() -> Result<String> {
    let x = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
    let recon = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
    let t = build_mapping(&x, &recon, 2)?;
    if t.forward != [0, 1] || t.occupancy != [1, 1] {
        return Err(fail(format!("forward {:?} occupancy {:?}", t.forward, t.occupancy)));
    }
    let (rows, cols) = occupancy_stats(&[2, 1, 0, 1], 2, 2);
    let ins = select_line(&rows, &cols);
    if rows != [1.5, 1.0] || cols != [2.0, 1.0] || ins != (Insertion { axis: Axis::Column, index: 0 }) {
        return Err(fail(format!("rows {rows:?} cols {cols:?} selected {ins:?}")));
    }
    Ok("greedy trace and line selection match".into())
}

pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 5] = [
        ("gradient-finite-difference", check_gradient),
        ("knn-exhaustive", check_knn),
        ("chamfer-pairwise", check_chamfer),
        ("refine-weights-hand", check_refine_weights),
        ("mapping-greedy-hand", check_mapping_trace),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
