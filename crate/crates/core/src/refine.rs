//! Iterative refinement of a folded grid.
//!
//! Each step moves every folded point toward a blend of a density-aware
//! average of its grid neighbors and two attraction targets in the original
//! cloud (its nearest original point, and the mean of the original points
//! that pick it as their nearest). All targets of a step are computed from
//! the previous positions.

use crate::cloud::{dist, Point3};
use crate::error::{Error, Result};
use crate::fold::{grid_neighbors, Grid};
use crate::knn::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            alpha: 1.0 / 3.0,
            iterations: 100,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)))
        }
    }
}

/// Targets computed for one refinement step.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineForces {
    pub weights: Vec<f64>,
    pub normalized: Vec<f64>,
    pub grid: Vec<Point3>,
    pub push: Vec<Point3>,
    pub pull: Vec<Point3>,
}

fn check_aligned(recon: &[Point3], grid: &Grid) -> Result<()> {
    if recon.len() != grid.width * grid.height {
        return Err(Error::InvalidArgument(format!(
            "reconstruction has {} points, grid has {}x{}",
            recon.len(),
            grid.width,
            grid.height
        )));
    }
    Ok(())
}

/// Mean distance from each folded point to the folded positions of its grid
/// neighbors. Zero for a 1x1 grid.
pub fn inverse_density_weights(recon: &[Point3], width: usize, height: usize) -> Vec<f64> {
    (0..recon.len())
        .map(|i| {
            let mut sum = 0.0;
            let mut count = 0;
            for j in grid_neighbors(width, height, i) {
                sum += dist(&recon[i], &recon[j]);
                count += 1;
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Min-max normalization; a constant input maps to all ones.
pub fn normalize_weights(weights: &[f64]) -> Vec<f64> {
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![1.0; weights.len()];
    }
    weights.iter().map(|w| (w - lo) / (hi - lo)).collect()
}

/// Normalized-weight mean of each point's grid neighbors. Falls back to the
/// plain neighbor mean when all neighbor weights vanish, and to the point
/// itself when it has no neighbors.
pub fn grid_attractor(recon: &[Point3], width: usize, height: usize, normalized: &[f64]) -> Vec<Point3> {
    (0..recon.len())
        .map(|i| {
            let mut weighted = [0.0; 3];
            let mut wsum = 0.0;
            let mut plain = [0.0; 3];
            let mut count = 0;
            for j in grid_neighbors(width, height, i) {
                let w = normalized[j];
                for a in 0..3 {
                    weighted[a] += w * recon[j][a];
                    plain[a] += recon[j][a];
                }
                wsum += w;
                count += 1;
            }
            if count == 0 {
                recon[i]
            } else if wsum > 0.0 {
                weighted.map(|v| v / wsum)
            } else {
                plain.map(|v| v / count as f64)
            }
        })
        .collect()
}

/// Nearest original point of every folded point.
pub fn push_targets(recon: &[Point3], x_index: &SpatialIndex) -> Vec<Point3> {
    let x = x_index.points();
    x_index
        .nearest_one_batch(recon)
        .into_iter()
        .map(|(j, _)| x[j])
        .collect()
}

/// Mean of the original points whose nearest folded point is each folded
/// point; points nobody selects keep their push target.
pub fn pull_targets(recon: &[Point3], x: &[Point3], push: &[Point3]) -> Result<Vec<Point3>> {
    let r_index = SpatialIndex::build(recon)?;
    let mut sums = vec![[0.0; 3]; recon.len()];
    let mut counts = vec![0usize; recon.len()];
    for (p, (j, _)) in x.iter().zip(r_index.nearest_one_batch(x)) {
        for a in 0..3 {
            sums[j][a] += p[a];
        }
        counts[j] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .zip(push)
        .map(|((s, &c), p)| if c == 0 { *p } else { s.map(|v| v / c as f64) })
        .collect())
}

pub fn compute_forces(recon: &[Point3], x_index: &SpatialIndex, grid: &Grid) -> Result<RefineForces> {
    check_aligned(recon, grid)?;
    let weights = inverse_density_weights(recon, grid.width, grid.height);
    let normalized = normalize_weights(&weights);
    let grid_targets = grid_attractor(recon, grid.width, grid.height, &normalized);
    let push = push_targets(recon, x_index);
    let pull = pull_targets(recon, x_index.points(), &push)?;
    Ok(RefineForces {
        weights,
        normalized,
        grid: grid_targets,
        push,
        pull,
    })
}

/// One Jacobi-style update: `alpha * grid + (1 - alpha) * (push + pull) / 2`.
pub fn refine_step(recon: &[Point3], x_index: &SpatialIndex, grid: &Grid, alpha: f64) -> Result<Vec<Point3>> {
    let f = compute_forces(recon, x_index, grid)?;
    Ok((0..recon.len())
        .map(|i| {
            let mut out = [0.0; 3];
            for a in 0..3 {
                out[a] = alpha * f.grid[i][a] + (1.0 - alpha) * (f.push[i][a] + f.pull[i][a]) / 2.0;
            }
            out
        })
        .collect())
}

pub fn refine(recon: &[Point3], x: &[Point3], grid: &Grid, config: &RefineConfig) -> Result<Vec<Point3>> {
    config.validate()?;
    check_aligned(recon, grid)?;
    let x_index = SpatialIndex::build(x)?;
    let mut cur = recon.to_vec();
    for _ in 0..config.iterations {
        cur = refine_step(&cur, &x_index, grid, config.alpha)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Point3> {
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]
    }

    #[test]
    fn unit_square_weights() {
        assert_eq!(inverse_density_weights(&square(), 2, 2), vec![1.0; 4]);
        let mut s = square();
        s[1] = [2.0, 0.0, 0.0];
        let w = inverse_density_weights(&s, 2, 2);
        assert_eq!(w[0], 1.5);
        // diagonal-opposite corner (index 2) only sees 0 and 3
        assert_eq!(w[2], 1.0);
        let scaled: Vec<Point3> = s.iter().map(|p| p.map(|v| v * 3.0)).collect();
        let ws = inverse_density_weights(&scaled, 2, 2);
        for (a, b) in w.iter().zip(&ws) {
            assert!((a * 3.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_normalization() {
        assert_eq!(normalize_weights(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_weights(&[4.0, 4.0]), vec![1.0, 1.0]);
        let a = normalize_weights(&[0.3, 1.7, 0.9, 2.2]);
        let b = normalize_weights(&[0.3 * 5.0 + 2.0, 1.7 * 5.0 + 2.0, 0.9 * 5.0 + 2.0, 2.2 * 5.0 + 2.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attractor_weighted_mean() {
        // 1x3 line: middle point's neighbors are 0 and 2
        let recon = vec![[0.0, 0.0, 0.0], [5.0, 5.0, 5.0], [2.0, 0.0, 0.0]];
        let t = grid_attractor(&recon, 3, 1, &[0.5, 0.0, 1.0]);
        assert!((t[1][0] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(t[1][1], 0.0);
        let t = grid_attractor(&recon, 3, 1, &[0.7, 0.7, 0.7]);
        assert_eq!(t[1], [1.0, 0.0, 0.0]);
        let t = grid_attractor(&recon, 3, 1, &[0.0, 1.0, 0.0]);
        assert_eq!(t[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn push_and_pull() {
        let x = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let idx = SpatialIndex::build(&x).unwrap();
        assert_eq!(push_targets(&[[0.9, 0.0, 0.0]], &idx), vec![[0.0, 0.0, 0.0]]);
        assert_eq!(push_targets(&[[1.0, 0.0, 0.0]], &idx), vec![[0.0, 0.0, 0.0]]);
        assert_eq!(push_targets(&[[2.0, 0.0, 0.0]], &idx), vec![[2.0, 0.0, 0.0]]);

        let recon = vec![[1.0, 0.0, 0.0], [10.0, 10.0, 10.0]];
        let push = push_targets(&recon, &idx);
        let pull = pull_targets(&recon, &x, &push).unwrap();
        assert_eq!(pull[0], [1.0, 0.0, 0.0]);
        assert_eq!(push[1], [2.0, 0.0, 0.0]);
        assert_eq!(pull[1], [2.0, 0.0, 0.0]);

        let same = pull_targets(&x, &x, &x).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn alpha_extremes() {
        let x = vec![[0.0, 0.0, 0.1], [1.0, 0.0, 0.0], [0.0, 1.2, 0.0], [1.0, 1.0, 0.3], [0.5, 0.5, 0.5]];
        let idx = SpatialIndex::build(&x).unwrap();
        let grid = Grid::lattice(2, 2).unwrap();
        let recon = vec![[0.1, 0.1, 0.0], [0.9, 0.0, 0.0], [0.0, 0.8, 0.0], [1.2, 1.0, 0.0]];
        let f = compute_forces(&recon, &idx, &grid).unwrap();
        assert_eq!(refine_step(&recon, &idx, &grid, 1.0).unwrap(), f.grid);
        let mid: Vec<Point3> = f
            .push
            .iter()
            .zip(&f.pull)
            .map(|(p, q)| [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0])
            .collect();
        assert_eq!(refine_step(&recon, &idx, &grid, 0.0).unwrap(), mid);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let grid = Grid::lattice(2, 2).unwrap();
        let recon = square();
        let cfg = RefineConfig {
            iterations: 0,
            ..RefineConfig::default()
        };
        assert_eq!(refine(&recon, &[[3.0, 3.0, 3.0]], &grid, &cfg).unwrap(), recon);
        assert!(refine(&recon, &recon, &grid, &RefineConfig { alpha: 1.5, iterations: 1 }).is_err());
        assert!(refine(&recon[..3], &recon, &grid, &cfg).is_err());
    }

    #[test]
    fn interior_of_flat_uniform_fold_is_fixed() {
        let grid = Grid::lattice(5, 5).unwrap();
        let idx = SpatialIndex::build(&grid.points).unwrap();
        let next = refine_step(&grid.points, &idx, &grid, 1.0 / 3.0).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                let i = r * 5 + c;
                for a in 0..3 {
                    assert!((next[i][a] - grid.points[i][a]).abs() < 1e-15);
                }
            }
        }
    }
}
