//! Point cloud data model, normalization and block segmentation.

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Rgb = [u8; 3];

/// Positions with one RGB triplet per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    colors: Vec<Rgb>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, colors: Vec<Rgb>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidCloud("point cloud must contain at least one point".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::InvalidCloud(format!(
                "{} positions but {} color triplets",
                positions.len(),
                colors.len()
            )));
        }
        check_finite(&positions)?;
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn into_parts(self) -> (Vec<Point3>, Vec<Rgb>) {
        (self.positions, self.colors)
    }

    /// Same geometry with new attributes.
    pub fn with_colors(&self, colors: Vec<Rgb>) -> Result<Self> {
        Self::new(self.positions.clone(), colors)
    }

    /// Sub-cloud made of the given point indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.positions[i]).collect(),
            indices.iter().map(|&i| self.colors[i]).collect(),
        )
    }
}

pub(crate) fn check_finite(points: &[Point3]) -> Result<()> {
    if points.iter().flatten().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: "point coordinates" })
    }
}

#[inline]
pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Centroid shift and isotropic scale mapping a cloud into `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform {
    pub centroid: Point3,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: &Point3) -> Point3 {
        [
            (p[0] - self.centroid[0]) / self.scale,
            (p[1] - self.centroid[1]) / self.scale,
            (p[2] - self.centroid[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Centers on the centroid and scales so the largest absolute coordinate is 1.
///
/// A cloud whose points all coincide maps to the origin with scale 1.
pub fn normalize_positions(points: &[Point3]) -> Result<(Vec<Point3>, NormalizeTransform)> {
    if points.is_empty() {
        return Err(Error::InvalidCloud("cannot normalize an empty point set".into()));
    }
    check_finite(points)?;
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in &mut centroid {
        *c /= n;
    }
    let mut max_abs: f64 = 0.0;
    for p in points {
        for a in 0..3 {
            max_abs = max_abs.max((p[a] - centroid[a]).abs());
        }
    }
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let t = NormalizeTransform { centroid, scale };
    Ok((points.iter().map(|p| t.apply(p)).collect(), t))
}

pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let (positions, t) = normalize_positions(pc.positions())?;
    Ok((PointCloud::new(positions, pc.colors.clone())?, t))
}

/// One patch produced by [`segment_blocks`]: the sub-cloud and, per patch
/// point, its index in the original cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub cloud: PointCloud,
    pub indices: Vec<usize>,
}

/// Recursive median split of point indices along the longest bounding-box
/// axis until every block holds at most `max_points` points. Blocks are
/// emitted depth-first, lower half first.
pub fn segment_indices(points: &[Point3], max_points: usize) -> Vec<Vec<usize>> {
    let max_points = max_points.max(1);
    let mut out = Vec::new();
    split_rec(points, (0..points.len()).collect(), max_points, &mut out);
    out
}

fn split_rec(points: &[Point3], mut idx: Vec<usize>, max_points: usize, out: &mut Vec<Vec<usize>>) {
    if idx.len() <= max_points {
        out.push(idx);
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &idx {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let mut axis = 0;
    for a in 1..3 {
        if hi[a] - lo[a] > hi[axis] - lo[axis] {
            axis = a;
        }
    }
    idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let right = idx.split_off(idx.len() / 2);
    split_rec(points, idx, max_points, out);
    split_rec(points, right, max_points, out);
}

pub fn segment_blocks(pc: &PointCloud, max_points: usize) -> Result<Vec<Patch>> {
    segment_indices(pc.positions(), max_points)
        .into_iter()
        .map(|indices| {
            Ok(Patch {
                cloud: pc.select(&indices)?,
                indices,
            })
        })
        .collect()
}
