use crate::cloud::Point3;
use crate::error::{Error, Result};

/// A `width x height` lattice over `[-1, 1]^2` at `z = 0`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point3>,
}

impl Grid {
    pub fn lattice(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        let coord = |i: usize, len: usize| {
            if len == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (len - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                points.push([coord(c, width), coord(r, height), 0.0]);
            }
        }
        Ok(Grid {
            width,
            height,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> {
        grid_neighbors(self.width, self.height, i)
    }
}

/// Horizontal and vertical neighbors of cell `i` in ascending index order.
pub fn grid_neighbors(width: usize, height: usize, i: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / width, i % width);
    let up = (r > 0).then(|| i - width);
    let left = (c > 0).then(|| i - 1);
    let right = (c + 1 < width).then(|| i + 1);
    let down = (r + 1 < height).then(|| i + width);
    [up, left, right, down].into_iter().flatten()
}

/// Square grid with side `ceil(sqrt(n))`.
pub fn make_grid(n: usize) -> Result<Grid> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot build a grid for zero points".into()));
    }
    let mut side = (n as f64).sqrt().ceil() as usize;
    while side * side < n {
        side += 1;
    }
    while side > 1 && (side - 1) * (side - 1) >= n {
        side -= 1;
    }
    Grid::lattice(side, side)
}
