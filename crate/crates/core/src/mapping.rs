//! Attribute mapping between the original cloud and the folded grid.
//!
//! Points are assigned to folded cells greedily in ascending point order,
//! scoring each of the `k` nearest cells by `occupancy * distance`, so cells
//! that already hold points become less attractive. The grid can then be
//! expanded by inserting rows/columns next to the most crowded line until the
//! mapping is one-to-one or stops improving.

use crate::cloud::{Point3, Rgb};
use crate::error::{Error, Result};
use crate::knn::SpatialIndex;

/// Forward map (point → cell), inverse lists (cell → points) and occupancy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTable {
    pub forward: Vec<usize>,
    pub inverse: Vec<Vec<usize>>,
    pub occupancy: Vec<u32>,
    pub k: usize,
}

impl MappingTable {
    pub fn is_lossless(&self) -> bool {
        self.occupancy.iter().all(|&o| o <= 1)
    }

    pub fn num_cells(&self) -> usize {
        self.occupancy.len()
    }

    /// Occupancy value → number of cells with that occupancy.
    pub fn histogram(&self) -> Vec<usize> {
        let max = self.occupancy.iter().copied().max().unwrap_or(0) as usize;
        let mut h = vec![0; max + 1];
        for &o in &self.occupancy {
            h[o as usize] += 1;
        }
        h
    }
}

pub fn build_mapping(x: &[Point3], recon: &[Point3], k: usize) -> Result<MappingTable> {
    if x.is_empty() || recon.is_empty() {
        return Err(Error::InvalidArgument("mapping needs nonempty point sets".into()));
    }
    if k == 0 || k > recon.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={} folded points",
            recon.len()
        )));
    }
    let r_index = SpatialIndex::build(recon)?;
    let candidates = r_index.nearest_batch(x, k)?;
    let mut forward = Vec::with_capacity(x.len());
    let mut inverse = vec![Vec::new(); recon.len()];
    let mut occupancy = vec![0u32; recon.len()];
    for (p, cands) in candidates.iter().enumerate() {
        // candidates come sorted by (distance, index), so keeping the first
        // minimal score applies both tie-breaks
        let mut best = cands[0].0;
        let mut best_score = f64::INFINITY;
        for &(cell, d2) in cands {
            let score = occupancy[cell] as f64 * d2.sqrt();
            if score < best_score {
                best_score = score;
                best = cell;
            }
        }
        forward.push(best);
        inverse[best].push(p);
        occupancy[best] += 1;
    }
    Ok(MappingTable {
        forward,
        inverse,
        occupancy,
        k,
    })
}

/// Folded positions on a (possibly expanded) grid, with each row's and
/// column's coordinate in the original lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedGrid {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point3>,
    pub row_coords: Vec<f64>,
    pub col_coords: Vec<f64>,
}

impl FoldedGrid {
    pub fn new(width: usize, height: usize, points: Vec<Point3>) -> Result<Self> {
        if width == 0 || height == 0 || points.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} folded points do not fill a {width}x{height} grid",
                points.len()
            )));
        }
        Ok(FoldedGrid {
            width,
            height,
            points,
            row_coords: (0..height).map(|r| r as f64).collect(),
            col_coords: (0..width).map(|c| c as f64).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
    pub occupancy: Vec<u32>,
    /// Source (row, column) of each pixel in the unexpanded lattice.
    pub provenance: Vec<[f64; 2]>,
}

impl AttributeImage {
    /// Bare image without mapping metadata, e.g. after decompression.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels do not fill a {width}x{height} image",
                pixels.len()
            )));
        }
        let mut provenance = Vec::with_capacity(pixels.len());
        for r in 0..height {
            for c in 0..width {
                provenance.push([r as f64, c as f64]);
            }
        }
        Ok(AttributeImage {
            width,
            height,
            occupancy: vec![0; pixels.len()],
            pixels,
            provenance,
        })
    }
}

/// Occupied cells get the rounded (half-up) channel mean of their points;
/// empty cells copy the color of the original point nearest to their folded
/// position.
pub fn map_attributes(colors: &[Rgb], table: &MappingTable, grid: &FoldedGrid, x_index: &SpatialIndex) -> Result<AttributeImage> {
    if colors.len() != table.forward.len() || x_index.len() != colors.len() {
        return Err(Error::InvalidArgument("mapping table does not match the cloud".into()));
    }
    if table.num_cells() != grid.points.len() {
        return Err(Error::InvalidArgument("mapping table does not match the grid".into()));
    }
    let pixels = table
        .inverse
        .iter()
        .enumerate()
        .map(|(cell, members)| {
            if members.is_empty() {
                colors[x_index.nearest_one(&grid.points[cell]).0]
            } else {
                let c = members.len() as u32;
                let mut sum = [0u32; 3];
                for &p in members {
                    for a in 0..3 {
                        sum[a] += colors[p][a] as u32;
                    }
                }
                sum.map(|s| ((s + c / 2) / c) as u8)
            }
        })
        .collect();
    let mut provenance = Vec::with_capacity(grid.points.len());
    for &r in &grid.row_coords {
        for &c in &grid.col_coords {
            provenance.push([r, c]);
        }
    }
    Ok(AttributeImage {
        width: grid.width,
        height: grid.height,
        pixels,
        occupancy: table.occupancy.clone(),
        provenance,
    })
}

/// Attribute of each original point read back from its forward cell.
pub fn decode_attributes(image: &AttributeImage, table: &MappingTable) -> Result<Vec<Rgb>> {
    if image.width * image.height != table.num_cells() || image.pixels.len() != table.num_cells() {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{} but the mapping addresses {} cells",
            image.width,
            image.height,
            table.num_cells()
        )));
    }
    Ok(table.forward.iter().map(|&c| image.pixels[c]).collect())
}

/// Per-row and per-column mean of the strictly positive occupancies; lines
/// without any occupied cell get 0.
pub fn occupancy_stats(occupancy: &[u32], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![(0u64, 0u64); height];
    let mut cols = vec![(0u64, 0u64); width];
    for (i, &o) in occupancy.iter().enumerate() {
        if o > 0 {
            let (r, c) = (i / width, i % width);
            rows[r].0 += o as u64;
            rows[r].1 += 1;
            cols[c].0 += o as u64;
            cols[c].1 += 1;
        }
    }
    let mean = |(s, n): (u64, u64)| if n == 0 { 0.0 } else { s as f64 / n as f64 };
    (rows.into_iter().map(mean).collect(), cols.into_iter().map(mean).collect())
}

/// Average of the nonzero row and column mean occupancies.
pub fn average_mean_occupancy(row_means: &[f64], col_means: &[f64]) -> f64 {
    let (sum, n) = row_means
        .iter()
        .chain(col_means)
        .filter(|&&m| m > 0.0)
        .fold((0.0, 0usize), |(s, n), &m| (s + m, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

/// One expansion round: lines were inserted around `index` of `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Insertion {
    pub axis: Axis,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Lossless,
    Converged,
    /// The last candidate round raised the average mean occupancy; it was
    /// discarded.
    Worsened,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionState {
    pub width: usize,
    pub height: usize,
    pub row_means: Vec<f64>,
    pub col_means: Vec<f64>,
    /// Average mean occupancy of the initial and of every accepted round.
    pub averages: Vec<f64>,
    /// Relative decrease of the average in the last evaluated round.
    pub last_change: f64,
    pub delta_min: f64,
    pub log: Vec<Insertion>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub grid: FoldedGrid,
    pub table: MappingTable,
    pub state: ExpansionState,
}

pub const DEFAULT_DELTA_MIN: f64 = 1e-6;
pub const DEFAULT_MAX_ROUNDS: usize = 64;

/// Line with the largest mean occupancy; rows win ties over columns, lower
/// indices over higher.
pub fn select_line(row_means: &[f64], col_means: &[f64]) -> Insertion {
    let mut best = Insertion {
        axis: Axis::Row,
        index: 0,
    };
    let mut best_mean = f64::NEG_INFINITY;
    for (axis, means) in [(Axis::Row, row_means), (Axis::Column, col_means)] {
        for (index, &m) in means.iter().enumerate() {
            if m > best_mean {
                best_mean = m;
                best = Insertion { axis, index };
            }
        }
    }
    best
}

fn lerp(a: &Point3, b: &Point3, t: f64) -> Point3 {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

/// Inserts a line on each side of the selected one. Interior insertions are
/// midpoints of the neighboring lines; an insertion past the border
/// extrapolates by one local line spacing (a lone line is duplicated).
pub fn insert_lines(grid: &FoldedGrid, ins: Insertion) -> FoldedGrid {
    // operate on rows; columns go through a transpose
    let (w, h, points, coords) = match ins.axis {
        Axis::Row => (grid.width, grid.height, grid.points.clone(), &grid.row_coords),
        Axis::Column => {
            let mut t = Vec::with_capacity(grid.points.len());
            for c in 0..grid.width {
                for r in 0..grid.height {
                    t.push(grid.points[r * grid.width + c]);
                }
            }
            (grid.height, grid.width, t, &grid.col_coords)
        }
    };
    let line = |i: usize| &points[i * w..(i + 1) * w];
    let r = ins.index;
    let blend = |a: usize, b: usize, t: f64| -> Vec<Point3> {
        line(a).iter().zip(line(b)).map(|(p, q)| lerp(p, q, t)).collect()
    };
    // new line on the side facing `towards`, which may be out of range
    let side = |towards: Option<usize>, away: Option<usize>| -> (Vec<Point3>, f64) {
        match (towards, away) {
            (Some(t), _) => (blend(r, t, 0.5), (coords[r] + coords[t]) / 2.0),
            (None, Some(a)) => (blend(r, a, -1.0), 2.0 * coords[r] - coords[a]),
            (None, None) => (line(r).to_vec(), coords[r]),
        }
    };
    let prev = r.checked_sub(1);
    let next = (r + 1 < h).then_some(r + 1);
    let (before, before_coord) = side(prev, next);
    let (after, after_coord) = side(next, prev);

    let mut new_points = Vec::with_capacity(points.len() + 2 * w);
    let mut new_coords = Vec::with_capacity(h + 2);
    for i in 0..h {
        if i == r {
            new_points.extend_from_slice(&before);
            new_coords.push(before_coord);
        }
        new_points.extend_from_slice(line(i));
        new_coords.push(coords[i]);
        if i == r {
            new_points.extend_from_slice(&after);
            new_coords.push(after_coord);
        }
    }
    let nh = h + 2;
    match ins.axis {
        Axis::Row => FoldedGrid {
            width: w,
            height: nh,
            points: new_points,
            row_coords: new_coords,
            col_coords: grid.col_coords.clone(),
        },
        Axis::Column => {
            let mut back = Vec::with_capacity(new_points.len());
            for rr in 0..w {
                for cc in 0..nh {
                    back.push(new_points[cc * w + rr]);
                }
            }
            FoldedGrid {
                width: nh,
                height: w,
                points: back,
                row_coords: grid.row_coords.clone(),
                col_coords: new_coords,
            }
        }
    }
}

/// Expands the grid around crowded lines, rebuilding the mapping after each
/// round. Stops when the mapping is lossless, when the relative decrease of
/// the average mean occupancy drops below `delta_min`, or after
/// `max_rounds` rounds. A round that increases the average is discarded.
pub fn expand_grid(grid: FoldedGrid, x: &[Point3], k: usize, delta_min: f64, max_rounds: usize) -> Result<Expansion> {
    let mut grid = grid;
    let mut table = build_mapping(x, &grid.points, k.min(grid.points.len()))?;
    let (mut rows, mut cols) = occupancy_stats(&table.occupancy, grid.width, grid.height);
    let mut avg = average_mean_occupancy(&rows, &cols);
    let mut averages = vec![avg];
    let mut log = Vec::new();
    let mut last_change = 0.0;
    let stop = loop {
        if table.is_lossless() {
            break StopReason::Lossless;
        }
        if log.len() >= max_rounds {
            break StopReason::MaxRounds;
        }
        let ins = select_line(&rows, &cols);
        let cand = insert_lines(&grid, ins);
        let cand_table = build_mapping(x, &cand.points, k.min(cand.points.len()))?;
        let (cr, cc) = occupancy_stats(&cand_table.occupancy, cand.width, cand.height);
        let cand_avg = average_mean_occupancy(&cr, &cc);
        last_change = (avg - cand_avg) / avg;
        if last_change < 0.0 {
            break StopReason::Worsened;
        }
        grid = cand;
        table = cand_table;
        rows = cr;
        cols = cc;
        avg = cand_avg;
        averages.push(avg);
        log.push(ins);
        if last_change < delta_min {
            break StopReason::Converged;
        }
    };
    let state = ExpansionState {
        width: grid.width,
        height: grid.height,
        row_means: rows,
        col_means: cols,
        averages,
        last_change,
        delta_min,
        log,
        stop,
    };
    Ok(Expansion { grid, table, state })
}

/// Re-applies a recorded insertion log and rebuilds the mapping once.
pub fn replay_expansion(grid: FoldedGrid, x: &[Point3], k: usize, log: &[Insertion]) -> Result<(FoldedGrid, MappingTable)> {
    let mut grid = grid;
    for &ins in log {
        let bound = match ins.axis {
            Axis::Row => grid.height,
            Axis::Column => grid.width,
        };
        if ins.index >= bound {
            return Err(Error::InvalidArgument(format!("insertion {ins:?} outside the grid")));
        }
        grid = insert_lines(&grid, ins);
    }
    let table = build_mapping(x, &grid.points, k.min(grid.points.len()))?;
    Ok((grid, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mapping_with_k1() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let t = build_mapping(&pts, &pts, 1).unwrap();
        assert_eq!(t.forward, vec![0, 1, 2]);
        assert_eq!(t.occupancy, vec![1, 1, 1]);
    }

    #[test]
    fn greedy_trace() {
        let x = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let recon = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let t = build_mapping(&x, &recon, 2).unwrap();
        assert_eq!(t.forward, vec![0, 1]);
        assert_eq!(t.occupancy, vec![1, 1]);
        assert_eq!(t.inverse, vec![vec![0], vec![1]]);
        // with k = 1 both land on cell 0
        let t = build_mapping(&x, &recon, 1).unwrap();
        assert_eq!(t.occupancy, vec![2, 0]);
        assert!(build_mapping(&x, &recon, 3).is_err());
    }

    #[test]
    fn mean_color_and_fill() {
        let x = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let colors = vec![[100, 0, 0], [200, 0, 1], [0, 0, 255]];
        let recon = vec![[0.05, 0.0, 0.0], [2.9, 0.0, 0.0], [2.5, 0.1, 0.0], [9.0, 0.0, 0.0]];
        let table = build_mapping(&x, &recon, 1).unwrap();
        assert_eq!(table.occupancy, vec![2, 1, 0, 0]);
        let grid = FoldedGrid::new(2, 2, recon).unwrap();
        let idx = SpatialIndex::build(&x).unwrap();
        let img = map_attributes(&colors, &table, &grid, &idx).unwrap();
        // (0 + 1) / 2 rounds half up
        assert_eq!(img.pixels[0], [150, 0, 1]);
        assert_eq!(img.pixels[1], [0, 0, 255]);
        assert_eq!(img.pixels[2], [0, 0, 255]);
        assert_eq!(img.pixels[3], [0, 0, 255]);
        let back = decode_attributes(&img, &table).unwrap();
        assert_eq!(back, vec![[150, 0, 1], [150, 0, 1], [0, 0, 255]]);
    }

    #[test]
    fn decode_rejects_mismatch() {
        let img = AttributeImage::from_pixels(2, 1, vec![[0; 3]; 2]).unwrap();
        let t = build_mapping(&[[0.0; 3]], &[[0.0; 3]], 1).unwrap();
        assert!(decode_attributes(&img, &t).is_err());
    }

    #[test]
    fn stats_examples() {
        let (r, c) = occupancy_stats(&[2, 1, 0, 1], 2, 2);
        assert_eq!(r, vec![1.5, 1.0]);
        assert_eq!(c, vec![2.0, 1.0]);
        let (r, c) = occupancy_stats(&[1; 6], 3, 2);
        assert_eq!(r, vec![1.0; 2]);
        assert_eq!(c, vec![1.0; 3]);
        let (r, _) = occupancy_stats(&[0, 0, 3, 1], 2, 2);
        assert_eq!(r, vec![0.0, 2.0]);
        assert_eq!(
            select_line(&[1.5, 1.0], &[2.0, 1.0]),
            Insertion {
                axis: Axis::Column,
                index: 0
            }
        );
        assert_eq!(
            select_line(&[2.0, 1.0], &[2.0, 1.0]),
            Insertion {
                axis: Axis::Row,
                index: 0
            }
        );
    }

    #[test]
    fn insert_interior_and_edge_rows() {
        let g = FoldedGrid::new(2, 3, (0..6).map(|i| [(i % 2) as f64, (i / 2) as f64, 0.0]).collect()).unwrap();
        let e = insert_lines(&g, Insertion { axis: Axis::Row, index: 1 });
        assert_eq!((e.width, e.height), (2, 5));
        assert_eq!(e.points[2], [0.0, 0.5, 0.0]);
        assert_eq!(e.points[6], [0.0, 1.5, 0.0]);
        assert_eq!(e.row_coords, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let e = insert_lines(&g, Insertion { axis: Axis::Row, index: 0 });
        assert_eq!(e.points[0], [0.0, -1.0, 0.0]);
        assert_eq!(e.points[4], [0.0, 0.5, 0.0]);
        assert_eq!(e.row_coords, vec![-1.0, 0.0, 0.5, 1.0, 2.0]);
        let e = insert_lines(&g, Insertion { axis: Axis::Column, index: 1 });
        assert_eq!((e.width, e.height), (4, 3));
        assert_eq!(e.points[0..4], [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(e.col_coords, vec![0.0, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn expansion_noop_when_lossless() {
        let pts: Vec<Point3> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let g = FoldedGrid::new(2, 2, pts.clone()).unwrap();
        let e = expand_grid(g.clone(), &pts, 2, DEFAULT_DELTA_MIN, DEFAULT_MAX_ROUNDS).unwrap();
        assert_eq!(e.grid, g);
        assert!(e.state.log.is_empty());
        assert_eq!(e.state.stop, StopReason::Lossless);
    }

    #[test]
    fn expansion_spreads_a_crowded_cell() {
        // 2x2 fold, eight points crowding the first cell
        let recon = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let mut x = vec![];
        for i in 0..6 {
            x.push([0.05 * i as f64, 0.04 * i as f64, 0.0]);
        }
        x.push([1.0, 1.0, 0.0]);
        let g = FoldedGrid::new(2, 2, recon).unwrap();
        let e = expand_grid(g.clone(), &x, 1, DEFAULT_DELTA_MIN, DEFAULT_MAX_ROUNDS).unwrap();
        assert!(!e.state.log.is_empty());
        assert!(e.state.averages.windows(2).all(|w| w[1] <= w[0]));
        let total: u32 = e.table.occupancy.iter().sum();
        assert_eq!(total as usize, x.len());
        let (rg, rt) = replay_expansion(g, &x, 1, &e.state.log).unwrap();
        assert_eq!(rg, e.grid);
        assert_eq!(rt, e.table);
    }
}
