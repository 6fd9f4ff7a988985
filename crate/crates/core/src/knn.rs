//! Exact k-nearest-neighbor search over 3D points.
//!
//! Results are ordered by squared distance, then by point index, so a query
//! returns exactly what an exhaustive scan with the same ordering would.

use rayon::prelude::*;

use crate::cloud::{sq_dist, Point3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// `(point index, squared distance)`
pub type Neighbor = (usize, f64);

#[inline]
fn before(a: Neighbor, b: Neighbor) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

impl SpatialIndex {
    pub fn build(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty point set".into()));
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap();
        if hi[axis] == lo[axis] {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// The `k` nearest indexed points, ascending by squared distance, ties
    /// by lower index.
    pub fn nearest(&self, query: &Point3, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={} for this index",
                self.len()
            )));
        }
        let mut best = Vec::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        Ok(best)
    }

    /// Single nearest neighbor.
    pub fn nearest_one(&self, query: &Point3) -> Neighbor {
        let mut best = Vec::with_capacity(2);
        self.search(0, query, 1, &mut best);
        best[0]
    }

    fn search(&self, node: usize, q: &Point3, k: usize, best: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (i, sq_dist(q, &self.points[i]));
                    if best.len() < k || before(cand, best[best.len() - 1]) {
                        let at = best.partition_point(|&b| before(b, cand));
                        best.insert(at, cand);
                        best.truncate(k);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // equal bound may still hold a lower-index tie
                if best.len() < k || diff * diff <= best[best.len() - 1].1 {
                    self.search(far, q, k, best);
                }
            }
        }
    }

    /// Nearest neighbor for every query, in query order.
    pub fn nearest_one_batch(&self, queries: &[Point3]) -> Vec<Neighbor> {
        queries.par_iter().map(|q| self.nearest_one(q)).collect()
    }

    pub fn nearest_batch(&self, queries: &[Point3], k: usize) -> Result<Vec<Vec<Neighbor>>> {
        queries.par_iter().map(|q| self.nearest(q, k)).collect()
    }
}

pub fn build_index(points: &[Point3]) -> Result<SpatialIndex> {
    SpatialIndex::build(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Point3], q: &Point3, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                (i, d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            })
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 500);
        let index = build_index(&pts).unwrap();
        for _ in 0..50 {
            let q = [rng.gen(), rng.gen(), rng.gen()];
            for k in [1, 5, 9] {
                assert_eq!(index.nearest(&q, k).unwrap(), brute(&pts, &q, k));
            }
        }
    }

    #[test]
    fn lattice_ties_follow_index_order() {
        // integer lattice with duplicates produces many exact ties
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..3 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        pts.extend(pts.clone());
        let index = build_index(&pts).unwrap();
        for q in [[2.5, 2.5, 1.0], [0.0, 0.0, 0.0], [3.0, 2.5, 0.5], [5.5, 5.5, 2.5]] {
            for k in [1, 2, 7, 16] {
                assert_eq!(index.nearest(&q, k).unwrap(), brute(&pts, &q, k));
            }
        }
    }

    #[test]
    fn single_point() {
        let index = build_index(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(index.nearest(&[-5.0, 0.0, 9.0], 1).unwrap()[0].0, 0);
    }

    #[test]
    fn duplicates_returned_in_index_order() {
        let index = build_index(&[[1.0, 1.0, 1.0], [0.0; 3], [1.0, 1.0, 1.0]]).unwrap();
        let r = index.nearest(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(r, vec![(0, 0.0), (2, 0.0)]);
    }

    #[test]
    fn query_at_indexed_point_and_full_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 40);
        let index = build_index(&pts).unwrap();
        assert_eq!(index.nearest(&pts[17], 1).unwrap(), vec![(17, 0.0)]);
        let q = [0.3, 0.3, 0.3];
        assert_eq!(index.nearest(&q, 40).unwrap(), brute(&pts, &q, 40));
    }

    #[test]
    fn rejects_bad_k_and_empty() {
        let index = build_index(&[[0.0; 3]]).unwrap();
        assert!(index.nearest(&[0.0; 3], 2).is_err());
        assert!(index.nearest(&[0.0; 3], 0).is_err());
        assert!(build_index(&[]).is_err());
    }
}
