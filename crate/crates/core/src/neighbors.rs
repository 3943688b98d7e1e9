//! Exact k-nearest-neighbour search under Euclidean distance.
//!
//! Neighbours are ordered by `(distance, training index)`, so equidistant
//! candidates resolve to the lowest index. [`KdTree`] returns exactly what
//! [`brute_force`] returns; it only skips subtrees that cannot contain a
//! candidate at least as close as the current k-th.

use serde::{Deserialize, Serialize};

use crate::datamodel::FeatureMatrix;

/// A neighbour as `(squared distance, training row)`.
pub type Neighbor = (f64, usize);

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn closer(a: &Neighbor, b: &Neighbor) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Bounded best-k list kept sorted ascending.
struct Best {
    k: usize,
    items: Vec<Neighbor>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].0)
    }

    fn offer(&mut self, cand: Neighbor) {
        if self.items.len() == self.k && !closer(&cand, &self.items[self.k - 1]) {
            return;
        }
        let pos = self.items.partition_point(|it| closer(it, &cand));
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }
}

/// Linear scan over every training row.
pub fn brute_force(train: &FeatureMatrix, query: &[f64], k: usize) -> Vec<Neighbor> {
    let mut best = Best::new(k.min(train.nrows()));
    if best.k == 0 {
        return Vec::new();
    }
    for (i, row) in train.rows_iter().enumerate() {
        best.offer((squared_distance(row, query), i));
    }
    best.items
}

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum KdNode {
    Split {
        dim: u32,
        value: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        end: u32,
    },
}

/// Exact kd-tree over the rows of a matrix it owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdTree {
    points: FeatureMatrix,
    /// Row indices, each leaf owning a contiguous range.
    index: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: FeatureMatrix) -> Self {
        let mut tree = Self {
            index: (0..points.nrows() as u32).collect(),
            points,
            nodes: Vec::new(),
        };
        if tree.points.nrows() > 0 {
            tree.build(0, tree.index.len());
        }
        tree
    }

    pub fn points(&self) -> &FeatureMatrix {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let dims = self.points.ncols();
        // widest spread dimension
        let mut split_dim = None;
        let mut widest = 0.0;
        if end - start > LEAF_SIZE {
            for d in 0..dims {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &r in &self.index[start..end] {
                    let v = self.points.get(r as usize, d);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                if hi - lo > widest {
                    widest = hi - lo;
                    split_dim = Some(d);
                }
            }
        }
        let Some(dim) = split_dim else {
            self.nodes.push(KdNode::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return id;
        };
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.index[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points
                .get(a as usize, dim)
                .total_cmp(&points.get(b as usize, dim))
        });
        let value = self.points.get(self.index[mid] as usize, dim);
        self.nodes.push(KdNode::Split {
            dim: dim as u32,
            value,
            left: 0,
            right: 0,
        });
        // left holds values <= value, right values >= value
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        if let KdNode::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id as usize]
        {
            *l = left;
            *r = right;
        }
        id
    }

    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<Neighbor> {
        let mut best = Best::new(k.min(self.len()));
        if best.k > 0 {
            self.search(0, query, &mut best);
        }
        best.items
    }

    fn search(&self, node: u32, query: &[f64], best: &mut Best) {
        match &self.nodes[node as usize] {
            KdNode::Leaf { start, end } => {
                for &r in &self.index[*start as usize..*end as usize] {
                    let r = r as usize;
                    best.offer((squared_distance(self.points.row(r), query), r));
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[*dim as usize] - value;
                let (near, far) = if diff <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, best);
                // equal distance may still win on index, so prune only on strictly farther
                if best.worst().is_none_or(|w| diff * diff <= w) {
                    self.search(far, query, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn kd_tree_matches_linear_scan(
            pts in prop::collection::vec(prop::collection::vec(0i8..6, 3), 1..120),
            q in prop::collection::vec(-1i8..7, 3),
            k in 1usize..8,
        ) {
            // small integer grid forces plenty of exact ties
            let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
            let m = FeatureMatrix::from_rows(&rows).unwrap();
            let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let tree = KdTree::new(m.clone());
            prop_assert_eq!(tree.nearest(&q, k), brute_force(&m, &q, k));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let m = FeatureMatrix::from_rows(&[[1.0], [-1.0], [1.0], [3.0]]).unwrap();
        let got = brute_force(&m, &[0.0], 2);
        assert_eq!(got, vec![(1.0, 0), (1.0, 1)]);
    }
}
