//! Greedy binary decision trees shared by the regressors and classifiers.
//!
//! Features are bucketed once per training matrix. A feature with at most
//! `max_bins` distinct values gets one bin per value, which makes the split
//! search exact: every midpoint between consecutive distinct values present
//! in a node is scored. Features with more distinct values are cut at
//! quantiles and candidate thresholds fall between occupied buckets. Rows go
//! left when `x <= threshold`.
//!
//! Ties between equally good splits resolve to the lowest feature index, then
//! the lowest threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::FeatureMatrix;

pub const DEFAULT_MAX_BINS: usize = 256;
/// Largest bin count a feature can use.
pub const MAX_BINS_LIMIT: usize = 1 << 16;

/// Column-wise bucket indices of a training matrix.
#[derive(Debug, Clone)]
pub(crate) struct Binned {
    pub n_rows: usize,
    pub bins: Vec<Vec<u16>>,
    /// Smallest and largest training value in each bucket.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl Binned {
    pub fn new(x: &FeatureMatrix, max_bins: usize) -> Self {
        let max_bins = max_bins.clamp(2, MAX_BINS_LIMIT);
        let n = x.nrows();
        let mut out = Self {
            n_rows: n,
            bins: Vec::with_capacity(x.ncols()),
            lower: Vec::with_capacity(x.ncols()),
            upper: Vec::with_capacity(x.ncols()),
        };
        for f in 0..x.ncols() {
            let col = x.column(f);
            let mut sorted = col.clone();
            sorted.sort_unstable_by(f64::total_cmp);
            // distinct values with their counts
            let mut distinct: Vec<(f64, usize)> = Vec::new();
            for &v in &sorted {
                match distinct.last_mut() {
                    Some((last, c)) if *last == v => *c += 1,
                    _ => distinct.push((v, 1)),
                }
            }
            let (mut lower, mut upper) = (Vec::new(), Vec::new());
            if distinct.len() <= max_bins {
                lower.extend(distinct.iter().map(|d| d.0));
                upper = lower.clone();
            } else {
                let mut seen = 0usize;
                let mut open: Option<f64> = None;
                for (i, &(v, c)) in distinct.iter().enumerate() {
                    open.get_or_insert(v);
                    seen += c;
                    let target = (lower.len() + 1) * n / max_bins;
                    let remaining_values = distinct.len() - i - 1;
                    let remaining_bins = max_bins - lower.len() - 1;
                    if seen >= target || remaining_values <= remaining_bins {
                        lower.push(open.take().unwrap_or(v));
                        upper.push(v);
                    }
                }
            }
            let bins = col
                .iter()
                .map(|&v| upper.partition_point(|&u| u < v) as u16)
                .collect();
            out.bins.push(bins);
            out.lower.push(lower);
            out.upper.push(upper);
        }
        out
    }

    pub fn n_features(&self) -> usize {
        self.bins.len()
    }

    fn n_bins(&self, f: usize) -> usize {
        self.upper[f].len()
    }
}

/// Impurity bookkeeping for one kind of tree.
///
/// Node impurity must decompose as `base(stats) - gain(stats)` with `base`
/// additive over rows, so the best split maximizes `gain(left) + gain(right)`.
/// Per-row data is gathered once per tree into `Row` values.
pub(crate) trait Criterion {
    type Row: Copy;
    type Stats: Copy;
    type Leaf;

    fn row(&self, row: usize, weight: f64) -> Self::Row;
    fn empty(&self) -> Self::Stats;
    fn add(&self, stats: &mut Self::Stats, row: &Self::Row);
    fn merge(&self, into: &mut Self::Stats, other: &Self::Stats);
    fn subtract(&self, total: &Self::Stats, part: &Self::Stats) -> Self::Stats;
    fn weight(&self, stats: &Self::Stats) -> f64;
    fn gain(&self, stats: &Self::Stats) -> f64;
    /// Smallest gain increase that counts as an improvement.
    fn tolerance(&self, stats: &Self::Stats) -> f64;
    fn leaf(&self, stats: &Self::Stats) -> Self::Leaf;

    /// Leaf value computed from the node's rows; defaults to [`Criterion::leaf`].
    fn leaf_from_rows(&self, _rows: &[u32], _data: &[Self::Row], stats: &Self::Stats) -> Self::Leaf {
        self.leaf(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<L> {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: L,
        /// Training rows (with bootstrap multiplicity) routed here.
        count: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<L> {
    nodes: Vec<Node<L>>,
}

impl<L> Tree<L> {
    pub fn nodes(&self) -> &[Node<L>] {
        &self.nodes
    }

    pub fn root(&self) -> &Node<L> {
        &self.nodes[0]
    }

    /// Leaf reached by `x`, as `(node index, value)`.
    pub fn route(&self, x: &[f64]) -> (usize, &L) {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { value, .. } => return (idx, value),
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> &L {
        self.route(x).1
    }

    pub fn depth(&self) -> usize {
        fn walk<L>(nodes: &[Node<L>], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub max_features: usize,
}

/// Grows one tree. `weights[r]` is the multiplicity of row `r` (0 excludes
/// it); `None` means every row once.
pub(crate) fn grow<C: Criterion, R: Rng>(
    binned: &Binned,
    weights: Option<&[u32]>,
    criterion: &C,
    params: GrowParams,
    rng: &mut R,
) -> Tree<C::Leaf> {
    let n_features = binned.n_features();
    let weight = |r: usize| weights.map_or(1.0, |w| w[r] as f64);
    let data: Vec<C::Row> = (0..binned.n_rows).map(|r| criterion.row(r, weight(r))).collect();
    let rows: Vec<u32> = (0..binned.n_rows as u32)
        .filter(|&r| weight(r as usize) > 0.0)
        .collect();
    let len = rows.len();
    let max_bins = (0..n_features).map(|f| binned.n_bins(f)).max().unwrap_or(0);
    let mut builder = Builder {
        binned,
        criterion,
        params: GrowParams {
            max_features: params.max_features.clamp(1, n_features.max(1)),
            ..params
        },
        data,
        rows,
        scratch: Vec::with_capacity(len),
        pairs: Vec::new(),
        hist: vec![criterion.empty(); max_bins],
        feature_pool: (0..n_features).collect(),
        nodes: Vec::new(),
        rng,
    };
    builder.build(0, len, 0);
    Tree {
        nodes: builder.nodes,
    }
}

struct Builder<'a, C: Criterion, R> {
    binned: &'a Binned,
    criterion: &'a C,
    params: GrowParams,
    data: Vec<C::Row>,
    /// Rows of the tree, each node owning a contiguous range.
    rows: Vec<u32>,
    scratch: Vec<u32>,
    pairs: Vec<(u16, u32)>,
    hist: Vec<C::Stats>,
    feature_pool: Vec<usize>,
    nodes: Vec<Node<C::Leaf>>,
    rng: &'a mut R,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    /// Highest bin going left.
    bin: u16,
}

pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

struct Best {
    gain: f64,
    tol: f64,
    choice: Option<SplitChoice>,
}

impl Best {
    fn offer(&mut self, gain: f64, make: impl FnOnce() -> SplitChoice) {
        if gain > self.gain {
            // a later candidate must beat this one by the tolerance
            self.gain = gain + self.tol;
            self.choice = Some(make());
        }
    }
}

impl<C: Criterion, R: Rng> Builder<'_, C, R> {
    fn node_stats(&self, start: usize, end: usize) -> C::Stats {
        let mut stats = self.criterion.empty();
        for &r in &self.rows[start..end] {
            self.criterion.add(&mut stats, &self.data[r as usize]);
        }
        stats
    }

    fn sample_features(&mut self) -> Vec<usize> {
        let n = self.feature_pool.len();
        let m = self.params.max_features;
        if m < n {
            for i in 0..m {
                let j = self.rng.random_range(i..n);
                self.feature_pool.swap(i, j);
            }
        }
        let mut chosen = self.feature_pool[..m.min(n)].to_vec();
        chosen.sort_unstable();
        chosen
    }

    fn best_split(&mut self, start: usize, end: usize, total: &C::Stats) -> Option<SplitChoice> {
        let crit = self.criterion;
        let tol = crit.tolerance(total);
        let mut best = Best {
            gain: crit.gain(total) + tol,
            tol,
            choice: None,
        };
        let len = end - start;
        for f in self.sample_features() {
            let bins = &self.binned.bins[f];
            let (lower, upper) = (&self.binned.lower[f], &self.binned.upper[f]);
            let n_bins = self.binned.n_bins(f);
            if len * 4 < n_bins {
                // small node: sort its rows by bin instead of sweeping every bin
                self.pairs.clear();
                self.pairs
                    .extend(self.rows[start..end].iter().map(|&r| (bins[r as usize], r)));
                self.pairs.sort_unstable();
                let mut left = crit.empty();
                for i in 0..len - 1 {
                    let (b, r) = self.pairs[i];
                    crit.add(&mut left, &self.data[r as usize]);
                    let next = self.pairs[i + 1].0;
                    if next == b {
                        continue;
                    }
                    let right = crit.subtract(total, &left);
                    best.offer(crit.gain(&left) + crit.gain(&right), || SplitChoice {
                        feature: f,
                        threshold: midpoint(upper[b as usize], lower[next as usize]),
                        bin: b,
                    });
                }
                continue;
            }
            let hist = &mut self.hist[..n_bins];
            hist.fill(crit.empty());
            for &r in &self.rows[start..end] {
                crit.add(&mut hist[bins[r as usize] as usize], &self.data[r as usize]);
            }
            let mut left = crit.empty();
            let mut prev: Option<usize> = None;
            for b in 0..n_bins {
                if crit.weight(&hist[b]) <= 0.0 {
                    continue;
                }
                if let Some(p) = prev {
                    let right = crit.subtract(total, &left);
                    best.offer(crit.gain(&left) + crit.gain(&right), || SplitChoice {
                        feature: f,
                        threshold: midpoint(upper[p], lower[b]),
                        bin: p as u16,
                    });
                }
                crit.merge(&mut left, &hist[b]);
                prev = Some(b);
            }
        }
        best.choice
    }

    fn partition(&mut self, start: usize, end: usize, split: &SplitChoice) -> usize {
        let bins = &self.binned.bins[split.feature];
        let slice = &mut self.rows[start..end];
        self.scratch.clear();
        let mut write = 0;
        for i in 0..slice.len() {
            let r = slice[i];
            if bins[r as usize] <= split.bin {
                slice[write] = r;
                write += 1;
            } else {
                self.scratch.push(r);
            }
        }
        slice[write..].copy_from_slice(&self.scratch);
        start + write
    }

    fn push_leaf(&mut self, start: usize, end: usize, stats: &C::Stats) -> u32 {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            value: self
                .criterion
                .leaf_from_rows(&self.rows[start..end], &self.data, stats),
            count: self.criterion.weight(stats).round() as u32,
        });
        idx
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> u32 {
        let stats = self.node_stats(start, end);
        let at_depth_limit = self.params.max_depth.is_some_and(|d| depth >= d);
        let too_small = self.criterion.weight(&stats) < self.params.min_samples_split as f64;
        if at_depth_limit || too_small || end - start < 2 || self.binned.n_features() == 0 {
            return self.push_leaf(start, end, &stats);
        }
        let Some(split) = self.best_split(start, end, &stats) else {
            return self.push_leaf(start, end, &stats);
        };
        let mid = self.partition(start, end, &split);
        let idx = self.nodes.len();
        self.nodes.push(Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[idx]
        {
            *l = left;
            *r = right;
        }
        idx as u32
    }
}

/// Squared-error criterion on a single target column.
pub(crate) struct SquaredError<'a> {
    pub y: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MomentStats {
    pub w: f64,
    pub sum: f64,
    pub sum_sq: f64,
}

/// Target value and row weight.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WeightedValue {
    pub y: f64,
    pub w: f64,
}

impl Criterion for SquaredError<'_> {
    type Row = WeightedValue;
    type Stats = MomentStats;
    type Leaf = f64;

    fn empty(&self) -> MomentStats {
        MomentStats::default()
    }

    fn row(&self, row: usize, weight: f64) -> WeightedValue {
        WeightedValue {
            y: self.y[row],
            w: weight,
        }
    }

    fn add(&self, s: &mut MomentStats, row: &WeightedValue) {
        let wy = row.w * row.y;
        s.w += row.w;
        s.sum += wy;
        s.sum_sq += wy * row.y;
    }

    fn merge(&self, into: &mut MomentStats, other: &MomentStats) {
        into.w += other.w;
        into.sum += other.sum;
        into.sum_sq += other.sum_sq;
    }

    fn subtract(&self, total: &MomentStats, part: &MomentStats) -> MomentStats {
        MomentStats {
            w: total.w - part.w,
            sum: total.sum - part.sum,
            sum_sq: total.sum_sq - part.sum_sq,
        }
    }

    fn weight(&self, s: &MomentStats) -> f64 {
        s.w
    }

    fn gain(&self, s: &MomentStats) -> f64 {
        if s.w > 0.0 {
            s.sum * s.sum / s.w
        } else {
            0.0
        }
    }

    fn tolerance(&self, s: &MomentStats) -> f64 {
        1e-12 * s.sum_sq.abs() + f64::MIN_POSITIVE
    }

    fn leaf(&self, s: &MomentStats) -> f64 {
        s.sum / s.w
    }

    fn leaf_from_rows(&self, rows: &[u32], data: &[WeightedValue], stats: &MomentStats) -> f64 {
        shifted_mean(rows.iter().map(|&r| (data[r as usize].y, data[r as usize].w)))
            .unwrap_or_else(|| self.leaf(stats))
    }
}

/// Weighted mean accumulated relative to the first value, so a constant
/// sequence reproduces its value exactly.
pub(crate) fn shifted_mean(mut values: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (first, w0) = values.next()?;
    let (mut dev, mut total) = (0.0, w0);
    for (v, w) in values {
        dev += w * (v - first);
        total += w;
    }
    Some(first + dev / total)
}

pub const MAX_CLASSES: usize = 4;

/// Gini criterion over up to [`MAX_CLASSES`] integer labels.
pub(crate) struct Gini<'a> {
    pub labels: &'a [u8],
    pub n_classes: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ClassCounts {
    pub w: f64,
    pub counts: [f64; MAX_CLASSES],
}

impl Criterion for Gini<'_> {
    /// (weight, label)
    type Row = (f64, u8);
    type Stats = ClassCounts;
    /// Class frequencies at the leaf.
    type Leaf = [f64; MAX_CLASSES];

    fn empty(&self) -> ClassCounts {
        ClassCounts::default()
    }

    fn row(&self, row: usize, weight: f64) -> (f64, u8) {
        (weight, self.labels[row])
    }

    fn add(&self, s: &mut ClassCounts, &(w, label): &(f64, u8)) {
        s.w += w;
        s.counts[label as usize] += w;
    }

    fn merge(&self, into: &mut ClassCounts, other: &ClassCounts) {
        into.w += other.w;
        for k in 0..self.n_classes {
            into.counts[k] += other.counts[k];
        }
    }

    fn subtract(&self, total: &ClassCounts, part: &ClassCounts) -> ClassCounts {
        let mut out = ClassCounts {
            w: total.w - part.w,
            counts: [0.0; MAX_CLASSES],
        };
        for k in 0..self.n_classes {
            out.counts[k] = total.counts[k] - part.counts[k];
        }
        out
    }

    fn weight(&self, s: &ClassCounts) -> f64 {
        s.w
    }

    fn gain(&self, s: &ClassCounts) -> f64 {
        if s.w <= 0.0 {
            return 0.0;
        }
        s.counts[..self.n_classes].iter().map(|c| c * c).sum::<f64>() / s.w
    }

    fn tolerance(&self, s: &ClassCounts) -> f64 {
        1e-12 * s.w + f64::MIN_POSITIVE
    }

    fn leaf(&self, s: &ClassCounts) -> [f64; MAX_CLASSES] {
        let mut p = [0.0; MAX_CLASSES];
        for k in 0..self.n_classes {
            p[k] = s.counts[k] / s.w;
        }
        p
    }
}

/// Largest magnitude of a single Newton leaf step.
pub(crate) const MAX_NEWTON_STEP: f64 = 8.0;

/// Log-loss boosting criterion: splits on squared error of the residuals
/// `y - p`, leaves take the Newton step `sum(r) / sum(p (1 - p))`.
pub(crate) struct Newton<'a> {
    pub residual: &'a [f64],
    pub hessian: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonRow {
    w: f64,
    r: f64,
    h: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NewtonStats {
    w: f64,
    sum_r: f64,
    sum_r2: f64,
    sum_h: f64,
}

impl Criterion for Newton<'_> {
    type Row = NewtonRow;
    type Stats = NewtonStats;
    type Leaf = f64;

    fn row(&self, row: usize, weight: f64) -> NewtonRow {
        NewtonRow {
            w: weight,
            r: self.residual[row],
            h: self.hessian[row],
        }
    }

    fn empty(&self) -> NewtonStats {
        NewtonStats::default()
    }

    fn add(&self, s: &mut NewtonStats, row: &NewtonRow) {
        let wr = row.w * row.r;
        s.w += row.w;
        s.sum_r += wr;
        s.sum_r2 += wr * row.r;
        s.sum_h += row.w * row.h;
    }

    fn merge(&self, into: &mut NewtonStats, o: &NewtonStats) {
        into.w += o.w;
        into.sum_r += o.sum_r;
        into.sum_r2 += o.sum_r2;
        into.sum_h += o.sum_h;
    }

    fn subtract(&self, t: &NewtonStats, p: &NewtonStats) -> NewtonStats {
        NewtonStats {
            w: t.w - p.w,
            sum_r: t.sum_r - p.sum_r,
            sum_r2: t.sum_r2 - p.sum_r2,
            sum_h: t.sum_h - p.sum_h,
        }
    }

    fn weight(&self, s: &NewtonStats) -> f64 {
        s.w
    }

    fn gain(&self, s: &NewtonStats) -> f64 {
        if s.w > 0.0 {
            s.sum_r * s.sum_r / s.w
        } else {
            0.0
        }
    }

    fn tolerance(&self, s: &NewtonStats) -> f64 {
        1e-12 * s.sum_r2.abs() + f64::MIN_POSITIVE
    }

    fn leaf(&self, s: &NewtonStats) -> f64 {
        if s.sum_h <= f64::MIN_POSITIVE {
            return 0.0;
        }
        (s.sum_r / s.sum_h).clamp(-MAX_NEWTON_STEP, MAX_NEWTON_STEP)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn fit_sq(x: &[[f64; 2]], y: &[f64], depth: usize) -> Tree<f64> {
        let m = FeatureMatrix::from_rows(x).unwrap();
        grow(
            &Binned::new(&m, DEFAULT_MAX_BINS),
            None,
            &SquaredError { y },
            GrowParams {
                max_depth: Some(depth),
                min_samples_split: 2,
                max_features: 2,
            },
            &mut stream(0, &[]),
        )
    }

    #[test]
    fn midpoint_never_reaches_upper_value() {
        assert_eq!(midpoint(0.0, 1.0), 0.5);
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert!(midpoint(a, b) < b);
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // both columns separate y perfectly
        let x = [[0.0, 0.0], [1.0, 1.0]];
        let tree = fit_sq(&x, &[0.0, 1.0], 3);
        match tree.root() {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 0.5);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn weights_exclude_rows() {
        let x = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let m = FeatureMatrix::from_rows(&x).unwrap();
        let y = [5.0, 1.0, 1.0];
        let tree = grow(
            &Binned::new(&m, DEFAULT_MAX_BINS),
            Some(&[0, 2, 1]),
            &SquaredError { y: &y },
            GrowParams {
                max_depth: Some(4),
                min_samples_split: 2,
                max_features: 2,
            },
            &mut stream(0, &[]),
        );
        assert_eq!(tree.nodes().len(), 1);
        match tree.root() {
            Node::Leaf { value, count } => {
                assert_eq!(*value, 1.0);
                assert_eq!(*count, 3);
            }
            _ => panic!("constant target must not split"),
        }
    }
}
