//! Next-hour KPI forecasting: random forest regression with one independent
//! forest per target KPI, plus the persistence, moving-average and
//! exponential-smoothing baselines it is compared against.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tree::{grow, shifted_mean, Binned, GrowParams, Node, SquaredError, Tree, DEFAULT_MAX_BINS, MAX_BINS_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionTreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features considered per split; `None` means `ceil(n / 3)`.
    pub feature_subset_size: Option<usize>,
    /// Split candidates per feature; features with fewer distinct values
    /// are searched exactly.
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for RegressionTreeParams {
    fn default() -> Self {
        Self {
            max_depth: 12,
            min_samples_split: 5,
            feature_subset_size: None,
            max_bins: DEFAULT_MAX_BINS,
            seed: 0,
        }
    }
}

impl RegressionTreeParams {
    /// Parameters that make the tree deterministic and exhaustive.
    pub fn exhaustive(max_depth: usize) -> Self {
        Self {
            max_depth,
            min_samples_split: 2,
            feature_subset_size: Some(usize::MAX),
            max_bins: MAX_BINS_LIMIT,
            seed: 0,
        }
    }

    fn subset_size(&self, n_features: usize) -> usize {
        self.feature_subset_size
            .unwrap_or_else(|| n_features.div_ceil(3))
            .clamp(1, n_features.max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidParameter("max_depth must be >= 1".into()));
        }
        if !(2..=MAX_BINS_LIMIT).contains(&self.max_bins) {
            return Err(Error::InvalidParameter(format!(
                "max_bins must be in 2..={MAX_BINS_LIMIT}"
            )));
        }
        if self.feature_subset_size == Some(0) {
            return Err(Error::InvalidParameter(
                "feature_subset_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn grow_params(&self, n_features: usize) -> GrowParams {
        GrowParams {
            max_depth: Some(self.max_depth),
            min_samples_split: self.min_samples_split.max(2),
            max_features: self.subset_size(n_features),
        }
    }
}

fn check_training_input(x: &FeatureMatrix, targets: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InsufficientData("empty training matrix".into()));
    }
    if x.nrows() != targets {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: targets,
        });
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("training matrix has non-finite values".into()));
    }
    Ok(())
}

/// CART regression tree split on squared error; leaves hold target means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    n_features: usize,
    tree: Tree<f64>,
}

impl RegressionTree {
    pub fn fit(x: &FeatureMatrix, y: &[f64], params: &RegressionTreeParams) -> Result<Self> {
        params.validate()?;
        check_training_input(x, y.len())?;
        let binned = Binned::new(x, params.max_bins);
        Ok(Self::fit_binned(
            &binned,
            y,
            None,
            params,
            &mut stream(params.seed, &[]),
        ))
    }

    fn fit_binned<R: Rng>(
        binned: &Binned,
        y: &[f64],
        weights: Option<&[u32]>,
        params: &RegressionTreeParams,
        rng: &mut R,
    ) -> Self {
        let tree = grow(
            binned,
            weights,
            &SquaredError { y },
            params.grow_params(binned.n_features()),
            rng,
        );
        Self {
            n_features: binned.n_features(),
            tree,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nodes(&self) -> &[Node<f64>] {
        self.tree.nodes()
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(*self.tree.predict(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub tree: RegressionTreeParams,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            bootstrap: true,
            tree: RegressionTreeParams::default(),
        }
    }
}

/// Independent regression forests, one per target column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    params: ForestParams,
    n_features: usize,
    forests: Vec<Vec<RegressionTree>>,
}

pub(crate) fn bootstrap_counts<R: Rng>(n: usize, rng: &mut R) -> Vec<u32> {
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    counts
}

/// Fits `n_trees` trees per target column of `targets`.
///
/// Tree `i` of target `j` draws its bootstrap sample and feature subsets from
/// a stream derived from `(seed, j, i)`.
pub fn fit_rfr(x: &FeatureMatrix, targets: &FeatureMatrix, params: &ForestParams) -> Result<ForestModel> {
    if params.n_trees == 0 {
        return Err(Error::InvalidParameter("n_trees must be >= 1".into()));
    }
    params.tree.validate()?;
    check_training_input(x, targets.nrows())?;
    let binned = Binned::new(x, params.tree.max_bins);
    let target_cols: Vec<Vec<f64>> = (0..targets.ncols()).map(|j| targets.column(j)).collect();
    let jobs: Vec<(usize, usize)> = (0..targets.ncols())
        .flat_map(|j| (0..params.n_trees).map(move |i| (j, i)))
        .collect();
    let trees: Vec<RegressionTree> = jobs
        .par_iter()
        .map(|&(j, i)| {
            let mut rng = stream(params.tree.seed, &[j as u64, i as u64]);
            let weights = params
                .bootstrap
                .then(|| bootstrap_counts(binned.n_rows, &mut rng));
            RegressionTree::fit_binned(
                &binned,
                &target_cols[j],
                weights.as_deref(),
                &params.tree,
                &mut rng,
            )
        })
        .collect();
    let mut forests: Vec<Vec<RegressionTree>> = vec![Vec::with_capacity(params.n_trees); targets.ncols()];
    for ((j, _), tree) in jobs.into_iter().zip(trees) {
        forests[j].push(tree);
    }
    Ok(ForestModel {
        params: *params,
        n_features: x.ncols(),
        forests,
    })
}

impl ForestModel {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_targets(&self) -> usize {
        self.forests.len()
    }

    pub fn trees(&self, target: usize) -> &[RegressionTree] {
        &self.forests[target]
    }

    /// Mean tree prediction for every target.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self
            .forests
            .iter()
            .map(|trees| {
                shifted_mean(trees.iter().map(|t| (*t.tree.predict(x), 1.0)))
                    .expect("forests hold at least one tree")
            })
            .collect())
    }

    /// Out-of-bag predictions for the training matrix `x`: each row averages
    /// only the trees whose bootstrap sample left it out. Bootstrap samples
    /// are regenerated from the tree seeds. Rows that every tree saw, and all
    /// rows when bootstrapping is off, get the ordinary prediction.
    pub fn oob_predict_matrix(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        let n = x.nrows();
        let columns: Vec<Vec<f64>> = self
            .forests
            .par_iter()
            .enumerate()
            .map(|(j, trees)| {
                let mut sum = vec![0.0; n];
                let mut count = vec![0u32; n];
                if self.params.bootstrap {
                    for (i, tree) in trees.iter().enumerate() {
                        let mut rng = stream(self.params.tree.seed, &[j as u64, i as u64]);
                        let bag = bootstrap_counts(n, &mut rng);
                        for r in (0..n).filter(|&r| bag[r] == 0) {
                            sum[r] += *tree.tree.predict(x.row(r));
                            count[r] += 1;
                        }
                    }
                }
                (0..n)
                    .map(|r| {
                        if count[r] > 0 {
                            sum[r] / count[r] as f64
                        } else {
                            shifted_mean(trees.iter().map(|t| (*t.tree.predict(x.row(r)), 1.0)))
                                .expect("forests hold at least one tree")
                        }
                    })
                    .collect()
            })
            .collect();
        let mut data = Vec::with_capacity(n * columns.len());
        for r in 0..n {
            data.extend(columns.iter().map(|c| c[r]));
        }
        FeatureMatrix::new(n, columns.len(), data)
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let rows: Vec<&[f64]> = x.rows_iter().collect();
        let preds = rows
            .par_iter()
            .map(|row| self.predict(row))
            .collect::<Result<Vec<_>>>()?;
        FeatureMatrix::new(x.nrows(), self.n_targets(), preds.concat())
    }
}

/// Naive, moving-average and exponential-smoothing one-step forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineModel {
    Naive,
    MovingAverage { window: usize },
    ExponentialSmoothing { alpha: f64 },
}

impl BaselineModel {
    pub const DEFAULT_WINDOW: usize = 3;
    pub const DEFAULT_ALPHA: f64 = 0.3;

    pub fn name(&self) -> &'static str {
        match self {
            BaselineModel::Naive => "naive",
            BaselineModel::MovingAverage { .. } => "moving_average",
            BaselineModel::ExponentialSmoothing { .. } => "exponential_smoothing",
        }
    }

    pub fn defaults() -> [BaselineModel; 3] {
        [
            BaselineModel::Naive,
            BaselineModel::MovingAverage {
                window: Self::DEFAULT_WINDOW,
            },
            BaselineModel::ExponentialSmoothing {
                alpha: Self::DEFAULT_ALPHA,
            },
        ]
    }
}

/// Predicts the value following `history` (oldest first).
pub fn forecast_baseline(model: &BaselineModel, history: &[f64]) -> Result<f64> {
    let Some(&last) = history.last() else {
        return Err(Error::InsufficientData("baseline needs at least one value".into()));
    };
    match *model {
        BaselineModel::Naive => Ok(last),
        BaselineModel::MovingAverage { window } => {
            if window == 0 {
                return Err(Error::InvalidParameter("moving-average window must be >= 1".into()));
            }
            if history.len() < window {
                return Err(Error::InsufficientData(format!(
                    "moving average of window {window} needs {window} values, got {}",
                    history.len()
                )));
            }
            let tail = &history[history.len() - window..];
            Ok(tail.iter().sum::<f64>() / window as f64)
        }
        BaselineModel::ExponentialSmoothing { alpha } => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "smoothing factor must lie in (0, 1], got {alpha}"
                )));
            }
            let mut level = history[0];
            for &x in &history[1..] {
                level = alpha * x + (1.0 - alpha) * level;
            }
            Ok(level)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    fn training_mse(tree: &RegressionTree, x: &FeatureMatrix, y: &[f64]) -> f64 {
        x.rows_iter()
            .zip(y)
            .map(|(row, t)| (tree.predict(row).unwrap() - t).powi(2))
            .sum::<f64>()
            / y.len() as f64
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let x = matrix(&[&[0.0], &[1.0], &[2.0]]);
        let tree = RegressionTree::fit(&x, &[0.7; 3], &RegressionTreeParams::exhaustive(4)).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.predict(&[10.0]).unwrap(), 0.7);
    }

    #[test]
    fn two_point_split() {
        let x = matrix(&[&[0.0], &[1.0]]);
        let y = [0.0, 1.0];
        let tree = RegressionTree::fit(&x, &y, &RegressionTreeParams::exhaustive(1)).unwrap();
        match &tree.nodes()[0] {
            Node::Split { threshold, .. } => assert!(*threshold > 0.0 && *threshold < 1.0),
            _ => panic!("expected split"),
        }
        assert_eq!(tree.predict(&[0.0]).unwrap(), 0.0);
        assert_eq!(tree.predict(&[1.0]).unwrap(), 1.0);
        assert_eq!(training_mse(&tree, &x, &y), 0.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        let x = FeatureMatrix::zeros(0, 2);
        assert!(RegressionTree::fit(&x, &[], &RegressionTreeParams::default()).is_err());
    }

    #[test]
    fn degenerate_forest_equals_tree() {
        let x = matrix(&[&[0.1, 3.0], &[0.5, 1.0], &[0.9, 2.0], &[0.2, 0.0], &[0.7, 5.0]]);
        let y = [1.0, 2.0, 0.5, 1.5, 3.0];
        let tree_params = RegressionTreeParams {
            feature_subset_size: Some(2),
            min_samples_split: 2,
            ..Default::default()
        };
        let tree = RegressionTree::fit(&x, &y, &tree_params).unwrap();
        let targets = FeatureMatrix::new(5, 1, y.to_vec()).unwrap();
        let forest = fit_rfr(
            &x,
            &targets,
            &ForestParams {
                n_trees: 1,
                bootstrap: false,
                tree: tree_params,
            },
        )
        .unwrap();
        for probe in [[0.0, 0.0], [0.3, 2.5], [1.0, 4.0], [0.6, 1.5]] {
            assert_eq!(forest.predict(&probe).unwrap()[0], tree.predict(&probe).unwrap());
        }
    }

    #[test]
    fn bootstrap_off_full_features_all_trees_identical() {
        let x = matrix(&[&[0.1, 3.0], &[0.5, 1.0], &[0.9, 2.0], &[0.2, 0.0]]);
        let targets = FeatureMatrix::new(4, 1, vec![1.0, 2.0, 0.5, 1.5]).unwrap();
        let forest = fit_rfr(
            &x,
            &targets,
            &ForestParams {
                n_trees: 5,
                bootstrap: false,
                tree: RegressionTreeParams::exhaustive(3),
            },
        )
        .unwrap();
        let trees = forest.trees(0);
        assert!(trees.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn forest_is_deterministic_per_seed() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), i as f64])
            .collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let targets = FeatureMatrix::from_rows(
            &rows.iter().map(|r| vec![r[0] + r[1], r[2] * 0.1]).collect::<Vec<_>>(),
        )
        .unwrap();
        let params = ForestParams {
            n_trees: 8,
            ..Default::default()
        };
        let a = fit_rfr(&x, &targets, &params).unwrap();
        let b = fit_rfr(&x, &targets, &params).unwrap();
        assert_eq!(a, b);
        let probe = [0.2, -0.3, 17.0];
        assert_eq!(a.predict(&probe).unwrap(), b.predict(&probe).unwrap());
        assert!(a.predict(&[1.0]).is_err());
    }

    #[test]
    fn constant_targets_predicted_exactly() {
        let x = matrix(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let targets = FeatureMatrix::new(4, 1, vec![0.42; 4]).unwrap();
        let forest = fit_rfr(&x, &targets, &ForestParams { n_trees: 10, ..Default::default() }).unwrap();
        assert_eq!(forest.predict(&[7.0]).unwrap(), vec![0.42]);
    }

    #[test]
    fn two_tree_mean() {
        // trees with leaves 0.2 and 0.4 average to 0.3
        let x = matrix(&[&[0.0], &[1.0]]);
        let t1 = RegressionTree::fit(&x, &[0.2, 0.2], &RegressionTreeParams::exhaustive(1)).unwrap();
        let t2 = RegressionTree::fit(&x, &[0.4, 0.4], &RegressionTreeParams::exhaustive(1)).unwrap();
        let forest = ForestModel {
            params: ForestParams::default(),
            n_features: 1,
            forests: vec![vec![t1, t2]],
        };
        assert!((forest.predict(&[0.5]).unwrap()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn baselines() {
        let hist = [0.1, 0.3, 0.42];
        assert_eq!(forecast_baseline(&BaselineModel::Naive, &hist).unwrap(), 0.42);
        assert_eq!(
            forecast_baseline(&BaselineModel::MovingAverage { window: 3 }, &[1.0, 2.0, 3.0]).unwrap(),
            2.0
        );
        assert_eq!(
            forecast_baseline(&BaselineModel::ExponentialSmoothing { alpha: 1.0 }, &hist).unwrap(),
            0.42
        );
        // s = 0.5*3 + 0.5*(0.5*2 + 0.5*1) = 2.25
        assert_eq!(
            forecast_baseline(&BaselineModel::ExponentialSmoothing { alpha: 0.5 }, &[1.0, 2.0, 3.0])
                .unwrap(),
            2.25
        );
        assert!(forecast_baseline(&BaselineModel::Naive, &[]).is_err());
        assert!(forecast_baseline(&BaselineModel::MovingAverage { window: 4 }, &hist).is_err());
        assert!(forecast_baseline(&BaselineModel::ExponentialSmoothing { alpha: 0.0 }, &hist).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mse_non_increasing_in_depth(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, -2.0f64..2.0), 4..30)
        ) {
            let rows: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let x = FeatureMatrix::from_rows(&rows).unwrap();
            let mut prev = f64::INFINITY;
            for depth in 1..6 {
                let tree = RegressionTree::fit(&x, &y, &RegressionTreeParams::exhaustive(depth)).unwrap();
                let mse = training_mse(&tree, &x, &y);
                prop_assert!(mse <= prev + 1e-12);
                prev = mse;
            }
        }

        #[test]
        fn forest_prediction_within_target_range(
            pts in prop::collection::vec((0.0f64..1.0, -2.0f64..2.0), 3..40),
            probe in -1.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let x = FeatureMatrix::from_rows(&pts.iter().map(|p| [p.0]).collect::<Vec<_>>()).unwrap();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let targets = FeatureMatrix::new(y.len(), 1, y.clone()).unwrap();
            let params = ForestParams {
                n_trees: 7,
                bootstrap: true,
                tree: RegressionTreeParams { seed, min_samples_split: 2, ..Default::default() },
            };
            let forest = fit_rfr(&x, &targets, &params).unwrap();
            let p = forest.predict(&[probe]).unwrap()[0];
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}
