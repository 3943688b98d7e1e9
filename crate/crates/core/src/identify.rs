//! Anomaly-existence classification with a two-layer stacking ensemble.
//!
//! The base layer holds a decision tree, a random forest, a k-nearest
//! neighbour classifier and gradient boosted trees. Each produces a
//! positive-class probability; a logistic regression over those four
//! probabilities is the meta layer. Meta training data comes from
//! out-of-fold base predictions so no base model scores a row it saw.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::FeatureMatrix;
use crate::error::{Error, Result};
use crate::neighbors::KdTree;
use crate::rng::{derive_seed, stream};
use crate::tree::{grow, Binned, Gini, GrowParams, Newton, Node, Tree, DEFAULT_MAX_BINS, MAX_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseClassifierKind {
    DecisionTree,
    RandomForest,
    Knn,
    Gbdt,
}

impl BaseClassifierKind {
    /// Base-layer order; meta feature `j` comes from `ALL[j]`.
    pub const ALL: [BaseClassifierKind; 4] = [
        BaseClassifierKind::DecisionTree,
        BaseClassifierKind::RandomForest,
        BaseClassifierKind::Knn,
        BaseClassifierKind::Gbdt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseClassifierKind::DecisionTree => "decision_tree",
            BaseClassifierKind::RandomForest => "random_forest",
            BaseClassifierKind::Knn => "knn",
            BaseClassifierKind::Gbdt => "gbdt",
        }
    }
}

fn check_xy(x: &FeatureMatrix, n_labels: usize) -> Result<()> {
    if x.nrows() != n_labels {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: n_labels,
        });
    }
    if x.nrows() == 0 {
        return Err(Error::InsufficientData("empty training matrix".into()));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("training matrix has non-finite values".into()));
    }
    Ok(())
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

fn argmax(p: &[f64]) -> usize {
    // first maximum wins, so ties go to the lowest class
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

fn check_labels(labels: &[u8], n_classes: usize) -> Result<()> {
    if !(1..=MAX_CLASSES).contains(&n_classes) {
        return Err(Error::InvalidParameter(format!(
            "n_classes must be in 1..={MAX_CLASSES}"
        )));
    }
    if labels.iter().any(|&c| c as usize >= n_classes) {
        return Err(Error::Validation(format!("labels must be below {n_classes}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassTreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub max_bins: usize,
}

impl Default for ClassTreeParams {
    fn default() -> Self {
        Self {
            max_depth: Some(10),
            min_samples_split: 2,
            max_bins: DEFAULT_MAX_BINS,
        }
    }
}

/// Gini classification tree over every feature; leaves hold class frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTree {
    n_features: usize,
    n_classes: usize,
    tree: Tree<[f64; MAX_CLASSES]>,
}

impl ClassificationTree {
    pub fn fit(x: &FeatureMatrix, labels: &[u8], n_classes: usize, params: &ClassTreeParams) -> Result<Self> {
        check_xy(x, labels.len())?;
        check_labels(labels, n_classes)?;
        let binned = Binned::new(x, params.max_bins);
        let tree = grow(
            &binned,
            None,
            &Gini { labels, n_classes },
            GrowParams {
                max_depth: params.max_depth,
                min_samples_split: params.min_samples_split.max(2),
                max_features: x.ncols(),
            },
            &mut stream(0, &[]),
        );
        Ok(Self {
            n_features: x.ncols(),
            n_classes,
            tree,
        })
    }

    pub fn nodes(&self) -> &[Node<[f64; MAX_CLASSES]>] {
        self.tree.nodes()
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    /// Class frequencies of the leaf reached by `x`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<&[f64]> {
        check_dim(self.n_features, x)?;
        Ok(&self.tree.predict(x)[..self.n_classes])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestClassifierParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features considered per split; `None` means `ceil(sqrt(n))`.
    pub feature_subset_size: Option<usize>,
    pub max_bins: usize,
}

impl Default for ForestClassifierParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            feature_subset_size: None,
            max_bins: DEFAULT_MAX_BINS,
        }
    }
}

/// Bagged gini trees; each tree casts one vote for its leaf's majority class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassForest {
    n_features: usize,
    n_classes: usize,
    trees: Vec<Tree<[f64; MAX_CLASSES]>>,
}

impl ClassForest {
    pub fn fit(
        x: &FeatureMatrix,
        labels: &[u8],
        n_classes: usize,
        params: &ForestClassifierParams,
        seed: u64,
    ) -> Result<Self> {
        check_xy(x, labels.len())?;
        check_labels(labels, n_classes)?;
        if params.n_trees == 0 {
            return Err(Error::InvalidParameter("n_trees must be >= 1".into()));
        }
        let n = x.ncols();
        let subset = params
            .feature_subset_size
            .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
            .clamp(1, n.max(1));
        let binned = Binned::new(x, params.max_bins);
        let criterion = Gini { labels, n_classes };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, &[i as u64]);
                let weights = crate::forecast::bootstrap_counts(x.nrows(), &mut rng);
                grow(
                    &binned,
                    Some(&weights),
                    &criterion,
                    GrowParams {
                        max_depth: params.max_depth,
                        min_samples_split: params.min_samples_split.max(2),
                        max_features: subset,
                    },
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            n_features: n,
            n_classes,
            trees,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Fraction of trees voting for each class.
    pub fn vote_fractions(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n_features, x)?;
        let mut votes = vec![0usize; self.n_classes];
        for tree in &self.trees {
            votes[argmax(&tree.predict(x)[..self.n_classes])] += 1;
        }
        let total = self.trees.len() as f64;
        Ok(votes.into_iter().map(|v| v as f64 / total).collect())
    }

    /// Majority class; ties go to the lowest class.
    pub fn predict_class(&self, x: &[f64]) -> Result<u8> {
        Ok(argmax(&self.vote_fractions(x)?) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// Stores the training set; probability is the positive share of the k
/// nearest rows, ties in distance going to the lowest training index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnClassifier {
    k: usize,
    index: KdTree,
    labels: Vec<bool>,
}

impl KnnClassifier {
    pub fn fit(x: &FeatureMatrix, y: &[bool], params: &KnnParams) -> Result<Self> {
        check_xy(x, y.len())?;
        if params.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        Ok(Self {
            k: params.k,
            index: KdTree::new(x.clone()),
            labels: y.to_vec(),
        })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.index.points().ncols(), x)?;
        let nn = self.index.nearest(x, self.k);
        let pos = nn.iter().filter(|(_, i)| self.labels[*i]).count();
        Ok(pos as f64 / nn.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub max_bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_split: 2,
            max_bins: DEFAULT_MAX_BINS,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Log-loss of a raw score against a binary label.
fn log_loss(score: f64, y: bool) -> f64 {
    if y {
        softplus(-score)
    } else {
        softplus(score)
    }
}

const MAX_STEP_HALVINGS: usize = 30;

/// Boosted regression trees on log-loss gradients with a logistic link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtClassifier {
    n_features: usize,
    init: f64,
    /// Each tree with the step it was added at.
    trees: Vec<(f64, Tree<f64>)>,
    /// Mean training log-loss before the first and after every round.
    loss_trace: Vec<f64>,
}

impl GbdtClassifier {
    /// Starts from the log-odds of the positive rate. Every round fits a
    /// depth-limited tree to the residuals with Newton leaf values and adds it
    /// at the learning rate, halving the step while training loss would rise;
    /// a round that cannot lower the loss adds nothing.
    pub fn fit(x: &FeatureMatrix, y: &[bool], params: &GbdtParams) -> Result<Self> {
        check_xy(x, y.len())?;
        if !(params.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        let n = y.len();
        let pos = y.iter().filter(|&&v| v).count();
        if pos == 0 || pos == n {
            return Err(Error::InsufficientData("gbdt needs both classes".into()));
        }
        let rate = pos as f64 / n as f64;
        let init = (rate / (1.0 - rate)).ln();
        let mut scores = vec![init; n];
        let mean_loss = |s: &[f64]| s.iter().zip(y).map(|(&z, &t)| log_loss(z, t)).sum::<f64>() / n as f64;
        let mut loss = mean_loss(&scores);
        let mut loss_trace = vec![loss];
        let binned = Binned::new(x, params.max_bins);
        let mut trees = Vec::new();
        let mut residual = vec![0.0; n];
        let mut hessian = vec![0.0; n];
        let mut step_out = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut rng = stream(0, &[]);
        for _ in 0..params.n_rounds {
            for i in 0..n {
                let p = sigmoid(scores[i]);
                residual[i] = if y[i] { 1.0 } else { 0.0 } - p;
                hessian[i] = p * (1.0 - p);
            }
            let tree = grow(
                &binned,
                None,
                &Newton {
                    residual: &residual,
                    hessian: &hessian,
                },
                GrowParams {
                    max_depth: Some(params.max_depth),
                    min_samples_split: params.min_samples_split.max(2),
                    max_features: x.ncols(),
                },
                &mut rng,
            );
            for (i, row) in x.rows_iter().enumerate() {
                step_out[i] = *tree.predict(row);
            }
            let mut step = params.learning_rate;
            let mut accepted = None;
            for _ in 0..=MAX_STEP_HALVINGS {
                for i in 0..n {
                    trial[i] = scores[i] + step * step_out[i];
                }
                let new_loss = mean_loss(&trial);
                if new_loss <= loss {
                    accepted = Some(new_loss);
                    break;
                }
                step /= 2.0;
            }
            if let Some(new_loss) = accepted {
                std::mem::swap(&mut scores, &mut trial);
                loss = new_loss;
                trees.push((step, tree));
            }
            loss_trace.push(loss);
        }
        Ok(Self {
            n_features: x.ncols(),
            init,
            trees,
            loss_trace,
        })
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n_features, x)?;
        Ok(self.init
            + self
                .trees
                .iter()
                .map(|(step, t)| step * t.predict(x))
                .sum::<f64>())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(x)?))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseParams {
    pub decision_tree: ClassTreeParams,
    pub random_forest: ForestClassifierParams,
    pub knn: KnnParams,
    pub gbdt: GbdtParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseClassifier {
    /// Fitted on a single class; always returns that class's probability.
    Constant {
        kind: BaseClassifierKind,
        n_features: usize,
        probability: f64,
    },
    DecisionTree(ClassificationTree),
    RandomForest(ClassForest),
    Knn(KnnClassifier),
    Gbdt(GbdtClassifier),
}

impl BaseClassifier {
    pub fn kind(&self) -> BaseClassifierKind {
        match self {
            BaseClassifier::Constant { kind, .. } => *kind,
            BaseClassifier::DecisionTree(_) => BaseClassifierKind::DecisionTree,
            BaseClassifier::RandomForest(_) => BaseClassifierKind::RandomForest,
            BaseClassifier::Knn(_) => BaseClassifierKind::Knn,
            BaseClassifier::Gbdt(_) => BaseClassifierKind::Gbdt,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, BaseClassifier::Constant { .. })
    }

    /// Probability of the positive class.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        match self {
            BaseClassifier::Constant {
                n_features,
                probability,
                ..
            } => {
                check_dim(*n_features, x)?;
                Ok(*probability)
            }
            BaseClassifier::DecisionTree(t) => Ok(t.predict_proba(x)?[1]),
            BaseClassifier::RandomForest(f) => Ok(f.vote_fractions(x)?[1]),
            BaseClassifier::Knn(m) => m.predict_proba(x),
            BaseClassifier::Gbdt(m) => m.predict_proba(x),
        }
    }
}

fn as_labels(y: &[bool]) -> Vec<u8> {
    y.iter().map(|&v| v as u8).collect()
}

/// Fits one base classifier on binary labels. Single-class labels give a
/// constant classifier and a warning.
pub fn fit_base(
    kind: BaseClassifierKind,
    x: &FeatureMatrix,
    y: &[bool],
    params: &BaseParams,
    seed: u64,
) -> Result<BaseClassifier> {
    check_xy(x, y.len())?;
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        warn!(
            "{}: training labels have a single class; fitting a constant classifier",
            kind.name()
        );
        return Ok(BaseClassifier::Constant {
            kind,
            n_features: x.ncols(),
            probability: if pos == 0 { 0.0 } else { 1.0 },
        });
    }
    Ok(match kind {
        BaseClassifierKind::DecisionTree => BaseClassifier::DecisionTree(ClassificationTree::fit(
            x,
            &as_labels(y),
            2,
            &params.decision_tree,
        )?),
        BaseClassifierKind::RandomForest => BaseClassifier::RandomForest(ClassForest::fit(
            x,
            &as_labels(y),
            2,
            &params.random_forest,
            seed,
        )?),
        BaseClassifierKind::Knn => BaseClassifier::Knn(KnnClassifier::fit(x, y, &params.knn)?),
        BaseClassifierKind::Gbdt => BaseClassifier::Gbdt(GbdtClassifier::fit(x, y, &params.gbdt)?),
    })
}

/// Assignment of training rows to out-of-fold folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OofPlan {
    folds: usize,
    assignment: Vec<usize>,
}

impl OofPlan {
    /// Shuffles each class with `seed` and deals its rows round-robin, so
    /// every fold receives a near-equal share of both classes.
    pub fn stratified(y: &[bool], folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::InvalidParameter("fold count must be >= 2".into()));
        }
        let mut rng = stream(seed, &[]);
        let mut assignment = vec![0; y.len()];
        let mut next = 0;
        for class in [false, true] {
            let mut rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
            rows.shuffle(&mut rng);
            for r in rows {
                assignment[r] = next % folds;
                next += 1;
            }
        }
        Ok(Self { folds, assignment })
    }

    pub fn from_assignment(assignment: Vec<usize>, folds: usize) -> Result<Self> {
        if folds < 2 {
            return Err(Error::InvalidParameter("fold count must be >= 2".into()));
        }
        if assignment.iter().any(|&f| f >= folds) {
            return Err(Error::InvalidParameter("fold index out of range".into()));
        }
        Ok(Self { folds, assignment })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.assignment[row]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Rows held out in `fold` and the rows used to train for it.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignment.len()).partition(|&i| self.assignment[i] == fold)
    }
}

/// Entry `(i, j)` is the positive probability for row `i` from base `kinds[j]`
/// trained on every fold except row `i`'s.
pub fn make_oof_meta_features(
    x: &FeatureMatrix,
    y: &[bool],
    kinds: &[BaseClassifierKind],
    plan: &OofPlan,
    params: &BaseParams,
    seed: u64,
) -> Result<FeatureMatrix> {
    check_xy(x, y.len())?;
    if plan.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: plan.len(),
        });
    }
    for fold in 0..plan.folds() {
        let (_, train) = plan.split(fold);
        let pos = train.iter().filter(|&&i| y[i]).count();
        if pos == 0 || pos == train.len() {
            return Err(Error::InsufficientData(format!(
                "training rows outside fold {fold} hold a single class; use a larger fold count or a stratified plan"
            )));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..plan.folds())
        .flat_map(|f| (0..kinds.len()).map(move |j| (f, j)))
        .collect();
    let results: Vec<Vec<(usize, f64)>> = jobs
        .par_iter()
        .map(|&(fold, j)| -> Result<Vec<(usize, f64)>> {
            let (held, train) = plan.split(fold);
            let xt = x.select_rows(&train);
            let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let model = fit_base(
                kinds[j],
                &xt,
                &yt,
                params,
                derive_seed(seed, &[fold as u64, j as u64]),
            )?;
            held.into_iter()
                .map(|i| Ok((i, model.predict_proba(x.row(i))?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut meta = FeatureMatrix::zeros(x.nrows(), kinds.len());
    for (&(_, j), col) in jobs.iter().zip(results) {
        for (i, p) in col {
            meta.row_mut(i)[j] = p;
        }
    }
    Ok(meta)
}

/// Logistic regression over the four base probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticMeta {
    pub weights: [f64; 4],
    pub intercept: f64,
}

impl LogisticMeta {
    pub fn probability(&self, base: &[f64; 4]) -> f64 {
        let z = self.intercept + self.weights.iter().zip(base).map(|(w, p)| w * p).sum::<f64>();
        sigmoid(z)
    }

    /// Parameters as `[w0, w1, w2, w3, intercept]`.
    pub fn to_params(&self) -> [f64; 5] {
        let w = self.weights;
        [w[0], w[1], w[2], w[3], self.intercept]
    }

    pub fn from_params(p: &[f64; 5]) -> Self {
        Self {
            weights: [p[0], p[1], p[2], p[3]],
            intercept: p[4],
        }
    }
}

fn meta_score(params: &[f64; 5], row: &[f64]) -> f64 {
    params[4] + row.iter().zip(params).map(|(x, w)| x * w).sum::<f64>()
}

/// Negative L2-regularized log-likelihood of the meta layer:
/// `sum_i logloss(y_i, w.x_i + b) + l2/2 * |w|^2`. The intercept is not
/// penalized.
pub fn meta_objective(params: &[f64; 5], meta: &FeatureMatrix, y: &[bool], l2: f64) -> f64 {
    let data: f64 = meta
        .rows_iter()
        .zip(y)
        .map(|(row, &t)| log_loss(meta_score(params, row), t))
        .sum();
    data + 0.5 * l2 * params[..4].iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of [`meta_objective`].
pub fn meta_gradient(params: &[f64; 5], meta: &FeatureMatrix, y: &[bool], l2: f64) -> [f64; 5] {
    let mut g = [0.0; 5];
    for (row, &t) in meta.rows_iter().zip(y) {
        let err = sigmoid(meta_score(params, row)) - if t { 1.0 } else { 0.0 };
        for j in 0..4 {
            g[j] += err * row[j];
        }
        g[4] += err;
    }
    for j in 0..4 {
        g[j] += l2 * params[j];
    }
    g
}

fn meta_hessian(params: &[f64; 5], meta: &FeatureMatrix, l2: f64) -> [[f64; 5]; 5] {
    let mut h = [[0.0; 5]; 5];
    for row in meta.rows_iter() {
        let p = sigmoid(meta_score(params, row));
        let s = p * (1.0 - p);
        let x = [row[0], row[1], row[2], row[3], 1.0];
        for a in 0..5 {
            for b in 0..5 {
                h[a][b] += s * x[a] * x[b];
            }
        }
    }
    for (j, row) in h.iter_mut().enumerate().take(4) {
        row[j] += l2;
    }
    h
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for col in 0..5 {
        let piv = (col..5).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..5 {
            let f = a[r][col] / a[col][col];
            for c in col..5 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 5];
    for r in (0..5).rev() {
        let s: f64 = (r + 1..5).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaFit {
    pub model: LogisticMeta,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes [`meta_objective`] by damped Newton steps. Each step is halved
/// until the objective does not increase, so the returned iterate is the best
/// one seen even when the iteration cap is hit.
pub fn fit_meta(meta: &FeatureMatrix, y: &[bool], l2: f64, max_iter: usize) -> Result<MetaFit> {
    if meta.ncols() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: meta.ncols(),
        });
    }
    check_xy(meta, y.len())?;
    if l2 < 0.0 || !l2.is_finite() {
        return Err(Error::InvalidParameter("l2 must be finite and >= 0".into()));
    }
    let mut params = [0.0; 5];
    let mut obj = meta_objective(&params, meta, y, l2);
    let tol = 1e-9 * (y.len() as f64).max(1.0);
    for iter in 0..max_iter {
        let g = meta_gradient(&params, meta, y, l2);
        if g.iter().all(|v| v.abs() <= tol) {
            return Ok(MetaFit {
                model: LogisticMeta::from_params(&params),
                iterations: iter,
                converged: true,
            });
        }
        let h = meta_hessian(&params, meta, l2);
        // fall back to a gradient step when the Hessian is singular
        let dir = solve5(h, g).unwrap_or(g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut cand = params;
            for j in 0..5 {
                cand[j] -= t * dir[j];
            }
            let c = meta_objective(&cand, meta, y, l2);
            if c <= obj {
                moved = c < obj || cand != params;
                params = cand;
                obj = c;
                break;
            }
            t /= 2.0;
        }
        if !moved {
            break;
        }
    }
    let g = meta_gradient(&params, meta, y, l2);
    let converged = g.iter().all(|v| v.abs() <= tol);
    if !converged {
        warn!("meta logistic regression stopped before convergence; using the best iterate");
    }
    Ok(MetaFit {
        model: LogisticMeta::from_params(&params),
        iterations: max_iter,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackingParams {
    pub base: BaseParams,
    pub folds: usize,
    pub l2: f64,
    pub max_iter: usize,
    pub threshold: f64,
}

impl Default for StackingParams {
    fn default() -> Self {
        Self {
            base: BaseParams::default(),
            folds: 5,
            l2: 1.0,
            max_iter: 500,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    n_features: usize,
    bases: Vec<BaseClassifier>,
    meta: LogisticMeta,
    threshold: f64,
    /// Set when training labels had a single class.
    constant: Option<bool>,
}

/// Fits the four bases on all rows and the meta layer on their out-of-fold
/// probabilities. Single-class labels give a constant model and a warning.
pub fn fit_stacking(x: &FeatureMatrix, y: &[bool], params: &StackingParams, seed: u64) -> Result<StackingModel> {
    check_xy(x, y.len())?;
    if !(0.0..=1.0).contains(&params.threshold) {
        return Err(Error::InvalidParameter("threshold must be in [0, 1]".into()));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        let class = pos > 0;
        warn!("stacking: training labels have a single class; the model always predicts {class}");
        let bases = BaseClassifierKind::ALL
            .iter()
            .map(|&kind| BaseClassifier::Constant {
                kind,
                n_features: x.ncols(),
                probability: class as u8 as f64,
            })
            .collect();
        return Ok(StackingModel {
            n_features: x.ncols(),
            bases,
            meta: LogisticMeta {
                weights: [0.0; 4],
                intercept: 0.0,
            },
            threshold: params.threshold,
            constant: Some(class),
        });
    }
    let minority = pos.min(y.len() - pos);
    if minority < 2 {
        return Err(Error::InsufficientData(
            "out-of-fold stacking needs at least 2 rows of each class".into(),
        ));
    }
    let folds = params.folds.min(minority);
    if folds < params.folds {
        warn!("stacking: only {minority} minority rows; using {folds} folds");
    }
    let plan = OofPlan::stratified(y, folds, derive_seed(seed, &[0]))?;
    let oof_seed = derive_seed(seed, &[1]);
    let meta_x = make_oof_meta_features(x, y, &BaseClassifierKind::ALL, &plan, &params.base, oof_seed)?;
    let fit = fit_meta(&meta_x, y, params.l2, params.max_iter)?;
    let bases = BaseClassifierKind::ALL
        .par_iter()
        .enumerate()
        .map(|(j, &kind)| fit_base(kind, x, y, &params.base, derive_seed(seed, &[2, j as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(StackingModel {
        n_features: x.ncols(),
        bases,
        meta: fit.model,
        threshold: params.threshold,
        constant: None,
    })
}

impl StackingModel {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn bases(&self) -> &[BaseClassifier] {
        &self.bases
    }

    pub fn meta(&self) -> &LogisticMeta {
        &self.meta
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    /// Assembles a model from parts; used to check the meta layer in isolation.
    pub fn from_parts(bases: Vec<BaseClassifier>, meta: LogisticMeta, threshold: f64) -> Result<Self> {
        if bases.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                got: bases.len(),
            });
        }
        let n_features = match &bases[0] {
            BaseClassifier::Constant { n_features, .. } => *n_features,
            BaseClassifier::DecisionTree(t) => t.n_features,
            BaseClassifier::RandomForest(f) => f.n_features,
            BaseClassifier::Knn(k) => k.index.points().ncols(),
            BaseClassifier::Gbdt(g) => g.n_features,
        };
        Ok(Self {
            n_features,
            bases,
            meta,
            threshold,
            constant: None,
        })
    }

    pub fn base_probabilities(&self, x: &[f64]) -> Result<[f64; 4]> {
        check_dim(self.n_features, x)?;
        let mut p = [0.0; 4];
        for (slot, base) in p.iter_mut().zip(&self.bases) {
            *slot = base.predict_proba(x)?;
        }
        Ok(p)
    }

    /// Meta probability and whether it reaches the threshold.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, bool)> {
        if let Some(class) = self.constant {
            check_dim(self.n_features, x)?;
            return Ok((class as u8 as f64, class));
        }
        let p = self.meta.probability(&self.base_probabilities(x)?);
        Ok((p, p >= self.threshold))
    }
}

pub fn predict_stacking(model: &StackingModel, x: &[f64]) -> Result<(f64, bool)> {
    model.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> (FeatureMatrix, Vec<bool>) {
        let rows: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let v = i as f64 / 40.0;
                [v, ((i * 7) % 11) as f64]
            })
            .collect();
        let y = (0..40).map(|i| i >= 30).collect();
        (FeatureMatrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn single_class_gives_constant_zero() {
        let (x, _) = toy();
        let y = vec![false; x.nrows()];
        for kind in BaseClassifierKind::ALL {
            let m = fit_base(kind, &x, &y, &BaseParams::default(), 0).unwrap();
            assert!(m.is_constant());
            assert_eq!(m.predict_proba(&[0.3, 9.0]).unwrap(), 0.0);
        }
        let s = fit_stacking(&x, &y, &StackingParams::default(), 0).unwrap();
        assert_eq!(s.predict(&[0.9, 1.0]).unwrap(), (0.0, false));
    }

    #[test]
    fn knn_one_returns_own_label() {
        let (x, y) = toy();
        let m = KnnClassifier::fit(&x, &y, &KnnParams { k: 1 }).unwrap();
        for (i, row) in x.rows_iter().enumerate() {
            assert_eq!(m.predict_proba(row).unwrap(), y[i] as u8 as f64);
        }
    }

    #[test]
    fn gbdt_zero_rounds_is_base_rate() {
        let x = FeatureMatrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let y = [false, false, false, true];
        let m = GbdtClassifier::fit(
            &x,
            &y,
            &GbdtParams {
                n_rounds: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((m.predict_proba(&[5.0]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gbdt_loss_never_increases() {
        let (x, y) = toy();
        let m = GbdtClassifier::fit(&x, &y, &GbdtParams::default()).unwrap();
        for w in m.loss_trace().windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(m.loss_trace().last().unwrap() < &m.loss_trace()[0]);
    }

    #[test]
    fn leave_one_out_never_scores_own_row() {
        let x = FeatureMatrix::from_rows(&[[0.0], [0.1], [1.0], [1.1]]).unwrap();
        let y = [false, false, true, true];
        let plan = OofPlan::from_assignment(vec![0, 1, 2, 3], 4).unwrap();
        let meta = make_oof_meta_features(
            &x,
            &y,
            &[BaseClassifierKind::Knn],
            &plan,
            &BaseParams {
                knn: KnnParams { k: 1 },
                ..Default::default()
            },
            0,
        )
        .unwrap();
        // the nearest other row shares each row's label
        assert_eq!(meta.column(0), vec![0.0, 0.0, 1.0, 1.0]);
        // a 1-NN that had seen the row would score it as itself; check with a mislabeled twin
        let y2 = [false, true, false, true];
        let meta2 = make_oof_meta_features(
            &x,
            &y2,
            &[BaseClassifierKind::Knn],
            &plan,
            &BaseParams {
                knn: KnnParams { k: 1 },
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(meta2.get(0, 0), 1.0);
        assert_eq!(meta2.get(1, 0), 0.0);
    }

    #[test]
    fn single_class_complement_is_an_error() {
        let x = FeatureMatrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let y = [false, false, true];
        let plan = OofPlan::from_assignment(vec![0, 0, 1], 2).unwrap();
        let err = make_oof_meta_features(&x, &y, &BaseClassifierKind::ALL, &plan, &BaseParams::default(), 0);
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn stratified_plan_partitions_and_balances() {
        let y: Vec<bool> = (0..103).map(|i| i % 10 == 0).collect();
        let plan = OofPlan::stratified(&y, 5, 3).unwrap();
        assert_eq!(plan, OofPlan::stratified(&y, 5, 3).unwrap());
        let mut seen = vec![0; 103];
        for f in 0..5 {
            let (held, train) = plan.split(f);
            assert_eq!(held.len() + train.len(), 103);
            let pos = held.iter().filter(|&&i| y[i]).count();
            assert!((2..=3).contains(&pos));
            for i in held {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn separable_dt_oof_matches_labels() {
        let x = FeatureMatrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [10.0], [11.0], [12.0], [13.0]]).unwrap();
        let y = [false, false, false, false, true, true, true, true];
        let plan = OofPlan::stratified(&y, 2, 0).unwrap();
        let meta = make_oof_meta_features(
            &x,
            &y,
            &[BaseClassifierKind::DecisionTree],
            &plan,
            &BaseParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(meta.column(0), y.iter().map(|&v| v as u8 as f64).collect::<Vec<_>>());
    }

    #[test]
    fn meta_prediction_arithmetic() {
        let m = LogisticMeta {
            weights: [1.0; 4],
            intercept: -2.0,
        };
        assert_eq!(m.probability(&[0.5; 4]), 0.5);
        let p0: f64 = 0.2;
        let m = LogisticMeta {
            weights: [0.3, 0.0, 1.0, 2.0],
            intercept: (p0 / (1.0 - p0)).ln(),
        };
        assert!((m.probability(&[0.0; 4]) - p0).abs() < 1e-15);
    }

    #[test]
    fn threshold_boundary_is_anomalous() {
        let bases = BaseClassifierKind::ALL
            .iter()
            .map(|&kind| BaseClassifier::Constant {
                kind,
                n_features: 1,
                probability: 0.5,
            })
            .collect();
        let meta = LogisticMeta {
            weights: [1.0; 4],
            intercept: -2.0,
        };
        let s = StackingModel::from_parts(bases, meta, 0.5).unwrap();
        assert_eq!(s.predict(&[0.0]).unwrap(), (0.5, true));
        assert!(s.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn oracle_meta_features_separate_perfectly() {
        let y: Vec<bool> = (0..60).map(|i| i % 4 == 0).collect();
        let rows: Vec<[f64; 4]> = y.iter().map(|&v| [v as u8 as f64; 4]).collect();
        let meta = FeatureMatrix::from_rows(&rows).unwrap();
        let fit = fit_meta(&meta, &y, 1.0, 500).unwrap();
        assert!(fit.converged);
        for (row, &t) in rows.iter().zip(&y) {
            assert_eq!(fit.model.probability(row) >= 0.5, t);
        }
    }

    #[test]
    fn collinear_meta_columns_are_fine() {
        let y: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let rows: Vec<[f64; 4]> = (0..50).map(|i| [((i * 13) % 7) as f64 / 7.0; 4]).collect();
        let meta = FeatureMatrix::from_rows(&rows).unwrap();
        let fit = fit_meta(&meta, &y, 1.0, 500).unwrap();
        let w = fit.model.weights;
        assert!(w.iter().all(|v| (v - w[0]).abs() < 1e-8));
        assert!(fit.model.probability(&rows[0]).is_finite());
    }

    proptest! {
        #[test]
        fn meta_is_monotone_in_nonnegative_weights(
            w in prop::array::uniform4(0.0f64..3.0),
            b in -3.0f64..3.0,
            base in prop::array::uniform4(0.0f64..1.0),
            j in 0usize..4,
            bump in 0.0f64..1.0,
        ) {
            let m = LogisticMeta { weights: w, intercept: b };
            let mut up = base;
            up[j] = (up[j] + bump).min(1.0);
            prop_assert!(m.probability(&up) >= m.probability(&base));
        }
    }
}
