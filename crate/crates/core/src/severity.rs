//! Severity grading of flagged anomalies with a 3-nearest-neighbour model.
//!
//! Training rows are replicated by severity-dependent integer weights before
//! fitting, so rarer and more severe anomalies carry more neighbours. A query
//! takes the mean of its three nearest codes and rounds half up.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureMatrix, SeverityLevel};
use crate::error::{Error, Result};

/// Neighbours consulted per query.
pub const K: usize = 3;

/// Largest default replication factor.
pub const MAX_DEFAULT_WEIGHT: u32 = 10;

/// Euclidean distance between two vectors of equal length.
pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Replication factor per anomalous severity level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingWeights {
    pub low: u32,
    pub medium: u32,
    pub high: u32,
}

impl SamplingWeights {
    pub const UNIT: SamplingWeights = SamplingWeights {
        low: 1,
        medium: 1,
        high: 1,
    };

    pub fn new(low: u32, medium: u32, high: u32) -> Result<Self> {
        let w = Self { low, medium, high };
        if low == 0 || medium == 0 || high == 0 {
            return Err(Error::InvalidParameter("sampling weights must be >= 1".into()));
        }
        if !(low <= medium && medium <= high) {
            return Err(Error::InvalidParameter(
                "sampling weights must not decrease with severity".into(),
            ));
        }
        Ok(w)
    }

    /// `w(low) = 1` and `w(c) = clamp(ceil(count(low) / count(c)), 1, 10)`,
    /// raised where needed so weights never decrease with severity. A level
    /// with no rows takes the weight of the level below.
    pub fn from_counts(low: usize, medium: usize, high: usize) -> Self {
        let ratio = |c: usize| -> u32 {
            if c == 0 {
                1
            } else {
                (low.div_ceil(c) as u32).clamp(1, MAX_DEFAULT_WEIGHT)
            }
        };
        let medium_w = ratio(medium).max(1);
        let high_w = ratio(high).max(medium_w);
        Self {
            low: 1,
            medium: medium_w,
            high: high_w,
        }
    }

    pub fn for_levels(levels: &[SeverityLevel]) -> Self {
        let count = |l| levels.iter().filter(|&&v| v == l).count();
        Self::from_counts(
            count(SeverityLevel::Low),
            count(SeverityLevel::Medium),
            count(SeverityLevel::High),
        )
    }

    pub fn weight(&self, level: SeverityLevel) -> u32 {
        match level {
            SeverityLevel::Normal => 0,
            SeverityLevel::Low => self.low,
            SeverityLevel::Medium => self.medium,
            SeverityLevel::High => self.high,
        }
    }
}

impl Default for SamplingWeights {
    fn default() -> Self {
        Self::UNIT
    }
}

/// Replicates each row `w(level)` times, keeping rows in original order with
/// replicas adjacent. Returns the replicated features and levels.
pub fn weighted_oversample(
    features: &FeatureMatrix,
    levels: &[SeverityLevel],
    weights: &SamplingWeights,
) -> Result<(FeatureMatrix, Vec<SeverityLevel>)> {
    if features.nrows() != levels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            got: levels.len(),
        });
    }
    if levels.iter().any(|l| !l.is_anomalous()) {
        return Err(Error::Validation("oversampling expects anomalous rows only".into()));
    }
    let mut data = Vec::new();
    let mut out_levels = Vec::new();
    for (row, &level) in features.rows_iter().zip(levels) {
        for _ in 0..weights.weight(level) {
            data.extend_from_slice(row);
            out_levels.push(level);
        }
    }
    let matrix = FeatureMatrix::new(out_levels.len(), features.ncols(), data)?;
    Ok((matrix, out_levels))
}

/// Anomalous training rows after oversampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityKnnModel {
    features: FeatureMatrix,
    codes: Vec<u8>,
    weights: SamplingWeights,
}

/// Oversamples `features` by `weights` and stores the result.
pub fn fit_knn_severity(
    features: &FeatureMatrix,
    levels: &[SeverityLevel],
    weights: &SamplingWeights,
) -> Result<SeverityKnnModel> {
    let (features, levels) = weighted_oversample(features, levels, weights)?;
    if features.nrows() < K {
        return Err(Error::InsufficientData(format!(
            "severity model needs at least {K} rows after oversampling, got {}",
            features.nrows()
        )));
    }
    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("severity features have non-finite values".into()));
    }
    let distinct = levels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct == 1 {
        warn!("severity model trained on a single level; every query gets that level");
    }
    Ok(SeverityKnnModel {
        codes: levels.iter().map(|l| l.code()).collect(),
        features,
        weights: *weights,
    })
}

/// Maps a mean code to a level by rounding half up.
pub fn level_from_mean(mean: f64) -> SeverityLevel {
    let code = (mean + 0.5).floor().clamp(1.0, 3.0) as u8;
    SeverityLevel::from_code(code).unwrap_or(SeverityLevel::Low)
}

impl SeverityKnnModel {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn weights(&self) -> &SamplingWeights {
        &self.weights
    }

    /// Training rows of the three nearest neighbours by a full scan,
    /// equidistant rows resolving to the lowest index.
    pub fn neighbors(&self, x: &[f64]) -> Result<[usize; K]> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        let mut best: [(f64, usize); K] = [(f64::INFINITY, usize::MAX); K];
        for (i, row) in self.features.rows_iter().enumerate() {
            let d = euclidean_distance(row, x)?;
            // strict comparison keeps the earlier row on ties
            if d < best[K - 1].0 {
                let mut pos = K - 1;
                while pos > 0 && d < best[pos - 1].0 {
                    best[pos] = best[pos - 1];
                    pos -= 1;
                }
                best[pos] = (d, i);
            }
        }
        Ok(best.map(|(_, i)| i))
    }

    pub fn predict(&self, x: &[f64]) -> Result<SeverityLevel> {
        let nn = self.neighbors(x)?;
        let mean = nn.iter().map(|&i| self.codes[i] as f64).sum::<f64>() / K as f64;
        Ok(level_from_mean(mean))
    }
}

pub fn predict_severity(model: &SeverityKnnModel, x: &[f64]) -> Result<SeverityLevel> {
    model.predict(x)
}
