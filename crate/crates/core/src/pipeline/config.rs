use std::path::{Path, PathBuf};

use chrono::TimeZone;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::Timestamp;
use crate::error::{Error, Result};
use crate::forecast::ForestParams;
use crate::identify::{ForestClassifierParams, StackingParams};
use crate::ingest::DEFAULT_MAX_GAP;
use crate::severity::SamplingWeights;
use crate::synthgen::{AnomalyCampaign, Business, DEFAULT_DISK_COUNT};

/// Fleet simulation settings used by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub servers: usize,
    pub hours: usize,
    pub start: Timestamp,
    pub disk_count: usize,
    /// Normal hours per anomalous hour; `None` takes the business default.
    pub imbalance: Option<f64>,
    /// `false` generates no anomalies at all.
    pub anomalies: bool,
    /// Anomaly shapes; its `imbalance_ratio` is replaced by `imbalance`.
    pub campaign: AnomalyCampaign,
    pub missing_rate: f64,
    pub noise_rate: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            servers: 20,
            hours: 3000,
            start: chrono::Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            disk_count: DEFAULT_DISK_COUNT,
            imbalance: None,
            anomalies: true,
            campaign: AnomalyCampaign::default(),
            missing_rate: 0.0,
            noise_rate: 0.0,
        }
    }
}

/// Which vectors the identification and severity stages learn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSource {
    /// Observed KPI vectors at `t + 1`.
    TrueVectors,
    /// The forecaster's in-sample predictions of those vectors.
    #[default]
    InSampleForecasts,
    /// The forecaster's out-of-bag predictions of those vectors.
    OutOfBagForecasts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityConfig {
    /// Explicit replication weights; `None` derives them from level counts.
    pub weights: Option<SamplingWeights>,
    /// `false` trains on unreplicated rows.
    pub weighted: bool,
}

impl Default for SeverityConfig {
    fn default() -> Self {
        Self {
            weights: None,
            weighted: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub kpi: Option<PathBuf>,
    pub alarms: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Every setting of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub business: Business,
    pub seed: u64,
    /// Earlier hours included in each feature vector.
    pub lag: usize,
    /// Longest gap of missing hours filled by interpolation.
    pub max_gap: usize,
    /// Last target hour used for training; `None` puts it at 70% of the
    /// labeled time range.
    pub split_boundary: Option<Timestamp>,
    pub classifier_source: TrainingSource,
    /// Also train the flat multiclass baseline.
    pub rtap_c: bool,
    pub paths: PathConfig,
    pub simulate: SimulateConfig,
    pub forecast: ForestParams,
    pub identify: StackingParams,
    pub severity: SeverityConfig,
    pub flat: ForestClassifierParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            business: Business::Biz,
            seed: 42,
            lag: 3,
            max_gap: DEFAULT_MAX_GAP,
            split_boundary: None,
            classifier_source: TrainingSource::default(),
            rtap_c: true,
            paths: PathConfig::default(),
            simulate: SimulateConfig::default(),
            forecast: ForestParams::default(),
            identify: StackingParams::default(),
            severity: SeverityConfig::default(),
            flat: ForestClassifierParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values are read as TOML, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(value.trim()))?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Checks settings that serde cannot.
    pub fn validate(&self) -> Result<()> {
        let s = &self.simulate;
        if !(0.0..1.0).contains(&s.missing_rate) || !(0.0..1.0).contains(&s.noise_rate) {
            return Err(Error::Config("corruption rates must be in [0, 1)".into()));
        }
        if let Some(w) = self.severity.weights {
            SamplingWeights::new(w.low, w.medium, w.high).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Hash of every setting that influences a trained model.
    pub fn digest(&self) -> String {
        let mut relevant = self.clone();
        relevant.paths = PathConfig::default();
        relevant.simulate = SimulateConfig::default();
        let json = serde_json::to_vec(&relevant).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_and_unknown_key() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[forecast]\nn_trees = 10\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.forecast.n_trees, 10);
        assert_eq!(cfg.forecast.tree, RunConfig::default().forecast.tree);
        assert!(matches!(RunConfig::from_toml_str("sed = 7"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("[forecast]\ntrees = 1").is_err());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "forecast.tree.max_depth=4",
                "business=Trd",
                "split_boundary=2021-03-01T00:00:00Z",
                "identify.base.random_forest.max_depth=6",
            ])
            .unwrap();
        assert_eq!(cfg.forecast.tree.max_depth, 4);
        assert_eq!(cfg.business, Business::Trd);
        assert_eq!(cfg.split_boundary, Some(chrono::Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap()));
        assert_eq!(cfg.identify.base.random_forest.max_depth, Some(6));
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed"]).is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.model = Some("x.bin".into());
        assert_eq!(a.digest(), b.digest());
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
