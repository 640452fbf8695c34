//! Run configuration: a strict JSON document with `model`, `train` and
//! `data` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tnaf_core::data::{
    load_matrix, make_splits, standardize, toy_generate, DataError, DatasetMatrix, Format, Splits,
    StandardizationStats, Toy,
};
use tnaf_core::flow::{FlowConfig, HeadType};
use tnaf_core::trainer::TrainConfig;

use crate::CliError;

fn default_model() -> FlowConfig {
    FlowConfig::new(0, HeadType::Cdf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: FlowConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_rows() -> usize {
    10_000
}
fn yes() -> bool {
    true
}

/// Either a data file (`path`, `format`) or a toy generator (`toy`, `n`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<Toy>,
    /// Rows drawn from the toy generator.
    #[serde(default = "default_rows")]
    pub n: usize,
    /// Train, validation and test fractions.
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid run config: {e}")))
    }

    /// Read a config file; a relative data path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.data.path, &self.data.toy) {
            (Some(_), Some(_)) => return Err(CliError::Config("data: set either `path` or `toy`, not both".into())),
            (None, None) => return Err(CliError::Config("data: one of `path` or `toy` is required".into())),
            _ => {}
        }
        if self.data.toy.is_some() && self.data.n == 0 {
            return Err(CliError::Config("data: `n` must be at least 1".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.dim != 0 {
            self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<DatasetMatrix, CliError> {
        let matrix = match (&self.data.path, self.data.toy) {
            (Some(p), _) => load_matrix(p, self.data.format)?,
            (None, Some(toy)) => toy_generate(toy, self.data.n, self.data.seed)?,
            (None, None) => return Err(CliError::Config("data: one of `path` or `toy` is required".into())),
        };
        Ok(matrix)
    }

    /// Split (and optionally standardize) the data; fills in `model.D`
    /// when it was left out.
    pub fn prepare(&mut self) -> Result<(Splits, StandardizationStats), CliError> {
        self.validate()?;
        let matrix = self.load_data()?;
        if self.model.dim == 0 {
            self.model.dim = matrix.cols();
        } else if self.model.dim != matrix.cols() {
            return Err(DataError::DimensionMismatch {
                expected: self.model.dim,
                found: matrix.cols(),
            }
            .into());
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let splits = make_splits(&matrix, self.data.fractions, self.data.seed)?;
        if self.data.standardize {
            Ok(standardize(&splits)?)
        } else {
            Ok((splits, StandardizationStats::identity(matrix.cols())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toy_config_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"data": {"toy": "gauss_mixture_8"}}"#).unwrap();
        assert_eq!(cfg.model, FlowConfig::new(0, HeadType::Cdf));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data.fractions, [0.8, 0.1, 0.1]);
        assert!(cfg.data.standardize);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"data": {"toy": "ring"}, "extra": 1}"#,
            r#"{"data": {"toy": "ring", "rows": 5}}"#,
            r#"{"data": {"toy": "ring"}, "model": {"E": 8, "depth": 2}}"#,
            r#"{"data": {"toy": "ring"}, "train": {"lr": 0.1}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
        assert!(RunConfig::from_json("{not json").is_err());
    }

    #[test]
    fn data_source_must_be_unique() {
        let both = RunConfig::from_json(r#"{"data": {"toy": "ring", "path": "x.csv"}}"#).unwrap();
        assert!(both.validate().is_err());
        let none = RunConfig::from_json(r#"{"data": {}}"#).unwrap();
        assert!(none.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::from_json(
            r#"{"model": {"D": 2, "head_type": "spline", "K": 4, "blocks": 3}, "data": {"toy": "two_moons", "n": 500}}"#,
        )
        .unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn prepare_infers_dimension_and_checks_mismatch() {
        let mut cfg = RunConfig::from_json(r#"{"data": {"toy": "ring", "n": 200}}"#).unwrap();
        let (splits, stats) = cfg.prepare().unwrap();
        assert_eq!(cfg.model.dim, 2);
        assert_eq!(splits.train.rows(), 160);
        assert_eq!(stats.dim(), 2);
        let mut bad = RunConfig::from_json(r#"{"model": {"D": 3}, "data": {"toy": "ring", "n": 200}}"#).unwrap();
        assert!(matches!(bad.prepare(), Err(CliError::Data(_))));
    }
}
