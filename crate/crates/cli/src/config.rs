use std::path::{Path, PathBuf};

use knockoff_forge::benchmarks::{BenchmarkSpec, KnockoffMethod, MethodConfig, StatisticKind};
use knockoff_forge::filter::default_p_grid;
use knockoff_forge::response::ResponseSpec;
use knockoff_forge::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// How input files are split for fitting commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fraction of rows held out for early stopping in `fit-joint` and
    /// `fit-knockoff`.
    pub validation_fraction: f64,
    /// Train / validation / test fractions used by `select`.
    pub select_split: [f64; 3],
    /// Response column name, for commands that need one.
    pub response_column: Option<String>,
    /// Bins per feature in benchmark histograms.
    pub histogram_bins: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.15,
            select_split: [0.70, 0.15, 0.15],
            response_column: None,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub benchmark: BenchmarkSpec,
    pub knockoffs: KnockoffMethod,
    pub statistic: StatisticKind,
    pub response: ResponseSpec,
    pub p_grid: Vec<f64>,
    pub data: DataConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            benchmark: BenchmarkSpec::default(),
            knockoffs: KnockoffMethod::default(),
            statistic: StatisticKind::default(),
            response: ResponseSpec::default(),
            p_grid: default_p_grid(),
            data: DataConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Input(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let input = |e: knockoff_forge::Error| CliError::Input(e.to_string());
        self.train.validate().map_err(input)?;
        self.benchmark.validate().map_err(input)?;
        self.response.validate().map_err(input)?;
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(CliError::Input("p_grid entries must lie in (0, 1)".into()));
        }
        let v = self.data.validation_fraction;
        if !(v > 0.0 && v < 1.0) {
            return Err(CliError::Input("validation_fraction must lie in (0, 1)".into()));
        }
        let s = self.data.select_split;
        if s.iter().any(|f| *f < 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 || s[2] <= 0.0 {
            return Err(CliError::Input("select_split must be non-negative, sum to 1 and keep a test part".into()));
        }
        if self.data.histogram_bins == 0 {
            return Err(CliError::Input("histogram_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn method(&self) -> MethodConfig {
        MethodConfig {
            knockoffs: self.knockoffs,
            train: self.train.clone(),
            statistic: self.statistic,
            response: self.response.clone(),
            p_grid: self.p_grid.clone(),
        }
    }
}
