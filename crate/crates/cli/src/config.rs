use std::path::{Path, PathBuf};

use clap::Args;
use portfolio_core::market_data::{load_ohlcv, load_panel, ColumnMap, MarketPanel, SplitSpec};
use portfolio_core::model::Mixing;
use portfolio_core::objectives::{Objective, Threshold, TrainConfig};
use portfolio_core::risk_control::ImproveOptions;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_periods_per_year() -> f64 {
    252.0
}

/// Run configuration. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Panel file written by `ingest`, or a raw OHLCV CSV.
    pub panel: PathBuf,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Assets with fewer rows are rejected when reading a CSV (default window + 2).
    #[serde(default)]
    pub min_observations: Option<usize>,
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Target variance levels for `risk`.
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub improve: ImproveOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// 252 for equities, 365 for markets trading every calendar day.
    #[serde(default = "default_periods_per_year")]
    pub periods_per_year: f64,
    /// Checkpoint used by the model strategy; defaults to the newest `train-*` run.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Transaction-cost rate for evaluation; defaults to the training rate.
    #[serde(default)]
    pub eval_cost: Option<f64>,
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Downside threshold: a number or `benchmark:<symbol>`.
    #[arg(long)]
    pub delta: Option<Threshold>,
    #[arg(long)]
    pub cost: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = parse_mixing)]
    pub mixing: Option<Mixing>,
    /// Train on the portfolio objective alone, without the auxiliary losses.
    #[arg(long)]
    pub single_objective: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_mixing(s: &str) -> Result<Mixing, String> {
    match s {
        "correlation" => Ok(Mixing::Correlation),
        "covariance" => Ok(Mixing::Covariance),
        other => Err(format!("unknown mixing mode `{other}`")),
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let t = &mut self.train;
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.objective {
            t.objective = v;
        }
        if let Some(v) = &o.delta {
            t.delta = v.clone();
        }
        if let Some(v) = o.cost {
            t.cost = v;
        }
        if let Some(v) = o.window {
            t.window = v;
        }
        if let Some(v) = o.hidden {
            t.hidden = v;
        }
        if let Some(v) = o.mixing {
            t.mixing = v;
        }
        if o.single_objective {
            t.multi_objective = false;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.checkpoint {
            self.checkpoint = Some(v.clone());
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.panel);
        resolve(&mut self.output_dir);
        if let Some(c) = &mut self.checkpoint {
            resolve(c);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if !(self.periods_per_year > 0.0 && self.periods_per_year.is_finite()) {
            return Err(CliError::Config(format!(
                "periods_per_year must be positive, got {}",
                self.periods_per_year
            )));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(CliError::Config(format!("sigma values must be positive, got {s}")));
        }
        if !(self.improve.lr > 0.0) {
            return Err(CliError::Config(format!("improve.lr must be positive, got {}", self.improve.lr)));
        }
        if self.eval_cost.is_some_and(|c| !(c >= 0.0)) {
            return Err(CliError::Config("eval_cost must be >= 0".into()));
        }
        Ok(())
    }

    pub fn eval_cost(&self) -> f64 {
        self.eval_cost.unwrap_or(self.train.cost)
    }

    pub fn load_panel(&self) -> CliResult<MarketPanel> {
        let is_csv = self.panel.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let panel = if is_csv {
            let min = self.min_observations.unwrap_or(self.train.window + 2);
            load_ohlcv(&self.panel, &self.columns, min)?
        } else {
            load_panel(&self.panel)?
        };
        self.split.validate(&panel)?;
        Ok(panel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "panel": "data/panel.json",
        "split": {"train_start": "2020-01-01", "train_end": "2020-06-01",
                  "test_start": "2020-06-01", "test_end": "2020-12-31"}
    }"#;

    #[test]
    fn defaults_follow_parameter_settings() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.train.window, 20);
        assert_eq!(cfg.train.hidden, 64);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.cost, 0.0);
        assert_eq!(cfg.train.delta, Threshold::Constant(0.005));
        assert_eq!(cfg.train.mixing, Mixing::Correlation);
        assert_eq!(cfg.periods_per_year, 252.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replacen('{', "{\"bogus\": 1,", 1);
        assert!(serde_json::from_str::<RunConfig>(&text).is_err());
        let text = MINIMAL.replacen('{', "{\"train\": {\"windw\": 3},", 1);
        assert!(serde_json::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            epochs: Some(2),
            single_objective: true,
            ..Overrides::default()
        });
        assert_eq!((cfg.train.seed, cfg.train.epochs, cfg.train.multi_objective), (9, 2, false));
    }
}
