use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    combined_loss, loss_objective, loss_prediction, loss_ranking, objective_value, portfolio_return_var,
    portfolio_returns, LossWeightsState, Objective,
};
use crate::autodiff::{AdamW, ParamStore, Tape, Tensor};
use crate::covariance::DEFAULT_RIDGE;
use crate::dataset::{fit_normalization, Prepared};
use crate::error::{Error, Result};
use crate::indicators::{NormStats, N_FEATURES};
use crate::market_data::MarketPanel;
use crate::model::{Mixing, Model, ModelConfig};

pub const LOG_HEADER: &str = "epoch,loss_total,loss_obj,loss_pred,loss_rank,s_m,s_p,s_r,val_metric";

const LOSS_WEIGHTS: &str = "loss.s";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Downside threshold: a constant return, or the per-period return of a
/// benchmark asset (`benchmark:<symbol>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdRepr", into = "ThresholdRepr")]
pub enum Threshold {
    Constant(f64),
    Benchmark(String),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<ThresholdRepr> for Threshold {
    type Error = Error;

    fn try_from(r: ThresholdRepr) -> Result<Self> {
        match r {
            ThresholdRepr::Number(v) => Threshold::constant(v),
            ThresholdRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Threshold> for ThresholdRepr {
    fn from(t: Threshold) -> Self {
        match t {
            Threshold::Constant(v) => ThresholdRepr::Number(v),
            Threshold::Benchmark(s) => ThresholdRepr::Text(format!("benchmark:{s}")),
        }
    }
}

impl Threshold {
    fn constant(v: f64) -> Result<Self> {
        if v.is_finite() {
            Ok(Threshold::Constant(v))
        } else {
            Err(Error::InvalidArgument(format!("delta must be finite, got {v}")))
        }
    }

    /// Threshold for each requested day.
    pub fn series(&self, data: &Prepared, days: &[usize]) -> Result<Vec<f64>> {
        match self {
            Threshold::Constant(v) => Ok(vec![*v; days.len()]),
            Threshold::Benchmark(sym) => {
                let i = data.panel.asset_index(sym).ok_or_else(|| {
                    Error::InvalidArgument(format!("benchmark symbol `{sym}` is not in the panel"))
                })?;
                Ok(days.iter().map(|&t| data.returns.r[i][t]).collect())
            }
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(sym) = s.strip_prefix("benchmark:") {
            if sym.is_empty() {
                return Err(Error::InvalidArgument("empty benchmark symbol".into()));
            }
            return Ok(Threshold::Benchmark(sym.to_string()));
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("delta `{s}` is neither a number nor benchmark:<symbol>")))?;
        Threshold::constant(v)
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Constant(v) => write!(f, "{v}"),
            Threshold::Benchmark(s) => write!(f, "benchmark:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Add the prediction and ranking losses with adaptive weights.
    pub multi_objective: bool,
    pub delta: Threshold,
    pub cost: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Length of each contiguous training sub-sequence.
    pub batch_len: usize,
    pub seed: u64,
    pub window: usize,
    pub hidden: usize,
    pub mixing: Mixing,
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::MaxSharpe,
            multi_objective: true,
            delta: Threshold::Constant(0.005),
            cost: 0.0,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 50,
            batch_len: 60,
            seed: 0,
            window: 20,
            hidden: 64,
            mixing: Mixing::Correlation,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return bad(format!("cost must be >= 0, got {}", self.cost));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_len < 2 {
            return bad(format!("batch_len must be >= 2, got {}", self.batch_len));
        }
        if self.window < 2 || self.hidden == 0 {
            return bad("window must be >= 2 and hidden >= 1".into());
        }
        if !(self.ridge >= 0.0) {
            return bad(format!("ridge must be >= 0, got {}", self.ridge));
        }
        if let Threshold::Constant(v) = self.delta {
            Threshold::constant(v)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            window: self.window,
            mixing: self.mixing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_obj: f64,
    pub loss_pred: f64,
    pub loss_rank: f64,
    pub s_m: f64,
    pub s_p: f64,
    pub s_r: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_weights: LossWeightsState,
    pub norm: NormStats,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initialization.
    pub selected_epoch: usize,
    /// Epoch at which a non-finite value stopped training.
    pub diverged: Option<usize>,
}

impl TrainOutcome {
    /// Model parameters plus loss weights and normalization statistics.
    pub fn checkpoint(&self) -> ParamStore {
        let mut store = self.model.params.clone();
        store.insert(LOSS_WEIGHTS, self.loss_weights.to_tensor());
        store.insert(NORM_MEAN, Tensor::vector(self.norm.mean.to_vec()));
        store.insert(NORM_STD, Tensor::vector(self.norm.std.to_vec()));
        store
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for e in &self.log {
            let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch, e.loss_total, e.loss_obj, e.loss_pred, e.loss_rank, e.s_m, e.s_p, e.s_r, val
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Inverse of [`TrainOutcome::checkpoint`].
pub fn load_checkpoint(
    store: &ParamStore,
    window: usize,
    mixing: Mixing,
) -> Result<(Model, NormStats, LossWeightsState)> {
    let model = Model::from_params(store, window, mixing)?;
    let arr = |name: &str| -> Result<[f64; N_FEATURES]> {
        store
            .require(name)?
            .data()
            .try_into()
            .map_err(|_| Error::Shape(format!("`{name}` must hold {N_FEATURES} values")))
    };
    let norm = NormStats {
        mean: arr(NORM_MEAN)?,
        std: arr(NORM_STD)?,
    };
    let weights = LossWeightsState::from_slice(store.require(LOSS_WEIGHTS)?.data())?;
    Ok((model, norm, weights))
}

/// Splits days into contiguous chunks of `len`, folding a 1-day remainder
/// into the previous chunk.
fn chunks(days: &[usize], len: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < days.len() {
        let mut end = (start + len).min(days.len());
        if days.len() - end == 1 {
            end = days.len();
        }
        out.push(&days[start..end]);
        start = end;
    }
    out
}

struct StepLosses {
    total: f64,
    obj: f64,
    pred: f64,
    rank: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Prepared,
    model: Model,
    s: Tensor,
    opt_model: AdamW,
    opt_s: AdamW,
}

impl Trainer<'_> {
    fn step(&mut self, days: &[usize]) -> Result<StepLosses> {
        let batch = self.data.batch(days, self.cfg.mixing)?;
        let realized: Vec<Vec<f64>> = days.iter().map(|&t| self.data.realized(t)).collect();
        let delta = self.cfg.delta.series(self.data, days)?;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true)?;
        let s = tape.param(self.s.clone())?;
        let out = self.model.forward(&mut tape, &bound, &batch)?;
        let r = tape.constant(Tensor::from_rows(&realized)?)?;
        let rp = portfolio_return_var(&mut tape, out.weights, r, None, self.cfg.cost)?;
        let dv = tape.constant(Tensor::vector(delta))?;
        let l_obj = loss_objective(&mut tape, self.cfg.objective, rp, dv)?;
        let l_pred = loss_prediction(&mut tape, out.predicted, r)?;
        let l_rank = loss_ranking(&mut tape, out.predicted, r)?;
        let total = if self.cfg.multi_objective {
            combined_loss(&mut tape, l_obj, l_pred, l_rank, s)?
        } else {
            tape.neg(l_obj)?
        };
        let losses = StepLosses {
            total: tape.value(total).item(),
            obj: tape.value(l_obj).item(),
            pred: tape.value(l_pred).item(),
            rank: tape.value(l_rank).item(),
        };
        let mut grads = tape.backward(total)?;
        let g: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|v| grads.take(*v).expect("parameter gradient"))
            .collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("parameter gradient"));
        }
        let decay = vec![true; g.len()];
        self.opt_model.step(self.model.params.tensors_mut(), &g, &decay)?;
        if self.cfg.multi_objective {
            let gs = grads.take(s).expect("loss weight gradient");
            self.opt_s.step(std::slice::from_mut(&mut self.s), &[gs], &[false])?;
        }
        if self.model.params.tensors().iter().any(|t| !t.is_finite()) || !self.s.is_finite() {
            return Err(Error::NonFinite("parameter update"));
        }
        Ok(losses)
    }

    fn validate(&self, days: &[usize]) -> Result<f64> {
        let batch = self.data.batch(days, self.cfg.mixing)?;
        let out = self.model.predict(&batch)?;
        let realized: Vec<Vec<f64>> = days.iter().map(|&t| self.data.realized(t)).collect();
        let rp = portfolio_returns(&out.weights, &realized, None, self.cfg.cost);
        let delta = self.cfg.delta.series(self.data, days)?;
        Ok(objective_value(self.cfg.objective, &rp, &delta))
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Domain { .. })
}

/// Trains on `panel`. Rows up to `train_end` form the fitting period; any
/// later rows form the validation period used to select the checkpoint.
pub fn train(panel: &MarketPanel, train_end: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_rows = panel.n_periods();
    if train_end >= n_rows {
        return Err(Error::InvalidSplit(format!("train_end row {train_end} outside panel of {n_rows} rows")));
    }
    let norm = fit_normalization(panel, train_end)?;
    let data = Prepared::new(panel.clone(), &norm, cfg.window, cfg.ridge)?;
    let fit_days = data.decision_days(0, train_end.saturating_sub(1));
    if fit_days.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training period has {} usable decision days; need at least 2 after the indicator warm-up and window",
            fit_days.len()
        )));
    }
    let val_days = if train_end + 1 < n_rows {
        data.decision_days(train_end, n_rows)
    } else {
        Vec::new()
    };
    if val_days.len() == 1 {
        log::warn!("validation period has a single decision day");
    }
    let use_validation = val_days.len() >= 2;

    let model = Model::init(cfg.model_config(), cfg.seed)?;
    let mut trainer = Trainer {
        cfg,
        data: &data,
        model,
        s: LossWeightsState::default().to_tensor(),
        opt_model: AdamW::new(cfg.lr, (0.9, 0.999), cfg.weight_decay)?,
        opt_s: AdamW::new(cfg.lr, (0.9, 0.999), 0.0)?,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: (Model, Tensor, usize, f64) = (trainer.model.clone(), trainer.s.clone(), 0, f64::NEG_INFINITY);
    let mut last_good = (trainer.model.clone(), trainer.s.clone(), 0);
    let mut diverged = None;
    let batches = chunks(&fit_days, cfg.batch_len);

    'epochs: for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 4];
        for days in &batches {
            match trainer.step(days) {
                Ok(l) => {
                    sums[0] += l.total;
                    sums[1] += l.obj;
                    sums[2] += l.pred;
                    sums[3] += l.rank;
                }
                Err(e) if is_divergence(&e) => {
                    log::warn!("training diverged in epoch {epoch} ({e}); keeping epoch {}", last_good.2);
                    diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let k = batches.len() as f64;
        let val_metric = if use_validation {
            match trainer.validate(&val_days) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) if is_divergence(&e) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let s = trainer.s.data();
        let entry = EpochLog {
            epoch,
            loss_total: sums[0] / k,
            loss_obj: sums[1] / k,
            loss_pred: sums[2] / k,
            loss_rank: sums[3] / k,
            s_m: s[0],
            s_p: s[1],
            s_r: s[2],
            val_metric,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} obj {:.6} pred {:.6} rank {:.6}{}",
            entry.loss_total,
            entry.loss_obj,
            entry.loss_pred,
            entry.loss_rank,
            val_metric.map(|v| format!(" val {v:.6}")).unwrap_or_default()
        );
        log.push(entry);
        last_good = (trainer.model.clone(), trainer.s.clone(), epoch);
        if let Some(v) = val_metric {
            if v > best.3 {
                best = (trainer.model.clone(), trainer.s.clone(), epoch, v);
            }
        }
    }

    let (model, s, selected_epoch) = if use_validation && best.2 > 0 {
        (best.0, best.1, best.2)
    } else {
        last_good
    };
    Ok(TrainOutcome {
        model,
        loss_weights: LossWeightsState::from_slice(s.data())?,
        norm,
        log,
        selected_epoch,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_keeps_every_day_and_avoids_singletons() {
        let days: Vec<usize> = (10..21).collect();
        let c = chunks(&days, 5);
        assert_eq!(c.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![5, 6]);
        let c = chunks(&days, 4);
        assert_eq!(c.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 3]);
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("0.005".parse::<Threshold>().unwrap(), Threshold::Constant(0.005));
        assert_eq!(
            "benchmark:SPY".parse::<Threshold>().unwrap(),
            Threshold::Benchmark("SPY".into())
        );
        assert!("benchmark:".parse::<Threshold>().is_err());
        assert!("abc".parse::<Threshold>().is_err());
        let t: Threshold = serde_json::from_str("\"benchmark:X\"").unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), "\"benchmark:X\"");
        let t: Threshold = serde_json::from_str("0.01").unwrap();
        assert_eq!(t, Threshold::Constant(0.01));
    }
}
