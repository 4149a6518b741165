//! Portfolio objectives, auxiliary forecasting losses, their adaptive
//! combination, and the training loop.

mod train;

pub use train::{load_checkpoint, train, EpochLog, Threshold, TrainConfig, TrainOutcome, LOG_HEADER};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Portfolio objective optimized by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    MaxCum,
    #[default]
    MaxSharpe,
    MinDown,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxcum" => Ok(Objective::MaxCum),
            "maxsharpe" => Ok(Objective::MaxSharpe),
            "mindown" => Ok(Objective::MinDown),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective `{other}` (expected maxcum, maxsharpe or mindown)"
            ))),
        }
    }
}

/// Log-variance weights `s_i = log(zeta_i^2)` of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeightsState {
    pub s_m: f64,
    pub s_p: f64,
    pub s_r: f64,
}

impl Default for LossWeightsState {
    fn default() -> Self {
        LossWeightsState {
            s_m: 0.0,
            s_p: 0.0,
            s_r: 0.0,
        }
    }
}

impl LossWeightsState {
    pub fn to_tensor(self) -> Tensor {
        Tensor::vector(vec![self.s_m, self.s_p, self.s_r])
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        match s {
            [m, p, r] if s.iter().all(|v| v.is_finite()) => Ok(LossWeightsState {
                s_m: *m,
                s_p: *p,
                s_r: *r,
            }),
            _ => Err(Error::Shape(format!("loss weights need 3 finite values, got {s:?}"))),
        }
    }
}

/// `b^T r - c * |b - b_prev|_1` for one period.
pub fn portfolio_return(b: &[f64], r: &[f64], b_prev: &[f64], cost: f64) -> f64 {
    let gross: f64 = b.iter().zip(r).map(|(x, y)| x * y).sum();
    if cost == 0.0 {
        return gross;
    }
    let turnover: f64 = b.iter().zip(b_prev).map(|(x, y)| (x - y).abs()).sum();
    gross - cost * turnover
}

/// Portfolio returns of a weight sequence; the first period pays no turnover
/// unless `b_prev` is given.
pub fn portfolio_returns(weights: &[Vec<f64>], returns: &[Vec<f64>], b_prev: Option<&[f64]>, cost: f64) -> Vec<f64> {
    weights
        .iter()
        .zip(returns)
        .enumerate()
        .map(|(t, (b, r))| {
            let prev = if t == 0 {
                b_prev.unwrap_or(b)
            } else {
                &weights[t - 1]
            };
            portfolio_return(b, r, prev, cost)
        })
        .collect()
}

pub fn cumulative_wealth(rp: &[f64]) -> f64 {
    rp.iter().map(|r| 1.0 + r).product()
}

/// Mean over sample standard deviation, with `1e-12` added to the variance.
pub fn sharpe(rp: &[f64]) -> f64 {
    let n = rp.len() as f64;
    let m = rp.iter().sum::<f64>() / n;
    let var = rp.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0);
    m / (var + crate::autodiff::STD_EPS).sqrt()
}

/// `-sum max(delta_t - r_t, 0)`.
pub fn downside(rp: &[f64], delta: &[f64]) -> f64 {
    -rp.iter().zip(delta).map(|(r, d)| (d - r).max(0.0)).sum::<f64>()
}

/// The objective value used for validation selection (higher is better).
pub fn objective_value(objective: Objective, rp: &[f64], delta: &[f64]) -> f64 {
    match objective {
        Objective::MaxCum => cumulative_wealth(rp),
        Objective::MaxSharpe => sharpe(rp),
        Objective::MinDown => downside(rp, delta),
    }
}

/// Per-period portfolio returns on the tape, `[T, N] x [T, N] -> [T]`.
pub fn portfolio_return_var(tape: &mut Tape, b: Var, r: Var, b_prev: Option<&[f64]>, cost: f64) -> Result<Var> {
    if !(cost >= 0.0 && cost.is_finite()) {
        return Err(Error::InvalidArgument(format!("transaction cost must be >= 0, got {cost}")));
    }
    let br = tape.mul(b, r)?;
    let gross = tape.sum_last(br)?;
    if cost == 0.0 {
        return Ok(gross);
    }
    let t_len = tape.shape(b)[0];
    let first = match b_prev {
        Some(p) => tape.constant(Tensor::new(vec![1, p.len()], p.to_vec())?)?,
        None => tape.slice_rows(b, 0, 1)?,
    };
    let prev = if t_len > 1 {
        let head = tape.slice_rows(b, 0, t_len - 1)?;
        tape.concat(&[first, head])?
    } else {
        first
    };
    let diff = tape.sub(b, prev)?;
    let diff = tape.abs(diff)?;
    let turnover = tape.sum_last(diff)?;
    let fee = tape.scale(turnover, cost)?;
    tape.sub(gross, fee)
}

/// Optimization form of the cumulative-wealth objective: `sum log(1 + r_p)`.
pub fn loss_maxcum(tape: &mut Tape, rp: Var) -> Result<Var> {
    let g = tape.shift(rp, 1.0)?;
    let l = tape.log(g)?;
    tape.sum(l)
}

pub fn loss_maxsharpe(tape: &mut Tape, rp: Var) -> Result<Var> {
    let m = tape.mean(rp)?;
    let s = tape.std(rp)?;
    tape.div(m, s)
}

/// `-sum max(delta - r_p, 0)`; `delta` has the shape of `rp`.
pub fn loss_mindown(tape: &mut Tape, rp: Var, delta: Var) -> Result<Var> {
    let gap = tape.sub(delta, rp)?;
    let h = tape.relu(gap)?;
    let s = tape.sum(h)?;
    tape.neg(s)
}

pub fn loss_objective(tape: &mut Tape, objective: Objective, rp: Var, delta: Var) -> Result<Var> {
    match objective {
        Objective::MaxCum => loss_maxcum(tape, rp),
        Objective::MaxSharpe => loss_maxsharpe(tape, rp),
        Objective::MinDown => loss_mindown(tape, rp, delta),
    }
}

/// `sum_t |r_hat_t - r_t|_2`.
pub fn loss_prediction(tape: &mut Tape, predicted: Var, realized: Var) -> Result<Var> {
    let d = tape.sub(predicted, realized)?;
    let sq = tape.mul(d, d)?;
    let per_t = tape.sum_last(sq)?;
    let norm = tape.sqrt(per_t)?;
    tape.sum(norm)
}

/// `sum_t sum_{i,j} max(-(r_hat_i - r_hat_j)(r_i - r_j), 0)`.
pub fn loss_ranking(tape: &mut Tape, predicted: Var, realized: Var) -> Result<Var> {
    let dp = tape.pairwise_diff(predicted)?;
    let dr = tape.pairwise_diff(realized)?;
    let prod = tape.mul(dp, dr)?;
    let prod = tape.neg(prod)?;
    let h = tape.relu(prod)?;
    tape.sum(h)
}

/// `-exp(-s_m) L_obj + exp(-s_p) L_p + exp(-s_r) L_r + (s_m + s_p + s_r) / 2`,
/// with `s = [s_m, s_p, s_r]`.
pub fn combined_loss(tape: &mut Tape, l_obj: Var, l_pred: Var, l_rank: Var, s: Var) -> Result<Var> {
    if tape.shape(s) != [3] {
        return Err(Error::Shape(format!("loss weights must be [3], got {:?}", tape.shape(s))));
    }
    let mut total = None;
    for (k, (l, sign)) in [(l_obj, -1.0), (l_pred, 1.0), (l_rank, 1.0)].into_iter().enumerate() {
        let sk = tape.slice_rows(s, k, k + 1)?;
        let w = tape.scale(sk, -1.0)?;
        let w = tape.exp(w)?;
        let term = tape.mul(w, l)?;
        let term = tape.scale(term, sign)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let reg = tape.sum(s)?;
    let reg = tape.scale(reg, 0.5)?;
    tape.add(total.expect("three terms"), reg)
}
