//! The eight technical indicators used as model input, and z-score normalization.
//!
//! Parameterization: MACD = EMA(12) - EMA(26) of close; Bollinger bands are the
//! 20-period SMA +/- 2 population standard deviations; RSI uses 14-period Wilder
//! smoothing; CCI uses a 20-period typical price with the 0.015 constant; DMI is
//! reported as ADX(14); SMA30 and SMA60 of close.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::MarketPanel;

pub const N_FEATURES: usize = 8;
pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["macd", "boll_lb", "boll_ub", "rsi", "cci", "dmi", "sma30", "sma60"];

/// Rows needed before every indicator has a genuine (non back-filled) value.
pub const WARMUP: usize = 60;
/// Longest lookback of any indicator.
pub const LOOKBACK_MAX: usize = 60;

const STD_FLOOR: f64 = 1e-8;

/// Raw or normalized indicator values, indexed `[asset][time][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Vec<Vec<[f64; N_FEATURES]>>,
}

impl FeatureTensor {
    pub fn n_assets(&self) -> usize {
        self.values.len()
    }

    pub fn n_periods(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Window of `w` feature rows for asset `i` ending at (and including) `t`.
    pub fn window(&self, i: usize, t: usize, w: usize) -> &[[f64; N_FEATURES]] {
        &self.values[i][t + 1 - w..=t]
    }
}

fn backfill(series: &mut [f64], first_valid: usize) {
    if first_valid == 0 || first_valid >= series.len() {
        return;
    }
    let v = series[first_valid];
    series[..first_valid].iter_mut().for_each(|x| *x = v);
}

pub fn sma(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    for t in n.saturating_sub(1)..x.len() {
        out[t] = x[t + 1 - n..=t].iter().sum::<f64>() / n as f64;
    }
    out
}

pub fn ema(x: &[f64], n: usize) -> Vec<f64> {
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(x.len());
    let mut prev = match x.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in x {
        prev = alpha * v + (1.0 - alpha) * prev;
        out.push(prev);
    }
    out
}

fn rolling_pop_std(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    for t in n.saturating_sub(1)..x.len() {
        let w = &x[t + 1 - n..=t];
        let m = w.iter().sum::<f64>() / n as f64;
        out[t] = (w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
    }
    out
}

/// Wilder's smoothing seeded with the simple mean of `x[start..start+n]`.
/// Entries before `start + n - 1` are NaN.
fn wilder(x: &[f64], n: usize, start: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    let seed = start + n - 1;
    if seed >= x.len() {
        return out;
    }
    let mut avg = x[start..=seed].iter().sum::<f64>() / n as f64;
    out[seed] = avg;
    for t in seed + 1..x.len() {
        avg = (avg * (n as f64 - 1.0) + x[t]) / n as f64;
        out[t] = avg;
    }
    out
}

pub fn rsi(close: &[f64], n: usize) -> Vec<f64> {
    let len = close.len();
    let mut gains = vec![0.0; len];
    let mut losses = vec![0.0; len];
    for t in 1..len {
        let d = close[t] - close[t - 1];
        gains[t] = d.max(0.0);
        losses[t] = (-d).max(0.0);
    }
    let ag = wilder(&gains, n, 1);
    let al = wilder(&losses, n, 1);
    ag.iter()
        .zip(&al)
        .map(|(&g, &l)| {
            if g.is_nan() {
                f64::NAN
            } else if l == 0.0 {
                if g == 0.0 {
                    50.0
                } else {
                    100.0
                }
            } else {
                100.0 - 100.0 / (1.0 + g / l)
            }
        })
        .collect()
}

pub fn cci(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Vec<f64> {
    let tp: Vec<f64> = (0..close.len())
        .map(|t| (high[t] + low[t] + close[t]) / 3.0)
        .collect();
    let mut out = vec![f64::NAN; tp.len()];
    for t in n.saturating_sub(1)..tp.len() {
        let w = &tp[t + 1 - n..=t];
        let m = w.iter().sum::<f64>() / n as f64;
        let md = w.iter().map(|v| (v - m).abs()).sum::<f64>() / n as f64;
        out[t] = if md == 0.0 { 0.0 } else { (tp[t] - m) / (0.015 * md) };
    }
    out
}

/// Average directional index.
pub fn adx(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Vec<f64> {
    let len = close.len();
    let mut tr = vec![0.0; len];
    let mut pdm = vec![0.0; len];
    let mut mdm = vec![0.0; len];
    for t in 1..len {
        tr[t] = (high[t] - low[t])
            .max((high[t] - close[t - 1]).abs())
            .max((low[t] - close[t - 1]).abs());
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        pdm[t] = if up > down && up > 0.0 { up } else { 0.0 };
        mdm[t] = if down > up && down > 0.0 { down } else { 0.0 };
    }
    let str_ = wilder(&tr, n, 1);
    let spdm = wilder(&pdm, n, 1);
    let smdm = wilder(&mdm, n, 1);
    let dx: Vec<f64> = (0..len)
        .map(|t| {
            if str_[t].is_nan() {
                return f64::NAN;
            }
            let (pdi, mdi) = if str_[t] == 0.0 {
                (0.0, 0.0)
            } else {
                (100.0 * spdm[t] / str_[t], 100.0 * smdm[t] / str_[t])
            };
            if pdi + mdi == 0.0 {
                0.0
            } else {
                100.0 * (pdi - mdi).abs() / (pdi + mdi)
            }
        })
        .collect();
    // first DX value sits at index n
    wilder(&dx, n, n)
}

fn first_valid(x: &[f64]) -> usize {
    x.iter().position(|v| !v.is_nan()).unwrap_or(x.len())
}

/// Computes the raw `[asset][time][feature]` indicator tensor.
pub fn compute_indicators(panel: &MarketPanel) -> Result<FeatureTensor> {
    let t_len = panel.n_periods();
    if t_len < LOOKBACK_MAX {
        return Err(Error::InsufficientData(format!(
            "indicators need at least {LOOKBACK_MAX} periods, panel has {t_len}"
        )));
    }
    let values = (0..panel.n_assets())
        .map(|i| {
            let (h, l, c) = (&panel.high[i], &panel.low[i], &panel.close[i]);
            let e12 = ema(c, 12);
            let e26 = ema(c, 26);
            let macd: Vec<f64> = e12.iter().zip(&e26).map(|(a, b)| a - b).collect();
            let mid = sma(c, 20);
            let sd = rolling_pop_std(c, 20);
            let lb: Vec<f64> = mid.iter().zip(&sd).map(|(m, s)| m - 2.0 * s).collect();
            let ub: Vec<f64> = mid.iter().zip(&sd).map(|(m, s)| m + 2.0 * s).collect();
            let mut cols = [
                macd,
                lb,
                ub,
                rsi(c, 14),
                cci(h, l, c, 20),
                adx(h, l, c, 14),
                sma(c, 30),
                sma(c, 60),
            ];
            for col in cols.iter_mut() {
                let f = first_valid(col);
                backfill(col, f);
            }
            (0..t_len)
                .map(|t| std::array::from_fn(|k| cols[k][t]))
                .collect()
        })
        .collect();
    Ok(FeatureTensor { values })
}

/// Per-feature statistics fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

/// Fits z-score statistics on rows `[from, to)` of every asset.
pub fn fit_norm(features: &FeatureTensor, from: usize, to: usize) -> Result<NormStats> {
    if to <= from || to > features.n_periods() {
        return Err(Error::InsufficientData(format!(
            "normalization range {from}..{to} is empty or out of bounds"
        )));
    }
    let count = (features.n_assets() * (to - from)) as f64;
    let rows = || features.values.iter().flat_map(|a| a[from..to].iter());
    let mut mean = [0.0; N_FEATURES];
    for row in rows() {
        for k in 0..N_FEATURES {
            mean[k] += row[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = [0.0; N_FEATURES];
    for row in rows() {
        for k in 0..N_FEATURES {
            var[k] += (row[k] - mean[k]).powi(2);
        }
    }
    let mut std = [0.0; N_FEATURES];
    for k in 0..N_FEATURES {
        std[k] = (var[k] / count).sqrt();
        if !(std[k] > STD_FLOOR) {
            log::warn!("feature `{}` has zero variance; std floored", FEATURE_NAMES[k]);
            std[k] = STD_FLOOR;
        }
    }
    Ok(NormStats { mean, std })
}

pub fn apply_norm(features: &FeatureTensor, stats: &NormStats) -> FeatureTensor {
    let values = features
        .values
        .iter()
        .map(|a| {
            a.iter()
                .map(|row| std::array::from_fn(|k| (row[k] - stats.mean[k]) / stats.std[k]))
                .collect()
        })
        .collect();
    FeatureTensor { values }
}

/// Debug export: one row per asset-date.
pub fn write_features_csv(panel: &MarketPanel, features: &FeatureTensor, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["date", "symbol"];
    header.extend_from_slice(&FEATURE_NAMES);
    w.write_record(&header)?;
    for t in 0..features.n_periods() {
        for i in 0..features.n_assets() {
            let mut rec = vec![panel.calendar[t].to_string(), panel.assets[i].clone()];
            rec.extend(features.values[i][t].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
