//! Aligns features, returns and covariances of one panel into model batches.
//!
//! Day `t` is a decision day when its feature window, the covariance window of
//! returns ending at `t - 1`, and the realized return `r_t` (close `t` to
//! close `t + 1`) all exist, and no feature row in the window was back-filled.

use crate::covariance::{rolling_covariance, CovarianceSeries, Matrix};
use crate::error::{Error, Result};
use crate::indicators::{apply_norm, compute_indicators, fit_norm, FeatureTensor, NormStats, WARMUP};
use crate::market_data::{compute_returns, MarketPanel, ReturnMatrix};
use crate::model::{Batch, Mixing};

#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: MarketPanel,
    /// normalized
    pub features: FeatureTensor,
    pub returns: ReturnMatrix,
    pub covariances: CovarianceSeries,
    pub window: usize,
}

/// First day whose feature window contains no back-filled row.
pub fn first_decision_day(window: usize) -> usize {
    (WARMUP - 1 + window - 1).max(window)
}

/// Fits normalization statistics on rows `[WARMUP - 1, fit_end]` of `panel`.
pub fn fit_normalization(panel: &MarketPanel, fit_end: usize) -> Result<NormStats> {
    let raw = compute_indicators(panel)?;
    fit_norm(&raw, WARMUP - 1, fit_end + 1)
}

impl Prepared {
    pub fn new(panel: MarketPanel, norm: &NormStats, window: usize, ridge: f64) -> Result<Prepared> {
        if window < 2 {
            return Err(Error::InvalidArgument(format!("window must be >= 2, got {window}")));
        }
        let raw = compute_indicators(&panel)?;
        let features = apply_norm(&raw, norm);
        let returns = compute_returns(&panel)?;
        let covariances = rolling_covariance(&returns, window, ridge)?;
        Ok(Prepared {
            panel,
            features,
            returns,
            covariances,
            window,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.panel.n_assets()
    }

    /// Decision days within `[from, to]` (inclusive), clipped to the usable range.
    pub fn decision_days(&self, from: usize, to: usize) -> Vec<usize> {
        let lo = from.max(first_decision_day(self.window));
        let hi = to.min(self.panel.n_periods().saturating_sub(2));
        (lo..=hi).collect()
    }

    /// Covariance estimated from returns strictly before day `t`.
    pub fn sigma_before(&self, t: usize) -> Result<&Matrix> {
        t.checked_sub(1)
            .and_then(|k| self.covariances.ending_at(k))
            .ok_or_else(|| Error::InsufficientData(format!("no covariance window before day {t}")))
    }

    /// Realized return vector of day `t`.
    pub fn realized(&self, t: usize) -> Vec<f64> {
        self.returns.at(t)
    }

    pub fn batch(&self, days: &[usize], mixing: Mixing) -> Result<Batch> {
        let mut windows = Vec::with_capacity(days.len());
        let mut mats = Vec::with_capacity(days.len());
        for &t in days {
            if t + 1 < self.window || t >= self.panel.n_periods() {
                return Err(Error::InsufficientData(format!("day {t} has no full window")));
            }
            windows.push(
                (0..self.n_assets())
                    .map(|i| self.features.window(i, t, self.window))
                    .collect::<Vec<_>>(),
            );
            mats.push(mixing.matrix(self.sigma_before(t)?));
        }
        Batch::new(&windows, &mats)
    }
}
