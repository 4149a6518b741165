//! Seeded synthetic markets with known structure, for tests and demos.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::MarketPanel;

/// One drifting asset among otherwise driftless ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSpec {
    pub n_assets: usize,
    pub days: usize,
    /// Index of the drifting asset.
    pub drift_asset: usize,
    /// Mean daily return of the drifting asset.
    pub drift: f64,
    /// Daily return standard deviation of every asset.
    pub noise: f64,
    pub seed: u64,
    pub start: NaiveDate,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            n_assets: 5,
            days: 600,
            drift_asset: 0,
            drift: 0.005,
            noise: 0.01,
            seed: 7,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
        }
    }
}

/// Consecutive weekdays starting at (or after) `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

pub fn drift_market(spec: &DriftSpec) -> Result<MarketPanel> {
    if spec.n_assets == 0 || spec.days < 2 || spec.drift_asset >= spec.n_assets {
        return Err(Error::InvalidArgument(format!(
            "synthetic market needs >= 1 asset, >= 2 days and a valid drift asset, got {spec:?}"
        )));
    }
    let noise = Normal::new(0.0, spec.noise)
        .map_err(|e| Error::InvalidArgument(format!("noise level {}: {e}", spec.noise)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_assets;
    let (mut open, mut high, mut low, mut close, mut volume) =
        (vec![Vec::new(); n], vec![Vec::new(); n], vec![Vec::new(); n], vec![Vec::new(); n], vec![Vec::new(); n]);
    for i in 0..n {
        let mu = if i == spec.drift_asset { spec.drift } else { 0.0 };
        let mut prev = 100.0;
        for _ in 0..spec.days {
            let r: f64 = (mu + noise.sample(&mut rng)).max(-0.5);
            let c = prev * (1.0 + r);
            let wiggle = 1.0 + 0.5 * spec.noise * rng.random::<f64>();
            open[i].push(prev);
            high[i].push(prev.max(c) * wiggle);
            low[i].push(prev.min(c) / wiggle);
            close[i].push(c);
            volume[i].push(1e6 * (1.0 + rng.random::<f64>()));
            prev = c;
        }
    }
    let assets = (1..=n).map(|k| format!("S{k}")).collect();
    MarketPanel::new(business_days(spec.start, spec.days), assets, open, high, low, close, volume)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_weekday_only() {
        let a = drift_market(&DriftSpec::default()).unwrap();
        let b = drift_market(&DriftSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_periods(), 600);
        assert!(a.calendar.iter().all(|d| d.weekday().number_from_monday() <= 5));
        assert!(a.close[0][599] > 3.0 * a.close[0][0]);
    }
}
