//! Sequential backtests, performance metrics, baselines and report files.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::covariance::Matrix;
use crate::error::{Error, Result};
use crate::objectives::portfolio_returns;
use crate::risk_control::{min_variance, MinVarOptions};
use crate::simplex::{is_on_simplex, uniform};

/// Weights for consecutive decision days; `weights[k]` earns the return from
/// `dates[k]` to the next trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioSeries {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl PortfolioSeries {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Serializes non-finite floats as the strings `NaN`, `Infinity`, `-Infinity`.
pub mod float_sentinel {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v == f64::INFINITY {
            s.serialize_str("Infinity")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-Infinity")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "Infinity" => Ok(f64::INFINITY),
                "-Infinity" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("invalid number `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "CW", with = "float_sentinel")]
    pub cw: f64,
    #[serde(rename = "APR", with = "float_sentinel")]
    pub apr: f64,
    #[serde(rename = "AVOL", with = "float_sentinel")]
    pub avol: f64,
    /// NaN when the returns have zero variance.
    #[serde(rename = "ASR", with = "float_sentinel")]
    pub asr: f64,
    /// Non-positive.
    #[serde(rename = "MDD", with = "float_sentinel")]
    pub mdd: f64,
    /// `+inf` when there is no drawdown.
    #[serde(rename = "ACR", with = "float_sentinel")]
    pub acr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub strategy: String,
    pub cost: f64,
    pub periods_per_year: f64,
    pub periods: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    /// `T + 1` dates: the first decision day, then each settlement day.
    pub dates: Vec<NaiveDate>,
    pub wealth: Vec<f64>,
    pub daily_returns: Vec<f64>,
    pub metrics: Metrics,
    pub config: ReportConfig,
    pub assets: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

/// Six performance metrics of a wealth curve and its period returns.
pub fn metrics(wealth: &[f64], returns: &[f64], periods_per_year: f64) -> Result<Metrics> {
    let t = returns.len();
    if t < 2 || wealth.len() != t + 1 {
        return Err(Error::InsufficientData(format!(
            "metrics need >= 2 returns and one more wealth value, got {t} and {}",
            wealth.len()
        )));
    }
    let cw = wealth[t];
    let apr = cw.powf(periods_per_year / t as f64) - 1.0;
    let mean = returns.iter().sum::<f64>() / t as f64;
    let sd = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt();
    let avol = sd * periods_per_year.sqrt();
    let asr = if sd > 0.0 {
        mean / sd * periods_per_year.sqrt()
    } else {
        log::warn!("return series has zero variance; ASR is undefined");
        f64::NAN
    };
    let mut peak = f64::NEG_INFINITY;
    let mut mdd: f64 = 0.0;
    for &w in wealth {
        peak = peak.max(w);
        mdd = mdd.min(w / peak - 1.0);
    }
    let acr = if mdd < 0.0 { apr / mdd.abs() } else { f64::INFINITY };
    Ok(Metrics {
        cw,
        apr,
        avol,
        asr,
        mdd,
        acr,
    })
}

/// Applies each day's weights to the realized returns `realized[k]`.
///
/// `dates` must have one more entry than `series` (the settlement day of the
/// last period).
pub fn run_backtest(
    series: &PortfolioSeries,
    realized: &[Vec<f64>],
    dates: &[NaiveDate],
    cost: f64,
    periods_per_year: f64,
    strategy: &str,
) -> Result<BacktestReport> {
    let t = series.len();
    if realized.len() != t || dates.len() != t + 1 || series.dates.len() != t {
        return Err(Error::Shape(format!(
            "backtest needs one return vector and one date per period: {t} weights, {} returns, {} dates",
            realized.len(),
            dates.len()
        )));
    }
    if !(cost >= 0.0) {
        return Err(Error::InvalidArgument(format!("transaction cost must be >= 0, got {cost}")));
    }
    for (k, (b, r)) in series.weights.iter().zip(realized).enumerate() {
        if b.len() != r.len() || b.len() != series.assets.len() {
            return Err(Error::Shape(format!("period {k}: {} weights for {} returns", b.len(), r.len())));
        }
        if !is_on_simplex(b, 1e-9) {
            return Err(Error::InvalidArgument(format!("period {k}: weights are not on the simplex")));
        }
    }
    let daily = portfolio_returns(&series.weights, realized, None, cost);
    let mut wealth = Vec::with_capacity(t + 1);
    wealth.push(1.0);
    for r in &daily {
        wealth.push(wealth[wealth.len() - 1] * (1.0 + r));
    }
    let m = metrics(&wealth, &daily, periods_per_year)?;
    Ok(BacktestReport {
        dates: dates.to_vec(),
        wealth,
        daily_returns: daily,
        metrics: m,
        config: ReportConfig {
            strategy: strategy.to_string(),
            cost,
            periods_per_year,
            periods: t,
        },
        assets: series.assets.clone(),
        weights: series.weights.clone(),
    })
}

/// Equal weights every period.
pub fn baseline_market(dates: &[NaiveDate], assets: &[String]) -> PortfolioSeries {
    PortfolioSeries {
        dates: dates.to_vec(),
        assets: assets.to_vec(),
        weights: vec![uniform(assets.len()); dates.len()],
    }
}

/// Minimum-variance portfolio of each period's covariance.
pub fn baseline_mvm(dates: &[NaiveDate], assets: &[String], sigma: &[&Matrix]) -> Result<PortfolioSeries> {
    if sigma.len() != dates.len() {
        return Err(Error::Shape("one covariance matrix per date required".into()));
    }
    let weights = sigma
        .iter()
        .map(|s| min_variance(s, MinVarOptions::default()).map(|p| p.weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(PortfolioSeries {
        dates: dates.to_vec(),
        assets: assets.to_vec(),
        weights,
    })
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    metrics: &'a Metrics,
    config: &'a ReportConfig,
}

/// Writes `metrics.json`, `wealth.csv`, `weights.csv` and `wealth.svg`.
pub fn emit_report(report: &BacktestReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&MetricsFile {
        metrics: &report.metrics,
        config: &report.config,
    })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("wealth.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    w.write_record(["date", "wealth", "daily_return"])?;
    for (k, (d, v)) in report.dates.iter().zip(&report.wealth).enumerate() {
        let r = if k == 0 { 0.0 } else { report.daily_returns[k - 1] };
        w.write_record([d.to_string(), v.to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("weights.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    let mut header = vec!["date".to_string()];
    header.extend(report.assets.iter().cloned());
    w.write_record(&header)?;
    for (d, b) in report.dates.iter().zip(&report.weights) {
        let mut row = vec![d.to_string()];
        row.extend(b.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("wealth.svg");
    std::fs::write(&path, wealth_svg(&report.wealth, &report.config.strategy)).map_err(|e| Error::io(&path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Line plot of a wealth curve as a standalone SVG document.
pub fn wealth_svg(wealth: &[f64], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const PAD: f64 = 40.0;
    let lo = wealth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = wealth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let steps = (wealth.len().max(2) - 1) as f64;
    let mut points = String::new();
    for (k, v) in wealth.iter().enumerate() {
        let x = PAD + (W - 2.0 * PAD) * k as f64 / steps;
        let y = H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
        if k > 0 {
            points.push(' ');
        }
        let _ = write!(points, "{x:.2},{y:.2}");
    }
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="100%" height="100%" fill="white"/>
<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{title}</text>
<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="#888"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="#888"/>
<text x="4" y="{PAD}" font-family="sans-serif" font-size="10">{hi:.4}</text>
<text x="4" y="{b}" font-family="sans-serif" font-size="10">{lo:.4}</text>
<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{points}"/>
</svg>
"##,
        b = H - PAD,
        r = W - PAD,
    )
}
