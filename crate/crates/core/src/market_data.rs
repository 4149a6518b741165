//! OHLCV loading, calendar alignment, return rates and train/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PANEL_FORMAT: &str = "portfolio-panel/v1";

/// Aligned per-asset price and volume series on a common calendar.
///
/// Matrices are stored asset-major: `close[i][t]` is the close of asset `i`
/// on `calendar[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPanel {
    pub calendar: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub open: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
    pub low: Vec<Vec<f64>>,
    pub close: Vec<Vec<f64>>,
    pub volume: Vec<Vec<f64>>,
}

impl MarketPanel {
    /// Builds a panel, checking shapes, calendar order and price positivity.
    pub fn new(
        calendar: Vec<NaiveDate>,
        assets: Vec<String>,
        open: Vec<Vec<f64>>,
        high: Vec<Vec<f64>>,
        low: Vec<Vec<f64>>,
        close: Vec<Vec<f64>>,
        volume: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let panel = MarketPanel {
            calendar,
            assets,
            open,
            high,
            low,
            close,
            volume,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_periods(&self) -> usize {
        self.calendar.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.assets.len();
        let t = self.calendar.len();
        for (name, m) in self.fields() {
            if m.len() != n || m.iter().any(|row| row.len() != t) {
                return Err(Error::Shape(format!("{name} matrix is not {n} x {t}")));
            }
        }
        if self.calendar.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("calendar is not strictly increasing".into()));
        }
        for (name, m) in self.fields().into_iter().take(4) {
            for (i, row) in m.iter().enumerate() {
                if let Some(k) = row.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
                    return Err(Error::InvalidPrice {
                        line: 0,
                        message: format!(
                            "{name} of {} on {} is {}",
                            self.assets[i], self.calendar[k], row[k]
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    fn fields(&self) -> [(&'static str, &Vec<Vec<f64>>); 5] {
        [
            ("open", &self.open),
            ("high", &self.high),
            ("low", &self.low),
            ("close", &self.close),
            ("volume", &self.volume),
        ]
    }

    /// Sub-panel over the half-open period range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> MarketPanel {
        let cut = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[start..end].to_vec()).collect();
        MarketPanel {
            calendar: self.calendar[start..end].to_vec(),
            assets: self.assets.clone(),
            open: cut(&self.open),
            high: cut(&self.high),
            low: cut(&self.low),
            close: cut(&self.close),
            volume: cut(&self.volume),
        }
    }

    /// Keeps the given assets (by index) in the given order.
    pub fn select_assets(&self, idx: &[usize]) -> MarketPanel {
        let pick = |m: &Vec<Vec<f64>>| idx.iter().map(|&i| m[i].clone()).collect();
        MarketPanel {
            calendar: self.calendar.clone(),
            assets: idx.iter().map(|&i| self.assets[i].clone()).collect(),
            open: pick(&self.open),
            high: pick(&self.high),
            low: pick(&self.low),
            close: pick(&self.close),
            volume: pick(&self.volume),
        }
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.calendar.binary_search(&date).ok()
    }

    pub fn asset_index(&self, symbol: &str) -> Option<usize> {
        self.assets.iter().position(|a| a == symbol)
    }
}

/// Header names for the input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub date: String,
    pub symbol: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            date: "date".into(),
            symbol: "symbol".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bar {
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

/// Reads a long-format OHLCV CSV and aligns it on the dates shared by every asset.
///
/// Assets with fewer than `min_observations` rows are rejected as a whole.
pub fn load_ohlcv(path: &Path, schema: &ColumnMap, min_observations: usize) -> Result<MarketPanel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ohlcv(&text, schema, min_observations)
}

pub fn parse_ohlcv(text: &str, schema: &ColumnMap, min_observations: usize) -> Result<MarketPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let cols = [
        col(&schema.date)?,
        col(&schema.symbol)?,
        col(&schema.open)?,
        col(&schema.high)?,
        col(&schema.low)?,
        col(&schema.close)?,
        col(&schema.volume)?,
    ];

    let mut by_asset: BTreeMap<String, BTreeMap<NaiveDate, Bar>> = BTreeMap::new();
    for (k, record) in reader.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |j: usize| -> Result<&str> {
            record.get(cols[j]).ok_or_else(|| Error::Parse {
                line,
                message: "row has too few fields".into(),
            })
        };
        let date = NaiveDate::parse_from_str(field(0)?, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date `{}`: {e}", field(0).unwrap_or_default()),
        })?;
        let symbol = field(1)?.to_string();
        if symbol.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty symbol".into(),
            });
        }
        let mut nums = [0.0; 5];
        for (j, slot) in nums.iter_mut().enumerate() {
            let raw = field(j + 2)?;
            *slot = raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{raw}`"),
            })?;
        }
        let [open, high, low, close, volume] = nums;
        for (name, p) in [("open", open), ("high", high), ("low", low), ("close", close)] {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::InvalidPrice {
                    line,
                    message: format!("{name} = {p} for {symbol} on {date}"),
                });
            }
        }
        if !(volume.is_finite() && volume >= 0.0) {
            return Err(Error::Parse {
                line,
                message: format!("negative or non-finite volume {volume}"),
            });
        }
        let bars = by_asset.entry(symbol.clone()).or_default();
        if bars
            .insert(
                date,
                Bar {
                    open,
                    high,
                    low,
                    close,
                    volume,
                },
            )
            .is_some()
        {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for {symbol} on {date}"),
            });
        }
    }
    if by_asset.is_empty() {
        return Err(Error::InsufficientData("no rows in input".into()));
    }

    let rejected: Vec<String> = by_asset
        .iter()
        .filter(|(_, bars)| bars.len() < min_observations)
        .map(|(s, _)| s.clone())
        .collect();
    if !rejected.is_empty() {
        return Err(Error::RejectedAssets {
            symbols: rejected,
            required: min_observations,
        });
    }

    let all_dates: BTreeSet<NaiveDate> = by_asset.values().flat_map(|b| b.keys().copied()).collect();
    let calendar: Vec<NaiveDate> = all_dates
        .iter()
        .copied()
        .filter(|d| by_asset.values().all(|b| b.contains_key(d)))
        .collect();
    let dropped = all_dates.len() - calendar.len();
    if dropped > 0 {
        log::info!("alignment dropped {dropped} dates not shared by every asset");
    }
    if calendar.is_empty() {
        return Err(Error::InsufficientData("assets share no common dates".into()));
    }

    let assets: Vec<String> = by_asset.keys().cloned().collect();
    let gather = |f: fn(&Bar) -> f64| -> Vec<Vec<f64>> {
        by_asset
            .values()
            .map(|bars| calendar.iter().map(|d| f(&bars[d])).collect())
            .collect()
    };
    MarketPanel::new(
        calendar.clone(),
        assets,
        gather(|b| b.open),
        gather(|b| b.high),
        gather(|b| b.low),
        gather(|b| b.close),
        gather(|b| b.volume),
    )
}

/// Writes the panel back out as a long-format CSV with the default header.
pub fn write_ohlcv_csv(panel: &MarketPanel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "symbol", "open", "high", "low", "close", "volume"])?;
    for t in 0..panel.n_periods() {
        for i in 0..panel.n_assets() {
            w.write_record([
                panel.calendar[t].format("%Y-%m-%d").to_string(),
                panel.assets[i].clone(),
                panel.open[i][t].to_string(),
                panel.high[i][t].to_string(),
                panel.low[i][t].to_string(),
                panel.close[i][t].to_string(),
                panel.volume[i][t].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// On-disk panel cache. Matrices are time-major: `close[t][i]`.
#[derive(Serialize, Deserialize)]
struct PanelFile {
    format: String,
    calendar: Vec<NaiveDate>,
    assets: Vec<String>,
    open: Vec<Vec<f64>>,
    high: Vec<Vec<f64>>,
    low: Vec<Vec<f64>>,
    close: Vec<Vec<f64>>,
    volume: Vec<Vec<f64>>,
}

fn transpose(m: &[Vec<f64>], cols: usize) -> Vec<Vec<f64>> {
    (0..cols).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

pub fn save_panel(panel: &MarketPanel, path: &Path) -> Result<()> {
    let t = panel.n_periods();
    let file = PanelFile {
        format: PANEL_FORMAT.to_string(),
        calendar: panel.calendar.clone(),
        assets: panel.assets.clone(),
        open: transpose(&panel.open, t),
        high: transpose(&panel.high, t),
        low: transpose(&panel.low, t),
        close: transpose(&panel.close, t),
        volume: transpose(&panel.volume, t),
    };
    let json = serde_json::to_string(&file)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_panel(path: &Path) -> Result<MarketPanel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PanelFile = serde_json::from_str(&text)?;
    if file.format != PANEL_FORMAT {
        return Err(Error::Format(format!(
            "expected panel format `{PANEL_FORMAT}`, found `{}`",
            file.format
        )));
    }
    let n = file.assets.len();
    for m in [&file.open, &file.high, &file.low, &file.close, &file.volume] {
        if m.iter().any(|row| row.len() != n) {
            return Err(Error::Shape("panel row width differs from asset count".into()));
        }
    }
    MarketPanel::new(
        file.calendar,
        file.assets,
        transpose(&file.open, n),
        transpose(&file.high, n),
        transpose(&file.low, n),
        transpose(&file.close, n),
        transpose(&file.volume, n),
    )
}

/// Simple close-to-close return rates, `r[i][t] = close[i][t+1] / close[i][t] - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMatrix {
    pub r: Vec<Vec<f64>>,
}

impl ReturnMatrix {
    pub fn n_assets(&self) -> usize {
        self.r.len()
    }

    pub fn n_periods(&self) -> usize {
        self.r.first().map_or(0, Vec::len)
    }

    /// Cross-section of returns realized over period `t`.
    pub fn at(&self, t: usize) -> Vec<f64> {
        self.r.iter().map(|row| row[t]).collect()
    }
}

pub fn compute_returns(panel: &MarketPanel) -> Result<ReturnMatrix> {
    if panel.n_periods() < 2 {
        return Err(Error::InsufficientData(format!(
            "returns need at least 2 periods, panel has {}",
            panel.n_periods()
        )));
    }
    let r = panel
        .close
        .iter()
        .map(|row| row.windows(2).map(|w| w[1] / w[0] - 1.0).collect())
        .collect();
    Ok(ReturnMatrix { r })
}

/// Date boundaries of the train / validation / test protocol. All dates inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    /// Optional validation period `(train_end, validation_end]` used for checkpoint selection.
    #[serde(default)]
    pub validation_end: Option<NaiveDate>,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl SplitSpec {
    pub fn validate(&self, panel: &MarketPanel) -> Result<()> {
        let mut dates = vec![
            ("train_start", self.train_start),
            ("train_end", self.train_end),
            ("test_start", self.test_start),
            ("test_end", self.test_end),
        ];
        if let Some(v) = self.validation_end {
            dates.push(("validation_end", v));
        }
        for (name, d) in &dates {
            if panel.index_of(*d).is_none() {
                return Err(Error::InvalidSplit(format!("{name} {d} is not a trading date")));
            }
        }
        if self.train_start > self.train_end {
            return Err(Error::InvalidSplit("train_start after train_end".into()));
        }
        if self.train_end > self.test_start {
            return Err(Error::InvalidSplit(format!(
                "train_end {} is after test_start {}",
                self.train_end, self.test_start
            )));
        }
        if let Some(v) = self.validation_end {
            if v <= self.train_end || v > self.test_start {
                return Err(Error::InvalidSplit(
                    "validation_end must fall in (train_end, test_start]".into(),
                ));
            }
        }
        if self.test_start > self.test_end {
            return Err(Error::InvalidSplit("test_start after test_end".into()));
        }
        Ok(())
    }

    /// Last date of the training panel (training plus validation period).
    pub fn fit_end(&self) -> NaiveDate {
        self.validation_end.unwrap_or(self.train_end)
    }
}

/// Splits the panel into a training panel and a test panel.
///
/// The test panel is prefixed with up to `context` rows preceding `test_start`
/// so indicator and covariance windows at the first test date only use past data.
/// Returns the test panel together with the index of `test_start` inside it.
pub fn split(
    panel: &MarketPanel,
    spec: &SplitSpec,
    context: usize,
) -> Result<(MarketPanel, MarketPanel, usize)> {
    spec.validate(panel)?;
    let idx = |d: NaiveDate| panel.index_of(d).expect("validated");
    let (a, b) = (idx(spec.train_start), idx(spec.fit_end()));
    let (c, d) = (idx(spec.test_start), idx(spec.test_end));
    if b < a || d < c {
        return Err(Error::InvalidSplit("empty split".into()));
    }
    let train = panel.slice(a, b + 1);
    let ctx_start = c.saturating_sub(context);
    let test = panel.slice(ctx_start, d + 1);
    Ok((train, test, c - ctx_start))
}
