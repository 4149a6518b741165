use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::ValueEnum;
use portfolio_core::backtest::{baseline_market, baseline_mvm, emit_report, run_backtest, PortfolioSeries};
use portfolio_core::dataset::{first_decision_day, Prepared};
use portfolio_core::indicators::{NormStats, N_FEATURES};
use portfolio_core::market_data::{load_ohlcv, save_panel, split, write_ohlcv_csv, ColumnMap, MarketPanel};
use portfolio_core::model::{Model, ModelOutput};
use portfolio_core::objectives::{self, load_checkpoint};
use portfolio_core::risk_control::{adjust_series, improve as improve_logits, min_variance, MinVarOptions, RiskAdjustment};
use portfolio_core::synthetic::{drift_market, DriftSpec};
use portfolio_core::autodiff::ParamStore;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run_dir::{self, file_sha256, InputFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// The trained model's softmax portfolio.
    Model,
    /// Equal weights, rebalanced daily.
    Market,
    /// Minimum-variance portfolio of each day's covariance.
    Mvm,
}

impl Strategy {
    fn name(self) -> &'static str {
        match self {
            Strategy::Model => "model",
            Strategy::Market => "market",
            Strategy::Mvm => "mvm",
        }
    }
}

/// Test-period data aligned to decision days.
struct TestPeriod {
    prep: Prepared,
    days: Vec<usize>,
    /// `days.len() + 1` dates: each decision day plus the final settlement day.
    settle: Vec<NaiveDate>,
    realized: Vec<Vec<f64>>,
}

impl TestPeriod {
    fn new(cfg: &RunConfig, panel: &MarketPanel, norm: &NormStats) -> CliResult<TestPeriod> {
        let w = cfg.train.window;
        let context = first_decision_day(w);
        let (_, test, offset) = split(panel, &cfg.split, context)?;
        if offset < context {
            return Err(portfolio_core::Error::InsufficientData(format!(
                "test_start needs {context} earlier trading days for indicator and covariance windows; only {offset} available"
            ))
            .into());
        }
        let prep = Prepared::new(test, norm, w, cfg.train.ridge)?;
        let days = prep.decision_days(offset, usize::MAX);
        if days.len() < 2 {
            return Err(portfolio_core::Error::InsufficientData(format!(
                "test period has {} decision days; need at least 2",
                days.len()
            ))
            .into());
        }
        let mut settle: Vec<NaiveDate> = days.iter().map(|&t| prep.panel.calendar[t]).collect();
        settle.push(prep.panel.calendar[days[days.len() - 1] + 1]);
        let realized = days.iter().map(|&t| prep.realized(t)).collect();
        Ok(TestPeriod {
            prep,
            days,
            settle,
            realized,
        })
    }

    fn dates(&self) -> &[NaiveDate] {
        &self.settle[..self.days.len()]
    }

    fn sigmas(&self) -> CliResult<Vec<portfolio_core::covariance::Matrix>> {
        self.days
            .iter()
            .map(|&t| Ok(self.prep.sigma_before(t)?.clone()))
            .collect()
    }
}

struct LoadedModel {
    model: Model,
    norm: NormStats,
    path: PathBuf,
}

fn load_model(cfg: &RunConfig) -> CliResult<LoadedModel> {
    let path = match &cfg.checkpoint {
        Some(p) => p.clone(),
        None => run_dir::latest_checkpoint(&cfg.output_dir).ok_or_else(|| {
            CliError::Config(format!(
                "no checkpoint given and no train-* run under {}",
                cfg.output_dir.display()
            ))
        })?,
    };
    let store = ParamStore::load(&path)?;
    let (model, norm, _) = load_checkpoint(&store, cfg.train.window, cfg.train.mixing)?;
    Ok(LoadedModel { model, norm, path })
}

struct StrategyRun {
    test: TestPeriod,
    series: PortfolioSeries,
    model_output: Option<ModelOutput>,
    inputs: Vec<InputFile>,
}

fn run_strategy(cfg: &RunConfig, strategy: Strategy) -> CliResult<StrategyRun> {
    let panel = cfg.load_panel()?;
    let mut inputs = vec![input(&cfg.panel)?];
    let identity = NormStats {
        mean: [0.0; N_FEATURES],
        std: [1.0; N_FEATURES],
    };
    let (test, weights, model_output) = match strategy {
        Strategy::Model => {
            let m = load_model(cfg)?;
            inputs.push(input(&m.path)?);
            if m.model.params.require("lstm.w_ih")?.shape()[1] != 4 * cfg.train.hidden {
                log::warn!(
                    "checkpoint hidden size {} differs from config ({}); using the checkpoint",
                    m.model.config.hidden,
                    cfg.train.hidden
                );
            }
            let test = TestPeriod::new(cfg, &panel, &m.norm)?;
            let batch = test.prep.batch(&test.days, cfg.train.mixing)?;
            let out = m.model.predict(&batch)?;
            (test, out.weights.clone(), Some(out))
        }
        Strategy::Market => {
            let test = TestPeriod::new(cfg, &panel, &identity)?;
            let w = baseline_market(test.dates(), &test.prep.panel.assets).weights;
            (test, w, None)
        }
        Strategy::Mvm => {
            let test = TestPeriod::new(cfg, &panel, &identity)?;
            let sig = test.sigmas()?;
            let refs: Vec<_> = sig.iter().collect();
            let w = baseline_mvm(test.dates(), &test.prep.panel.assets, &refs)?.weights;
            (test, w, None)
        }
    };
    let series = PortfolioSeries {
        dates: test.dates().to_vec(),
        assets: test.prep.panel.assets.clone(),
        weights,
    };
    Ok(StrategyRun {
        test,
        series,
        model_output,
        inputs,
    })
}

fn input(path: &Path) -> CliResult<InputFile> {
    Ok(InputFile {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
    })
}

pub fn ingest(csv: &Path, out: &Path, columns: Option<&Path>, min_observations: usize) -> CliResult<()> {
    let schema = match columns {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<ColumnMap>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ColumnMap::default(),
    };
    let panel = load_ohlcv(csv, &schema, min_observations)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_panel(&panel, out)?;
    println!(
        "{} assets x {} dates ({} to {}) -> {}",
        panel.n_assets(),
        panel.n_periods(),
        panel.calendar[0],
        panel.calendar[panel.n_periods() - 1],
        out.display()
    );
    Ok(())
}

pub fn synth(out: &Path, spec: &DriftSpec) -> CliResult<()> {
    let panel = drift_market(spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_ohlcv_csv(&panel, out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CliResult<PathBuf> {
    let panel = cfg.load_panel()?;
    let idx = |d| panel.index_of(d).expect("split validated");
    let start = idx(cfg.split.train_start);
    let train_panel = panel.slice(start, idx(cfg.split.fit_end()) + 1);
    let train_end = idx(cfg.split.train_end) - start;
    let outcome = objectives::train(&train_panel, train_end, &cfg.train)?;

    let dir = run_dir::create(&cfg.output_dir, "train")?;
    let ckpt = dir.join("checkpoint.json");
    outcome.checkpoint().save(&ckpt)?;
    outcome.write_log(&dir.join("train_log.csv"))?;
    let args = json!({
        "selected_epoch": outcome.selected_epoch,
        "diverged_at_epoch": outcome.diverged,
    });
    run_dir::write_manifest(&dir, "train", cfg, &args, &[input(&cfg.panel)?])?;
    if let Some(epoch) = outcome.diverged {
        return Err(portfolio_core::Error::Diverged {
            epoch,
            message: format!(
                "non-finite loss; checkpoint from epoch {} saved to {}",
                outcome.selected_epoch,
                ckpt.display()
            ),
        }
        .into());
    }
    println!("{}", dir.display());
    Ok(dir)
}

pub fn backtest(cfg: &RunConfig, strategy: Strategy) -> CliResult<PathBuf> {
    let run = run_strategy(cfg, strategy)?;
    let report = run_backtest(
        &run.series,
        &run.test.realized,
        &run.test.settle,
        cfg.eval_cost(),
        cfg.periods_per_year,
        strategy.name(),
    )?;
    let dir = run_dir::create(&cfg.output_dir, &format!("backtest-{}", strategy.name()))?;
    emit_report(&report, &dir)?;
    run_dir::write_manifest(&dir, "backtest", cfg, &json!({ "strategy": strategy }), &run.inputs)?;
    let m = report.metrics;
    println!(
        "{} CW={} APR={} AVOL={} ASR={} MDD={} ACR={}",
        dir.display(),
        m.cw,
        m.apr,
        m.avol,
        m.asr,
        m.mdd,
        m.acr
    );
    Ok(dir)
}

fn min_variance_series(sigmas: &[portfolio_core::covariance::Matrix]) -> CliResult<Vec<Vec<f64>>> {
    sigmas
        .iter()
        .map(|s| {
            let mv = min_variance(s, MinVarOptions::default())?;
            if !mv.converged {
                log::warn!("min-variance solver stopped after {} iterations", mv.iterations);
            }
            Ok(mv.weights)
        })
        .collect()
}

fn write_adjustments(
    path: &Path,
    dates: &[NaiveDate],
    assets: &[String],
    sigma_g: f64,
    adj: &[RiskAdjustment],
) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Config(format!("{other:?}")),
    })?;
    let mut header: Vec<String> = ["date", "sigma_g", "gamma", "achieved_risk", "clamped"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(assets.iter().cloned());
    w.write_record(&header)?;
    for (d, a) in dates.iter().zip(adj) {
        let mut row = vec![
            d.to_string(),
            sigma_g.to_string(),
            a.gamma.to_string(),
            a.achieved_risk.to_string(),
            a.clamped.to_string(),
        ];
        row.extend(a.weights.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn adjusted_report(
    cfg: &RunConfig,
    run: &StrategyRun,
    adj: &[RiskAdjustment],
    name: &str,
    dir: &Path,
) -> CliResult<()> {
    let series = PortfolioSeries {
        weights: adj.iter().map(|a| a.weights.clone()).collect(),
        ..run.series.clone()
    };
    let report = run_backtest(
        &series,
        &run.test.realized,
        &run.test.settle,
        cfg.eval_cost(),
        cfg.periods_per_year,
        name,
    )?;
    emit_report(&report, dir)?;
    Ok(())
}

pub fn risk(cfg: &RunConfig, sigma_list: &[f64], strategy: Strategy) -> CliResult<PathBuf> {
    let sigmas_g: Vec<f64> = if sigma_list.is_empty() {
        cfg.sigma.clone()
    } else {
        sigma_list.to_vec()
    };
    if sigmas_g.is_empty() {
        return Err(CliError::Config("no target risk given (--sigma or config `sigma`)".into()));
    }
    if let Some(s) = sigmas_g.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(CliError::Config(format!("target risk must be positive, got {s}")));
    }
    let run = run_strategy(cfg, strategy)?;
    let sigmas = run.test.sigmas()?;
    let b_m = min_variance_series(&sigmas)?;
    let dir = run_dir::create(&cfg.output_dir, "risk")?;

    let results: Vec<CliResult<usize>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sigmas_g
            .iter()
            .map(|&sg| {
                let (run, sigmas, b_m, dir) = (&run, &sigmas, &b_m, &dir);
                scope.spawn(move || -> CliResult<usize> {
                    let adj = adjust_series(&run.series.weights, b_m, sigmas, sg)?;
                    let sub = dir.join(format!("sigma-{sg}"));
                    std::fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
                    write_adjustments(
                        &sub.join("risk_adjustment.csv"),
                        &run.series.dates,
                        &run.series.assets,
                        sg,
                        &adj,
                    )?;
                    adjusted_report(cfg, run, &adj, &format!("{}-risk-{sg}", strategy.name()), &sub)?;
                    Ok(adj.iter().filter(|a| a.clamped).count())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Config("risk worker panicked".into()))))
            .collect()
    });
    for (sg, r) in sigmas_g.iter().zip(results) {
        let clamped = r?;
        if clamped > 0 {
            log::warn!("sigma_g={sg}: {clamped} of {} days clamped to the feasible interval", run.test.days.len());
        }
    }
    let args = json!({ "strategy": strategy, "sigma": sigmas_g });
    run_dir::write_manifest(&dir, "risk", cfg, &args, &run.inputs)?;
    println!("{}", dir.display());
    Ok(dir)
}

pub fn improve(cfg: &RunConfig, sigma_g: Option<f64>, steps: Option<usize>, return_weight: Option<f64>) -> CliResult<PathBuf> {
    let sigma_g = sigma_g
        .or_else(|| cfg.sigma.first().copied())
        .ok_or_else(|| CliError::Config("no target risk given (--sigma or config `sigma`)".into()))?;
    if !(sigma_g > 0.0 && sigma_g.is_finite()) {
        return Err(CliError::Config(format!("target risk must be positive, got {sigma_g}")));
    }
    let mut opts = cfg.improve;
    if let Some(s) = steps {
        opts.steps = s;
    }
    if let Some(z) = return_weight {
        opts.return_weight = z;
    }
    if !opts.return_weight.is_finite() {
        return Err(CliError::Config("improvement return weight must be finite".into()));
    }
    let run = run_strategy(cfg, Strategy::Model)?;
    let out = run.model_output.as_ref().expect("model strategy");
    let sigmas = run.test.sigmas()?;
    let b_m = min_variance_series(&sigmas)?;
    let predicted = (opts.return_weight != 0.0).then_some(out.predicted.as_slice());
    let res = improve_logits(&out.logits, &b_m, &sigmas, sigma_g, predicted, opts)?;

    let dir = run_dir::create(&cfg.output_dir, "improve")?;
    write_adjustments(
        &dir.join("risk_adjustment.csv"),
        &run.series.dates,
        &run.series.assets,
        sigma_g,
        &res.adjustments,
    )?;
    let hist = dir.join("improve_history.csv");
    let mut text = String::from("step,gamma_sum,objective\n");
    for (k, (g, o)) in res.gamma_history.iter().zip(&res.objective_history).enumerate() {
        text.push_str(&format!("{k},{g},{o}\n"));
    }
    std::fs::write(&hist, text).map_err(|e| CliError::io(&hist, e))?;
    adjusted_report(cfg, &run, &res.adjustments, &format!("model-improve-{sigma_g}"), &dir)?;
    let args = json!({
        "sigma": sigma_g,
        "improve": opts,
        "accepted_steps": res.accepted_steps,
        "warning": res.warning,
    });
    run_dir::write_manifest(&dir, "improve", cfg, &args, &run.inputs)?;
    println!(
        "{} accepted_steps={} gamma_sum {} -> {}",
        dir.display(),
        res.accepted_steps,
        res.gamma_history[0],
        res.gamma_history[res.gamma_history.len() - 1]
    );
    Ok(dir)
}

/// Summarizes every `metrics.json` below `run` into `summary.csv` and stdout.
pub fn report(run: &Path) -> CliResult<PathBuf> {
    if !run.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", run.display())));
    }
    let mut files = Vec::new();
    find_metrics(run, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(portfolio_core::Error::Format(format!("no metrics.json under {}", run.display())).into());
    }
    let cols = ["CW", "APR", "AVOL", "ASR", "MDD", "ACR"];
    let out = run.join("summary.csv");
    let mut w = csv::Writer::from_path(&out).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(&out, io),
        other => CliError::Config(format!("{other:?}")),
    })?;
    let mut header = vec!["run".to_string(), "strategy".to_string()];
    header.extend(cols.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    println!("{}", header.join("\t"));
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| CliError::io(&f, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let rel = f
            .parent()
            .and_then(|p| p.strip_prefix(run).ok())
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut row = vec![
            if rel.is_empty() { ".".into() } else { rel },
            v["config"]["strategy"].as_str().unwrap_or("").to_string(),
        ];
        for c in cols {
            row.push(match &v["metrics"][c] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            });
        }
        println!("{}", row.join("\t"));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(p);
        }
    }
    Ok(())
}
