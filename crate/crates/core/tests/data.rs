use chrono::NaiveDate;
use portfolio_core::covariance::{portfolio_risk, rolling_covariance, window_covariance, Matrix};
use portfolio_core::dataset::{fit_normalization, first_decision_day};
use portfolio_core::indicators::{compute_indicators, FeatureTensor, N_FEATURES};
use portfolio_core::market_data::{
    compute_returns, load_ohlcv, load_panel, save_panel, split, write_ohlcv_csv, ColumnMap, MarketPanel,
    ReturnMatrix, SplitSpec,
};
use portfolio_core::simplex::project_simplex;
use portfolio_core::synthetic::{business_days, drift_market, DriftSpec};
use proptest::prelude::*;

fn panel_from_closes(closes: Vec<Vec<f64>>) -> MarketPanel {
    let t = closes[0].len();
    let dates = business_days(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), t);
    let assets = (0..closes.len()).map(|i| format!("A{i}")).collect();
    let open = closes
        .iter()
        .map(|c| (0..t).map(|k| if k == 0 { c[0] } else { c[k - 1] }).collect())
        .collect();
    let high = closes
        .iter()
        .enumerate()
        .map(|(i, c)| c.iter().enumerate().map(|(k, v)| v * (1.004 + 0.003 * ((k + i) as f64).cos().abs())).collect())
        .collect();
    let low = closes
        .iter()
        .enumerate()
        .map(|(i, c)| c.iter().enumerate().map(|(k, v)| v * (0.996 - 0.002 * ((k * 3 + i) as f64).sin().abs())).collect())
        .collect();
    let volume = closes.iter().map(|c| vec![1000.0; c.len()]).collect();
    MarketPanel::new(dates, assets, open, high, low, closes, volume).unwrap()
}

fn sine_closes(t: usize, phase: f64) -> Vec<f64> {
    (0..t)
        .map(|k| 100.0 + 8.0 * (k as f64 / 4.0 + phase).sin() + 0.05 * k as f64)
        .collect()
}

#[test]
fn synthetic_panel_round_trips_bit_exactly() {
    let panel = drift_market(&DriftSpec {
        n_assets: 3,
        days: 90,
        ..DriftSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();

    let cache = dir.path().join("panel.json");
    save_panel(&panel, &cache).unwrap();
    assert_eq!(load_panel(&cache).unwrap(), panel);

    let csv = dir.path().join("ohlcv.csv");
    write_ohlcv_csv(&panel, &csv).unwrap();
    let reread = load_ohlcv(&csv, &ColumnMap::default(), 22).unwrap();
    assert_eq!(reread, panel);
    save_panel(&reread, &cache).unwrap();
    assert_eq!(load_panel(&cache).unwrap(), panel);
}

#[test]
fn cache_with_wrong_format_tag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    std::fs::write(
        &path,
        r#"{"format":"other/v9","calendar":[],"assets":[],"open":[],"high":[],"low":[],"close":[],"volume":[]}"#,
    )
    .unwrap();
    assert!(load_panel(&path).is_err());
}

#[test]
fn returns_hand_example() {
    let p = panel_from_closes(vec![vec![100.0, 110.0, 99.0]]);
    let r = compute_returns(&p).unwrap();
    assert!((r.r[0][0] - 0.10).abs() < 1e-15);
    assert!((r.r[0][1] + 0.10).abs() < 1e-15);
}

fn feature_rows(f: &FeatureTensor, t: usize) -> Vec<[f64; N_FEATURES]> {
    f.values.iter().map(|a| a[t]).collect()
}

/// 100 days split 70/30: features and covariances on day 71 are unchanged when
/// everything after day 71 is dropped or corrupted.
#[test]
fn test_features_do_not_look_ahead() {
    let w = 20;
    let closes: Vec<Vec<f64>> = (0..3).map(|i| sine_closes(100, i as f64)).collect();
    let panel = panel_from_closes(closes);
    let spec = SplitSpec {
        train_start: panel.calendar[0],
        train_end: panel.calendar[69],
        validation_end: None,
        test_start: panel.calendar[70],
        test_end: panel.calendar[99],
    };
    let context = first_decision_day(w);
    let (_, test, offset) = split(&panel, &spec, context).unwrap();
    let start = 70 - offset;
    let day = 71;
    let local = day - start;

    let full = compute_indicators(&test).unwrap();
    let truncated = compute_indicators(&panel.slice(start, day + 1)).unwrap();
    assert_eq!(feature_rows(&full, local), feature_rows(&truncated, local));

    let mut corrupted = test.clone();
    for i in 0..corrupted.n_assets() {
        for t in local + 1..corrupted.n_periods() {
            corrupted.close[i][t] *= 3.0;
            corrupted.high[i][t] *= 3.5;
            corrupted.low[i][t] *= 0.5;
        }
    }
    let bent = compute_indicators(&corrupted).unwrap();
    assert_eq!(feature_rows(&full, local), feature_rows(&bent, local));

    // covariance at day t uses returns ending at t - 1, i.e. closes up to t
    let cov_full = window_covariance(&compute_returns(&test).unwrap(), local - 1, w, 1e-8);
    let cov_bent = window_covariance(&compute_returns(&corrupted).unwrap(), local - 1, w, 1e-8);
    assert_eq!(cov_full, cov_bent);
}

#[test]
fn normalization_ignores_test_rows() {
    let closes: Vec<Vec<f64>> = (0..2).map(|i| sine_closes(150, i as f64 * 0.5)).collect();
    let panel = panel_from_closes(closes);
    let fit_end = 99;
    let stats = fit_normalization(&panel, fit_end).unwrap();
    let mut perturbed = panel.clone();
    for t in fit_end + 1..150 {
        perturbed.close[0][t] *= 1.7;
        perturbed.high[0][t] *= 1.9;
    }
    assert_eq!(fit_normalization(&perturbed, fit_end).unwrap(), stats);
}

// Scalar re-implementations of each indicator, written from the textbook
// definitions with explicit loops.

fn ref_ema(x: &[f64], n: usize) -> Vec<f64> {
    let k = 2.0 / (n as f64 + 1.0);
    let mut out = vec![x[0]];
    for t in 1..x.len() {
        let prev = out[t - 1];
        out.push(prev + k * (x[t] - prev));
    }
    out
}

fn ref_mean(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

fn ref_wilder_at(x: &[f64], n: usize, first: usize, t: usize) -> f64 {
    let mut avg = ref_mean(&x[first..first + n]);
    for v in &x[first + n..=t] {
        avg = avg - avg / n as f64 + v / n as f64;
    }
    avg
}

fn ref_rsi(c: &[f64], t: usize) -> f64 {
    let n = 14;
    let gains: Vec<f64> = (0..c.len()).map(|k| if k == 0 { 0.0 } else { (c[k] - c[k - 1]).max(0.0) }).collect();
    let losses: Vec<f64> = (0..c.len()).map(|k| if k == 0 { 0.0 } else { (c[k - 1] - c[k]).max(0.0) }).collect();
    let g = ref_wilder_at(&gains, n, 1, t);
    let l = ref_wilder_at(&losses, n, 1, t);
    100.0 * g / (g + l)
}

fn ref_cci(h: &[f64], l: &[f64], c: &[f64], t: usize) -> f64 {
    let tp: Vec<f64> = (t - 19..=t).map(|k| (h[k] + l[k] + c[k]) / 3.0).collect();
    let m = ref_mean(&tp);
    let md = ref_mean(&tp.iter().map(|v| (v - m).abs()).collect::<Vec<_>>());
    (tp[19] - m) / (0.015 * md)
}

fn ref_adx(h: &[f64], l: &[f64], c: &[f64], t: usize) -> f64 {
    let n = 14;
    let len = c.len();
    let mut tr = vec![0.0; len];
    let mut pdm = vec![0.0; len];
    let mut mdm = vec![0.0; len];
    for k in 1..len {
        tr[k] = *[h[k] - l[k], (h[k] - c[k - 1]).abs(), (l[k] - c[k - 1]).abs()]
            .iter()
            .max_by(|a, b| a.total_cmp(b))
            .unwrap();
        let up = h[k] - h[k - 1];
        let down = l[k - 1] - l[k];
        if up > down && up > 0.0 {
            pdm[k] = up;
        }
        if down > up && down > 0.0 {
            mdm[k] = down;
        }
    }
    let dx: Vec<f64> = (0..len)
        .map(|k| {
            if k < n {
                return 0.0;
            }
            let a = ref_wilder_at(&tr, n, 1, k);
            let p = 100.0 * ref_wilder_at(&pdm, n, 1, k) / a;
            let m = 100.0 * ref_wilder_at(&mdm, n, 1, k) / a;
            100.0 * (p - m).abs() / (p + m)
        })
        .collect();
    ref_wilder_at(&dx, n, n, t)
}

#[test]
fn indicators_match_scalar_reference_on_sine_wave() {
    let panel = panel_from_closes(vec![sine_closes(70, 0.3)]);
    let f = compute_indicators(&panel).unwrap();
    let (h, l, c) = (&panel.high[0], &panel.low[0], &panel.close[0]);
    let e12 = ref_ema(c, 12);
    let e26 = ref_ema(c, 26);
    for t in 59..70 {
        let row = f.values[0][t];
        let win = &c[t - 19..=t];
        let mid = ref_mean(win);
        let sd = ref_mean(&win.iter().map(|v| (v - mid).powi(2)).collect::<Vec<_>>()).sqrt();
        let want = [
            e12[t] - e26[t],
            mid - 2.0 * sd,
            mid + 2.0 * sd,
            ref_rsi(c, t),
            ref_cci(h, l, c, t),
            ref_adx(h, l, c, t),
            ref_mean(&c[t - 29..=t]),
            ref_mean(&c[t - 59..=t]),
        ];
        for k in 0..N_FEATURES {
            assert!((row[k] - want[k]).abs() < 1e-9, "day {t} feature {k}: {} vs {}", row[k], want[k]);
        }
    }
    // warm-up rows carry the first genuine value
    assert_eq!(f.values[0][0][7], f.values[0][59][7]);
    assert_eq!(f.values[0][10][6], f.values[0][29][6]);
    assert_eq!(f.values[0][5][5], f.values[0][27][5]);
}

#[test]
fn price_scaling_is_equivariant() {
    let panel = panel_from_closes(vec![sine_closes(80, 1.1), sine_closes(80, 2.0)]);
    let k = 3.7;
    let mut scaled = panel.clone();
    for m in [&mut scaled.open, &mut scaled.high, &mut scaled.low, &mut scaled.close] {
        m.iter_mut().flatten().for_each(|v| *v *= k);
    }
    let a = compute_indicators(&panel).unwrap();
    let b = compute_indicators(&scaled).unwrap();
    for (ra, rb) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
        for f in [0, 1, 2, 6, 7] {
            assert!((rb[f] - k * ra[f]).abs() <= 1e-9 * (1.0 + rb[f].abs()));
        }
        for f in [3, 4, 5] {
            assert!((rb[f] - ra[f]).abs() <= 1e-8);
        }
    }
}

fn brute_covariance(r: &ReturnMatrix, end: usize, w: usize) -> Matrix {
    let n = r.n_assets();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut mi = 0.0;
            let mut mj = 0.0;
            for t in end + 1 - w..=end {
                mi += r.r[i][t];
                mj += r.r[j][t];
            }
            mi /= w as f64;
            mj /= w as f64;
            let mut s = 0.0;
            for t in end + 1 - w..=end {
                s += (r.r[i][t] - mi) * (r.r[j][t] - mj);
            }
            out[i][j] = s / (w as f64 - 1.0);
        }
    }
    out
}

fn min_eigenvalue_sym(m: &Matrix) -> f64 {
    // cyclic Jacobi rotations
    let n = m.len();
    let mut a = m.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p][q] * a[p][q];
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
        if off < 1e-30 {
            break;
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
}

fn returns_strategy() -> impl Strategy<Value = ReturnMatrix> {
    (2usize..5, 22usize..40).prop_flat_map(|(n, t)| {
        prop::collection::vec(prop::collection::vec(-0.2f64..0.2, t), n).prop_map(|r| ReturnMatrix { r })
    })
}

proptest! {
    #[test]
    fn rolling_covariance_matches_double_loop(r in returns_strategy()) {
        let w = 20;
        let series = rolling_covariance(&r, w, 0.0).unwrap();
        prop_assert_eq!(series.len(), r.n_periods() - w + 1);
        for end in w - 1..r.n_periods() {
            let got = series.ending_at(end).unwrap();
            let want = brute_covariance(&r, end, w);
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariances_are_symmetric_psd_and_risk_nonnegative(
        r in returns_strategy(),
        raw in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let series = rolling_covariance(&r, 20, 1e-8).unwrap();
        let n = r.n_assets();
        let b = project_simplex(&raw[..n]);
        for s in &series.sigma {
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(s[i][j], s[j][i]);
                }
            }
            prop_assert!(min_eigenvalue_sym(s) >= -1e-10);
            prop_assert!(portfolio_risk(&b, s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn covariance_commutes_with_asset_permutation(r in returns_strategy(), seed in 0u64..1000) {
        let n = r.n_assets();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left((seed as usize) % n);
        let permuted = ReturnMatrix { r: perm.iter().map(|&i| r.r[i].clone()).collect() };
        let end = r.n_periods() - 1;
        let a = window_covariance(&r, end, 20, 1e-8);
        let b = window_covariance(&permuted, end, 20, 1e-8);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(b[i][j], a[perm[i]][perm[j]]);
            }
        }
    }
}
