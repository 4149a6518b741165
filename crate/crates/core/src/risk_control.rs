//! Risk targeting for long-only portfolios.
//!
//! Three pieces:
//! - [`min_variance`]: the long-only minimum-variance portfolio `b_m`.
//! - [`interpolation_coeff`] / [`adjust`]: the mix `(1 - gamma) b + gamma b_m`
//!   whose variance equals a requested level `sigma_g` exactly. The variance of
//!   the mix is the quadratic `A gamma^2 + B gamma + C` with
//!   `A = (b - b_m)^T S (b - b_m) >= 0`, `B = 2 (b^T S b_m - b^T S b) <= 0` and
//!   `C = b^T S b`, which is non-increasing on `[0, 1]`.
//! - [`improve`]: gradient descent on the pre-softmax logits of `b` that lowers
//!   the total mixing weight needed to hit `sigma_g`, optionally rewarding
//!   predicted return.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::covariance::{mat_vec, quad_form, Matrix};
use crate::error::{Error, Result};
use crate::simplex::{project_simplex, softmax, uniform};

/// Below this the quadratic coefficient is treated as zero.
pub const QUADRATIC_EPS: f64 = 1e-18;
/// Steps whose discriminant falls below this are rejected.
pub const DISCRIMINANT_EPS: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinVarOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MinVarOptions {
    fn default() -> Self {
        MinVarOptions {
            tol: 1e-10,
            max_iters: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinVarPortfolio {
    pub weights: Vec<f64>,
    pub risk: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn check_inputs(sigma: &Matrix, vecs: &[&[f64]]) -> Result<usize> {
    let n = sigma.len();
    if n == 0 || sigma.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("covariance must be square and non-empty, got {n} rows")));
    }
    for v in vecs {
        if v.len() != n {
            return Err(Error::Shape(format!("vector of length {} against {n} assets", v.len())));
        }
    }
    Ok(n)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn lambda_max(sigma: &Matrix) -> f64 {
    let n = sigma.len();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    // slight asymmetry so the start vector is not orthogonal to the top eigenvector
    for (k, v) in x.iter_mut().enumerate() {
        *v *= 1.0 + 1e-3 * k as f64;
    }
    let mut lambda = 0.0;
    for _ in 0..500 {
        let y = mat_vec(sigma, &x);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = quad_form(&x, sigma, &x) / x.iter().map(|v| v * v).sum::<f64>();
        x = y.iter().map(|v| v / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

/// Long-only minimum-variance portfolio by accelerated projected gradient
/// with exact simplex projection and step `1 / L`, `L = 2 lambda_max`.
///
/// Every 25 iterations the variance is minimized exactly on the current
/// support; if that point satisfies the KKT conditions it is returned.
/// Otherwise converged when `L * ||b - P(b - grad / L)|| < tol`. On hitting
/// `max_iters` the best iterate is returned with `converged = false`.
pub fn min_variance(sigma: &Matrix, opts: MinVarOptions) -> Result<MinVarPortfolio> {
    let n = check_inputs(sigma, &[])?;
    if sigma.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("min_variance input"));
    }
    // small safety margin over the power-iteration estimate
    let lip = 2.0 * lambda_max(sigma) * 1.01;
    let mut x = uniform(n);
    if lip == 0.0 {
        return Ok(MinVarPortfolio {
            risk: quad_form(&x, sigma, &x),
            weights: x,
            converged: true,
            iterations: 0,
        });
    }
    let step = 1.0 / lip;
    let mut y = x.clone();
    let mut t_k = 1.0_f64;
    let mut best = (quad_form(&x, sigma, &x), x.clone());
    let mut f_prev = best.0;

    for it in 1..=opts.max_iters {
        let g = mat_vec(sigma, &y);
        let x_next = project_simplex(
            &y.iter()
                .zip(&g)
                .map(|(yi, gi)| yi - step * 2.0 * gi)
                .collect::<Vec<_>>(),
        );
        let f_next = quad_form(&x_next, sigma, &x_next);
        if f_next < best.0 {
            best = (f_next, x_next.clone());
        }

        // gradient-mapping norm at the new point
        let gx = mat_vec(sigma, &x_next);
        let probe = project_simplex(
            &x_next
                .iter()
                .zip(&gx)
                .map(|(xi, gi)| xi - step * 2.0 * gi)
                .collect::<Vec<_>>(),
        );
        let gm = lip
            * x_next
                .iter()
                .zip(&probe)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        if gm < opts.tol {
            let risk = quad_form(&x_next, sigma, &x_next);
            let (risk, weights) = polish(sigma, if risk <= best.0 { (risk, x_next) } else { best });
            return Ok(MinVarPortfolio {
                weights,
                risk,
                converged: true,
                iterations: it,
            });
        }

        // the support is usually identified long before the gradient map is small
        if it % 25 == 0 {
            if let Some((risk, weights)) = face_optimum(sigma, &x_next).filter(|(_, w)| is_kkt_point(sigma, w)) {
                return Ok(MinVarPortfolio {
                    weights,
                    risk,
                    converged: true,
                    iterations: it,
                });
            }
        }

        // restart momentum whenever the objective goes up
        if f_next > f_prev {
            t_k = 1.0;
            y = x.clone();
            f_prev = quad_form(&x, sigma, &x);
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt()) / 2.0;
        let mom = (t_k - 1.0) / t_next;
        y = x_next
            .iter()
            .zip(&x)
            .map(|(a, b)| a + mom * (a - b))
            .collect();
        x = x_next;
        t_k = t_next;
        f_prev = f_next;
    }
    log::warn!(
        "min_variance did not converge in {} iterations; returning best iterate",
        opts.max_iters
    );
    let (risk, weights) = polish(sigma, best);
    Ok(MinVarPortfolio {
        risk,
        weights,
        converged: false,
        iterations: opts.max_iters,
    })
}

/// Replaces `x` by the exact optimum on its support when that is feasible
/// and no worse.
fn polish(sigma: &Matrix, (risk, x): (f64, Vec<f64>)) -> (f64, Vec<f64>) {
    match face_optimum(sigma, &x) {
        // the exact face optimum can lose to an iterate only by rounding
        Some((r, w)) if r <= risk + 1e-12 * risk.abs() => (r, w),
        _ => (risk, x),
    }
}

/// Every asset's marginal variance is at least the common value on the support.
fn is_kkt_point(sigma: &Matrix, w: &[f64]) -> bool {
    let g = mat_vec(sigma, w);
    let level = quad_form(w, sigma, w);
    let slack = 1e-9 * level.abs() + 1e-300;
    g.iter().zip(w).all(|(gi, wi)| if *wi > 0.0 { (gi - level).abs() <= slack } else { *gi >= level - slack })
}

/// Minimum variance over the face of the simplex spanned by the support of `x`,
/// or `None` when the equality-constrained solution leaves the simplex.
fn face_optimum(sigma: &Matrix, x: &[f64]) -> Option<(f64, Vec<f64>)> {
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    let k = support.len();
    // KKT system [S 1; 1' 0] [w; -mu] = [0; 1]
    let mut a = vec![vec![0.0; k + 2]; k + 1];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r][c] = sigma[i][j];
        }
        a[r][k] = 1.0;
        a[k][r] = 1.0;
    }
    a[k][k + 1] = 1.0;
    let sol = solve(a)?;
    if sol[..k].iter().any(|v| !(*v >= 0.0)) {
        return None;
    }
    let mut w = vec![0.0; x.len()];
    for (r, &i) in support.iter().enumerate() {
        w[i] = sol[r];
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Some((quad_form(&w, sigma, &w), w))
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..=n {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (a[row][n] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Coefficients of `risk(gamma) = a gamma^2 + b gamma + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Variance of the minimum-variance end (`gamma = 1`).
    pub floor: f64,
}

pub fn risk_quadratic(b: &[f64], b_m: &[f64], sigma: &Matrix) -> Result<RiskQuadratic> {
    check_inputs(sigma, &[b, b_m])?;
    let sb = mat_vec(sigma, b);
    let bb: f64 = b.iter().zip(&sb).map(|(x, y)| x * y).sum();
    let bm: f64 = b_m.iter().zip(&sb).map(|(x, y)| x * y).sum();
    let mm = quad_form(b_m, sigma, b_m);
    // A computed from the difference vector stays non-negative in floating point
    let diff: Vec<f64> = b.iter().zip(b_m).map(|(x, y)| x - y).collect();
    Ok(RiskQuadratic {
        a: quad_form(&diff, sigma, &diff),
        b: 2.0 * (bm - bb),
        c: bb,
        floor: mm,
    })
}

/// Root of the risk quadratic at level `sigma_g` and whether the target was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficient {
    pub gamma: f64,
    pub clamped: bool,
}

/// Solves `risk(gamma) = sigma_g` on `[0, 1]`.
///
/// Targets above the portfolio's own variance give `gamma = 0`, targets below
/// the minimum variance give `gamma = 1`; both are flagged as clamped.
pub fn interpolation_coeff(b: &[f64], b_m: &[f64], sigma: &Matrix, sigma_g: f64) -> Result<Coefficient> {
    if !sigma_g.is_finite() {
        return Err(Error::InvalidArgument(format!("risk target must be finite, got {sigma_g}")));
    }
    let q = risk_quadratic(b, b_m, sigma)?;
    let (top, floor) = (q.c, q.floor);
    if (top - floor).abs() <= 1e-15 * top.abs().max(floor.abs()).max(f64::MIN_POSITIVE) {
        if sigma_g == top {
            return Ok(Coefficient {
                gamma: 0.0,
                clamped: false,
            });
        }
        return Err(Error::Infeasible(format!(
            "portfolio already has minimum variance {top:e}; target {sigma_g:e} cannot be reached"
        )));
    }
    if sigma_g >= top {
        return Ok(Coefficient {
            gamma: 0.0,
            clamped: sigma_g > top,
        });
    }
    if sigma_g <= floor {
        return Ok(Coefficient {
            gamma: 1.0,
            clamped: sigma_g < floor,
        });
    }
    Ok(Coefficient {
        gamma: solve_root(&q, sigma_g).clamp(0.0, 1.0),
        clamped: false,
    })
}

/// Smaller root of `a g^2 + b g + (c - sigma_g) = 0` for a target strictly
/// inside `(floor, c)`.
fn solve_root(q: &RiskQuadratic, sigma_g: f64) -> f64 {
    let k = q.c - sigma_g;
    let mut gamma = if q.a <= QUADRATIC_EPS {
        -k / q.b
    } else {
        // (-b - sqrt(disc)) / (2a), rewritten to avoid cancellation when a is small
        let disc = (q.b * q.b - 4.0 * q.a * k).max(0.0);
        2.0 * k / (-q.b + disc.sqrt())
    };
    // one Newton polish on the quadratic
    let f = (q.a * gamma + q.b) * gamma + k;
    let df = 2.0 * q.a * gamma + q.b;
    if df != 0.0 {
        let refined = gamma - f / df;
        if refined.is_finite() && (0.0..=1.0).contains(&refined) {
            gamma = refined;
        }
    }
    gamma
}

/// `(1 - gamma) b + gamma b_m`.
pub fn interpolate(b: &[f64], b_m: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if b.len() != b_m.len() {
        return Err(Error::Shape(format!("{} vs {} weights", b.len(), b_m.len())));
    }
    Ok(b.iter()
        .zip(b_m)
        .map(|(x, y)| (1.0 - gamma) * x + gamma * y)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAdjustment {
    pub gamma: f64,
    pub weights: Vec<f64>,
    pub achieved_risk: f64,
    pub clamped: bool,
}

/// Interpolates `b` toward `b_m` so that its variance equals `sigma_g`.
pub fn adjust(b: &[f64], b_m: &[f64], sigma: &Matrix, sigma_g: f64) -> Result<RiskAdjustment> {
    let c = interpolation_coeff(b, b_m, sigma, sigma_g)?;
    let weights = interpolate(b, b_m, c.gamma)?;
    Ok(RiskAdjustment {
        gamma: c.gamma,
        achieved_risk: quad_form(&weights, sigma, &weights),
        weights,
        clamped: c.clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImproveOptions {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the predicted-return reward.
    pub return_weight: f64,
    /// Reward the raw product of predicted portfolio returns instead of the
    /// sum of `log(1 + b^T r_hat)`.
    pub literal_product: bool,
    /// Step halvings tried before a step is abandoned.
    pub max_halvings: usize,
}

impl Default for ImproveOptions {
    fn default() -> Self {
        ImproveOptions {
            steps: 30,
            lr: 0.05,
            return_weight: 1.0,
            literal_product: false,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImproveResult {
    pub logits: Vec<Vec<f64>>,
    pub adjustments: Vec<RiskAdjustment>,
    /// Total mixing weight at the start and after every accepted step.
    pub gamma_history: Vec<f64>,
    pub objective_history: Vec<f64>,
    pub accepted_steps: usize,
    pub warning: Option<String>,
}

/// Per-period state of the risk target at a given set of logits.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Regime {
    Interior,
    /// clamped or degenerate; the mixing weight does not depend on the logits
    Fixed(f64),
}

struct Evaluation {
    objective: f64,
    gamma_sum: f64,
    regimes: Vec<Regime>,
    min_discriminant: f64,
    grad: Option<Vec<Vec<f64>>>,
}

struct Problem<'a> {
    b_m: &'a [Vec<f64>],
    sigma: &'a [Matrix],
    sigma_g: f64,
    predicted: Option<&'a [Vec<f64>]>,
    opts: ImproveOptions,
}

impl Problem<'_> {
    fn regimes(&self, logits: &[Vec<f64>]) -> Result<Vec<Regime>> {
        logits
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let b = softmax(v);
                match interpolation_coeff(&b, &self.b_m[t], &self.sigma[t], self.sigma_g) {
                    Ok(c) if c.clamped || c.gamma == 0.0 || c.gamma == 1.0 => {
                        Ok(Regime::Fixed(c.gamma))
                    }
                    Ok(_) => Ok(Regime::Interior),
                    Err(Error::Infeasible(_)) => Ok(Regime::Fixed(0.0)),
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    /// Whether period `t` at `row` keeps a usable root and, if it was
    /// interior, stays interior.
    fn row_ok(&self, t: usize, row: &[f64], before: &Regime) -> bool {
        let b = softmax(row);
        let was_interior = matches!(before, Regime::Interior);
        match interpolation_coeff(&b, &self.b_m[t], &self.sigma[t], self.sigma_g) {
            Ok(c) if c.clamped || c.gamma == 0.0 || c.gamma == 1.0 => !was_interior,
            Ok(_) => match risk_quadratic(&b, &self.b_m[t], &self.sigma[t]) {
                Ok(q) => q.a <= QUADRATIC_EPS || q.b * q.b - 4.0 * q.a * (q.c - self.sigma_g) >= DISCRIMINANT_EPS,
                Err(_) => false,
            },
            Err(Error::Infeasible(_)) => !was_interior,
            Err(_) => false,
        }
    }

    /// Objective `sum_t gamma_t - zeta * reward` on a fresh tape, with gradient on request.
    fn evaluate(&self, logits: &[Vec<f64>], with_grad: bool) -> Result<Evaluation> {
        let regimes = self.regimes(logits)?;
        let n = logits[0].len();
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_rows(logits)?)?;
        let mut gammas = Vec::new();
        let mut fixed_sum = 0.0;
        let mut min_disc = f64::INFINITY;
        let mut rewards = Vec::new();
        let use_reward = self.predicted.is_some() && self.opts.return_weight != 0.0;

        for (t, regime) in regimes.iter().enumerate() {
            let row = tape.slice_rows(v, t, t + 1)?;
            let b = tape.softmax(row)?;
            if use_reward {
                let r_hat = self.predicted.expect("checked")[t].clone();
                let r_hat = tape.constant(Tensor::new(vec![1, n], r_hat)?)?;
                let pr = tape.mul(b, r_hat)?;
                let pr = tape.sum_last(pr)?;
                rewards.push(pr);
            }
            match regime {
                Regime::Fixed(g) => fixed_sum += g,
                Regime::Interior => {
                    let s = tape.constant(Tensor::from_rows(&self.sigma[t])?)?;
                    let bm = tape.constant(Tensor::new(vec![1, n], self.b_m[t].clone())?)?;
                    let floor = quad_form(&self.b_m[t], &self.sigma[t], &self.b_m[t]);
                    let sb = tape.matmul(b, s)?;
                    let q1 = tape.mul(sb, b)?;
                    let q1 = tape.sum_last(q1)?;
                    let q2 = tape.mul(sb, bm)?;
                    let q2 = tape.sum_last(q2)?;
                    // A = q1 - 2 q2 + floor, B = 2 (q2 - q1), K = q1 - sigma_g
                    let two_q2 = tape.scale(q2, 2.0)?;
                    let a = tape.sub(q1, two_q2)?;
                    let a = tape.shift(a, floor)?;
                    let bq = tape.sub(q2, q1)?;
                    let bq = tape.scale(bq, 2.0)?;
                    let k = tape.shift(q1, -self.sigma_g)?;
                    let neg_b = tape.neg(bq)?;
                    let a_val = tape.value(a).item();
                    let gamma = if a_val <= QUADRATIC_EPS {
                        tape.div(k, neg_b)?
                    } else {
                        let b2 = tape.mul(bq, bq)?;
                        let ak = tape.mul(a, k)?;
                        let ak4 = tape.scale(ak, 4.0)?;
                        let disc = tape.sub(b2, ak4)?;
                        let d = tape.value(disc).item();
                        min_disc = min_disc.min(d);
                        if d < DISCRIMINANT_EPS {
                            return Ok(Evaluation {
                                objective: f64::INFINITY,
                                gamma_sum: f64::INFINITY,
                                regimes,
                                min_discriminant: d,
                                grad: None,
                            });
                        }
                        let root = tape.sqrt(disc)?;
                        let den = tape.add(neg_b, root)?;
                        let num = tape.scale(k, 2.0)?;
                        tape.div(num, den)?
                    };
                    gammas.push(gamma);
                }
            }
        }

        let fixed = tape.constant(Tensor::scalar(fixed_sum))?;
        let mut loss = fixed;
        if !gammas.is_empty() {
            let g = tape.concat(&gammas)?;
            let g = tape.sum(g)?;
            loss = tape.add(g, fixed)?;
        }
        let gamma_sum = tape.value(loss).item();
        if use_reward {
            let pr = tape.concat(&rewards)?;
            let reward = if self.opts.literal_product {
                tape.prod(pr)?
            } else {
                let one_plus = tape.shift(pr, 1.0)?;
                let logs = tape.log(one_plus)?;
                tape.sum(logs)?
            };
            let weighted = tape.scale(reward, -self.opts.return_weight)?;
            loss = tape.add(loss, weighted)?;
        }
        let objective = tape.value(loss).item();
        let grad = if with_grad {
            let grads = tape.backward(loss)?;
            Some(grads.get(v).expect("param leaf").to_rows())
        } else {
            None
        };
        Ok(Evaluation {
            objective,
            gamma_sum,
            regimes,
            min_discriminant: min_disc,
            grad,
        })
    }
}

fn gamma_of(logits: &[Vec<f64>], p: &Problem<'_>) -> Result<Vec<RiskAdjustment>> {
    logits
        .iter()
        .enumerate()
        .map(|(t, v)| match adjust(&softmax(v), &p.b_m[t], &p.sigma[t], p.sigma_g) {
            Err(Error::Infeasible(_)) => {
                let b = softmax(v);
                Ok(RiskAdjustment {
                    gamma: 0.0,
                    achieved_risk: quad_form(&b, &p.sigma[t], &b),
                    weights: b,
                    clamped: true,
                })
            }
            other => other,
        })
        .collect()
}

/// Gradient descent on the logits that lowers the total mixing weight needed
/// to reach `sigma_g`, minus `return_weight` times the predicted-return reward.
///
/// Each period first halves its own step until it keeps a non-negative
/// discriminant and, if it was interior, stays interior; a period that cannot
/// is held still. The whole step is then halved until the objective does not
/// increase. If no step is ever accepted the initial logits are returned with
/// a warning.
pub fn improve(
    logits: &[Vec<f64>],
    b_m: &[Vec<f64>],
    sigma: &[Matrix],
    sigma_g: f64,
    predicted: Option<&[Vec<f64>]>,
    opts: ImproveOptions,
) -> Result<ImproveResult> {
    let t_len = logits.len();
    if t_len == 0 {
        return Err(Error::InvalidArgument("no periods to improve".into()));
    }
    if b_m.len() != t_len || sigma.len() != t_len || predicted.is_some_and(|p| p.len() != t_len) {
        return Err(Error::Shape("logits, b_m, covariances and predictions differ in length".into()));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("improvement lr must be > 0, got {}", opts.lr)));
    }
    let problem = Problem {
        b_m,
        sigma,
        sigma_g,
        predicted,
        opts,
    };

    let mut current = logits.to_vec();
    let mut eval = problem.evaluate(&current, opts.steps > 0)?;
    let mut gamma_history = vec![eval.gamma_sum];
    let mut objective_history = vec![eval.objective];
    let mut accepted = 0;
    let mut warning = None;

    for _ in 0..opts.steps {
        let grad = match eval.grad.take() {
            Some(g) => g,
            None => problem.evaluate(&current, true)?.grad.expect("requested"),
        };
        // each period backs off on its own until it stays interior, then the
        // whole step is halved until the objective does not increase
        let mut lr = vec![opts.lr; t_len];
        for t in 0..t_len {
            let mut halvings = 0;
            while !problem.row_ok(t, &step_row(&current[t], &grad[t], lr[t]), &eval.regimes[t]) {
                halvings += 1;
                lr[t] = if halvings > opts.max_halvings { 0.0 } else { lr[t] * 0.5 };
                if lr[t] == 0.0 {
                    break;
                }
            }
        }
        let mut next = None;
        for _ in 0..=opts.max_halvings {
            if lr.iter().zip(&grad).all(|(l, g)| *l == 0.0 || g.iter().all(|x| *x == 0.0)) {
                break;
            }
            let cand: Vec<Vec<f64>> = (0..t_len).map(|t| step_row(&current[t], &grad[t], lr[t])).collect();
            match problem.evaluate(&cand, true) {
                Ok(e) if e.min_discriminant >= DISCRIMINANT_EPS
                    && e.objective <= eval.objective
                    && !newly_fixed(&eval.regimes, &e.regimes) =>
                {
                    next = Some((cand, e));
                    break;
                }
                Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Domain { .. }) => lr.iter_mut().for_each(|l| *l *= 0.5),
                Err(e) => return Err(e),
            }
        }
        match next {
            Some((cand, e)) => {
                current = cand;
                eval = e;
                accepted += 1;
                gamma_history.push(eval.gamma_sum);
                objective_history.push(eval.objective);
            }
            None => {
                if accepted == 0 {
                    log::warn!("portfolio improvement rejected every step; keeping the initial portfolio");
                    warning = Some("all improvement steps rejected; initial portfolio kept".into());
                }
                break;
            }
        }
    }

    let adjustments = gamma_of(&current, &problem)?;
    Ok(ImproveResult {
        logits: current,
        adjustments,
        gamma_history,
        objective_history,
        accepted_steps: accepted,
        warning,
    })
}

fn step_row(v: &[f64], g: &[f64], lr: f64) -> Vec<f64> {
    v.iter().zip(g).map(|(a, b)| a - lr * b).collect()
}

fn newly_fixed(before: &[Regime], after: &[Regime]) -> bool {
    before
        .iter()
        .zip(after)
        .any(|(b, a)| matches!(b, Regime::Interior) && matches!(a, Regime::Fixed(_)))
}

/// Risk-adjusts every period of a portfolio stream at one target level.
pub fn adjust_series(
    weights: &[Vec<f64>],
    b_m: &[Vec<f64>],
    sigma: &[Matrix],
    sigma_g: f64,
) -> Result<Vec<RiskAdjustment>> {
    if weights.len() != b_m.len() || weights.len() != sigma.len() {
        return Err(Error::Shape("weights, b_m and covariances differ in length".into()));
    }
    weights
        .iter()
        .zip(b_m)
        .zip(sigma)
        .map(|((b, m), s)| match adjust(b, m, s, sigma_g) {
            Err(Error::Infeasible(_)) => Ok(RiskAdjustment {
                gamma: 0.0,
                achieved_risk: quad_form(b, s, b),
                weights: b.clone(),
                clamped: true,
            }),
            other => other,
        })
        .collect()
}
