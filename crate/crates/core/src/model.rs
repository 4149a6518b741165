//! Spatio-temporal asset scorer.
//!
//! A shared one-layer LSTM encodes each asset's indicator window into `h_i`.
//! Assets are then mixed per period:
//!
//! ```text
//! h'_i = 1/(beta+1) * sum_k alpha_k h_k + beta/(beta+1) * sum_k c_ik h_k
//! alpha = softmax_k(w . h_k)
//! ```
//!
//! where `c` is the correlation (or covariance) matrix of trailing returns and
//! `beta = softplus(beta_raw)`. The attention weights `alpha` do not depend on
//! the query asset `i`, so the first term is a pooled context shared by all
//! assets. Two MLP heads with the same shape map `h'_i` to a portfolio logit
//! and a return forecast; portfolio weights are the softmax of the logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::covariance::{correlation, Matrix};
use crate::error::{Error, Result};
use crate::indicators::N_FEATURES;

/// How the per-period asset-mixing matrix is derived from the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    #[default]
    Correlation,
    Covariance,
}

impl Mixing {
    pub fn matrix(self, sigma: &Matrix) -> Matrix {
        match self {
            Mixing::Correlation => correlation(sigma),
            Mixing::Covariance => sigma.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub window: usize,
    pub mixing: Mixing,
}

/// Parameter names, in store order.
pub mod names {
    pub const W_IH: &str = "lstm.w_ih";
    pub const W_HH: &str = "lstm.w_hh";
    pub const LSTM_BIAS: &str = "lstm.bias";
    pub const ATTN_W: &str = "attn.w";
    pub const BETA_RAW: &str = "attn.beta_raw";
    pub const P_W1: &str = "mlp_p.w1";
    pub const P_B1: &str = "mlp_p.b1";
    pub const P_W2: &str = "mlp_p.w2";
    pub const P_B2: &str = "mlp_p.b2";
    pub const R_W1: &str = "mlp_r.w1";
    pub const R_B1: &str = "mlp_r.b1";
    pub const R_W2: &str = "mlp_r.w2";
    pub const R_B2: &str = "mlp_r.b2";

    pub const ALL: [&str; 13] = [
        W_IH, W_HH, LSTM_BIAS, ATTN_W, BETA_RAW, P_W1, P_B1, P_W2, P_B2, R_W1, R_B1, R_W2, R_B2,
    ];
}

/// `softplus^-1(1)`, so that beta starts at 1.
pub const BETA_RAW_INIT: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Inputs for `T` periods of `N` assets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub t_len: usize,
    pub n_assets: usize,
    pub window: usize,
    /// `[window * T * N, 8]`, step-major: row `s * T * N + t * N + i`.
    pub inputs: Tensor,
    /// `[T, N, N]`
    pub mixing: Tensor,
}

impl Batch {
    /// `windows[t][i]` is the `window x 8` feature block of asset `i` at period `t`.
    pub fn new(windows: &[Vec<&[[f64; N_FEATURES]]>], mixing: &[Matrix]) -> Result<Batch> {
        let t_len = windows.len();
        if t_len == 0 || mixing.len() != t_len {
            return Err(Error::Shape(format!(
                "{t_len} periods of windows against {} mixing matrices",
                mixing.len()
            )));
        }
        let n = windows[0].len();
        let w = windows[0].first().map_or(0, |x| x.len());
        if n == 0 || w == 0 {
            return Err(Error::Shape("empty asset set or window".into()));
        }
        let rows = t_len * n;
        let mut inputs = vec![0.0; w * rows * N_FEATURES];
        for (t, per_asset) in windows.iter().enumerate() {
            if per_asset.len() != n {
                return Err(Error::Shape(format!("period {t} has {} assets, expected {n}", per_asset.len())));
            }
            for (i, win) in per_asset.iter().enumerate() {
                if win.len() != w {
                    return Err(Error::Shape(format!("window of length {} expected {w}", win.len())));
                }
                for (s, feat) in win.iter().enumerate() {
                    if feat.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("feature window"));
                    }
                    let off = ((s * rows) + t * n + i) * N_FEATURES;
                    inputs[off..off + N_FEATURES].copy_from_slice(feat);
                }
            }
        }
        let mut mix = Vec::with_capacity(t_len * n * n);
        for m in mixing {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::Shape(format!("mixing matrix is not {n}x{n}")));
            }
            mix.extend(m.iter().flatten());
        }
        Ok(Batch {
            t_len,
            n_assets: n,
            window: w,
            inputs: Tensor::new(vec![w * rows, N_FEATURES], inputs)?,
            mixing: Tensor::new(vec![t_len, n, n], mix)?,
        })
    }
}

/// Model parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape handles given in [`names::ALL`] order.
    pub fn from_vars(vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != names::ALL.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter handles, got {}",
                names::ALL.len(),
                vars.len()
            )));
        }
        Ok(Bound { vars })
    }

    pub fn get(&self, name: &str) -> Var {
        let k = names::ALL.iter().position(|n| *n == name).expect("known parameter");
        self.vars[k]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles of the forward outputs, each `[T, N]`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub weights: Var,
    pub predicted: Var,
}

/// Plain-value forward outputs, `[t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
}

impl Model {
    /// Random initialization: uniform(-1/sqrt(d), 1/sqrt(d)) for every matrix
    /// and bias, forget-gate bias +1, beta = 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        let d = config.hidden;
        if d == 0 || config.window == 0 {
            return Err(Error::InvalidArgument("hidden size and window must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |shape: &[usize]| -> Tensor {
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let mut params = ParamStore::new();
        params.insert(names::W_IH, uniform(&[N_FEATURES, 4 * d]));
        params.insert(names::W_HH, uniform(&[d, 4 * d]));
        let mut bias = uniform(&[4 * d]);
        bias.data_mut()[d..2 * d].iter_mut().for_each(|b| *b += 1.0);
        params.insert(names::LSTM_BIAS, bias);
        params.insert(names::ATTN_W, uniform(&[d, 1]));
        params.insert(names::BETA_RAW, Tensor::scalar(BETA_RAW_INIT));
        for (w1, b1, w2, b2) in [
            (names::P_W1, names::P_B1, names::P_W2, names::P_B2),
            (names::R_W1, names::R_B1, names::R_W2, names::R_B2),
        ] {
            params.insert(w1, uniform(&[d, d]));
            params.insert(b1, uniform(&[d]));
            params.insert(w2, uniform(&[d, 1]));
            params.insert(b2, uniform(&[1]));
        }
        Ok(Model { config, params })
    }

    /// Rebuilds a model from a parameter store, inferring the hidden size.
    pub fn from_params(params: &ParamStore, window: usize, mixing: Mixing) -> Result<Model> {
        let mut store = ParamStore::new();
        for name in names::ALL {
            store.insert(name, params.require(name)?.clone());
        }
        let d = store.require(names::W_HH)?.shape()[0];
        let expected: [(&str, Vec<usize>); 13] = [
            (names::W_IH, vec![N_FEATURES, 4 * d]),
            (names::W_HH, vec![d, 4 * d]),
            (names::LSTM_BIAS, vec![4 * d]),
            (names::ATTN_W, vec![d, 1]),
            (names::BETA_RAW, vec![1]),
            (names::P_W1, vec![d, d]),
            (names::P_B1, vec![d]),
            (names::P_W2, vec![d, 1]),
            (names::P_B2, vec![1]),
            (names::R_W1, vec![d, d]),
            (names::R_B1, vec![d]),
            (names::R_W2, vec![d, 1]),
            (names::R_B2, vec![1]),
        ];
        for (name, shape) in expected {
            if store.require(name)?.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("parameter `{name}` should be {shape:?}")));
            }
        }
        Ok(Model {
            config: ModelConfig {
                hidden: d,
                window,
                mixing,
            },
            params: store,
        })
    }

    pub fn beta(&self) -> f64 {
        let raw = self.params.get(names::BETA_RAW).expect("beta").item();
        raw.max(0.0) + (-raw.abs()).exp().ln_1p()
    }

    /// Places the parameters on the tape; `trainable = false` freezes them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = names::ALL
            .iter()
            .map(|name| {
                let t = self.params.require(name)?.clone();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Final LSTM hidden state per (period, asset) row: `[T * N, d]`.
    pub fn encode_temporal(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<Var> {
        let d = self.config.hidden;
        let rows = batch.t_len * batch.n_assets;
        let x = tape.constant(batch.inputs.clone())?;
        let xw = tape.matmul(x, p.get(names::W_IH))?;
        let xw = tape.add_row(xw, p.get(names::LSTM_BIAS))?;
        let mut state: Option<(Var, Var)> = None;
        for s in 0..batch.window {
            let mut z = tape.slice_rows(xw, s * rows, (s + 1) * rows)?;
            if let Some((h, _)) = state {
                let hh = tape.matmul(h, p.get(names::W_HH))?;
                z = tape.add(z, hh)?;
            }
            let i = tape.slice_cols(z, 0, d)?;
            let i = tape.sigmoid(i)?;
            let g = tape.slice_cols(z, 2 * d, 3 * d)?;
            let g = tape.tanh(g)?;
            let o = tape.slice_cols(z, 3 * d, 4 * d)?;
            let o = tape.sigmoid(o)?;
            let ig = tape.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = tape.slice_cols(z, d, 2 * d)?;
                    let f = tape.sigmoid(f)?;
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            state = Some((h, c));
        }
        Ok(state.expect("window >= 1").0)
    }

    /// Attention pooling plus matrix mixing across assets, `[T * N, d] -> [T * N, d]`.
    pub fn encode_spatial(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        mixing: Var,
        t_len: usize,
        n: usize,
    ) -> Result<Var> {
        let d = self.config.hidden;
        if tape.shape(h) != [t_len * n, d] || tape.shape(mixing) != [t_len, n, n] {
            return Err(Error::Shape(format!(
                "encode_spatial: hidden {:?}, mixing {:?} for T={t_len}, N={n}, d={d}",
                tape.shape(h),
                tape.shape(mixing)
            )));
        }
        let scores = tape.matmul(h, p.get(names::ATTN_W))?;
        let scores = tape.reshape(scores, &[t_len, n])?;
        let alpha = tape.softmax(scores)?;
        let alpha = tape.reshape(alpha, &[t_len, 1, n])?;
        let h3 = tape.reshape(h, &[t_len, n, d])?;
        let pooled = tape.bmm(alpha, h3)?;
        let pooled = tape.reshape(pooled, &[t_len, d])?;
        let pooled = tape.repeat_rows(pooled, n)?;
        let mixed = tape.bmm(mixing, h3)?;
        let mixed = tape.reshape(mixed, &[t_len * n, d])?;

        let beta = tape.softplus(p.get(names::BETA_RAW))?;
        let one = tape.constant(Tensor::scalar(1.0))?;
        let denom = tape.add(beta, one)?;
        let w_pool = tape.div(one, denom)?;
        let w_mix = tape.div(beta, denom)?;
        let a = tape.mul_scalar(pooled, w_pool)?;
        let b = tape.mul_scalar(mixed, w_mix)?;
        tape.add(a, b)
    }

    fn mlp(&self, tape: &mut Tape, p: &Bound, x: Var, head: [&str; 4]) -> Result<Var> {
        let z = tape.matmul(x, p.get(head[0]))?;
        let z = tape.add_row(z, p.get(head[1]))?;
        let z = tape.relu(z)?;
        let z = tape.matmul(z, p.get(head[2]))?;
        tape.add_row(z, p.get(head[3]))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<ForwardVars> {
        if batch.window != self.config.window {
            return Err(Error::Shape(format!(
                "batch window {} differs from model window {}",
                batch.window, self.config.window
            )));
        }
        let (t_len, n) = (batch.t_len, batch.n_assets);
        let h = self.encode_temporal(tape, p, batch)?;
        let mixing = tape.constant(batch.mixing.clone())?;
        let hs = self.encode_spatial(tape, p, h, mixing, t_len, n)?;
        let v = self.mlp(tape, p, hs, [names::P_W1, names::P_B1, names::P_W2, names::P_B2])?;
        let logits = tape.reshape(v, &[t_len, n])?;
        let weights = tape.softmax(logits)?;
        let r = self.mlp(tape, p, hs, [names::R_W1, names::R_B1, names::R_W2, names::R_B2])?;
        let predicted = tape.reshape(r, &[t_len, n])?;
        Ok(ForwardVars {
            logits,
            weights,
            predicted,
        })
    }

    /// Forward pass with frozen parameters.
    pub fn predict(&self, batch: &Batch) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &p, batch)?;
        Ok(ModelOutput {
            logits: tape.value(out.logits).to_rows(),
            weights: tape.value(out.weights).to_rows(),
            predicted: tape.value(out.predicted).to_rows(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(d: usize, w: usize) -> ModelConfig {
        ModelConfig {
            hidden: d,
            window: w,
            mixing: Mixing::Correlation,
        }
    }

    #[test]
    fn beta_starts_at_one() {
        let m = Model::init(config(4, 3), 1).unwrap();
        assert!((m.beta() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_parameters_give_zero_hidden_state() {
        let mut m = Model::init(config(4, 3), 1).unwrap();
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let win = vec![[0.7; N_FEATURES]; 3];
        let batch = Batch::new(&[vec![&win[..], &win[..]]], &[vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false).unwrap();
        let h = m.encode_temporal(&mut tape, &p, &batch).unwrap();
        assert!(tape.value(h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nan_features_are_rejected() {
        let win = vec![[f64::NAN; N_FEATURES]; 2];
        let r = Batch::new(&[vec![&win[..]]], &[vec![vec![1.0]]]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn weights_sum_to_one() {
        let m = Model::init(config(6, 4), 3).unwrap();
        let wins: Vec<Vec<[f64; N_FEATURES]>> = (0..3)
            .map(|i| (0..4).map(|s| [0.1 * (i + s) as f64; N_FEATURES]).collect())
            .collect();
        let per_t: Vec<&[[f64; N_FEATURES]]> = wins.iter().map(|w| &w[..]).collect();
        let eye: Matrix = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        let batch = Batch::new(&[per_t.clone(), per_t], &[eye.clone(), eye]).unwrap();
        let out = m.predict(&batch).unwrap();
        for row in &out.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|w| *w > 0.0 && *w < 1.0));
        }
    }
}
