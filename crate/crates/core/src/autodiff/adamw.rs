use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&betas.0) || !(0.0..1.0).contains(&betas.1) {
            return Err(Error::InvalidArgument(format!("betas must lie in [0, 1), got {betas:?}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `decay[k]` selects which parameters receive weight decay.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], decay: &[bool]) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() {
            return Err(Error::Shape("params, grads and decay mask differ in length".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameter count".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[k].len() != p.len() {
                return Err(Error::Shape(format!("gradient {k} shape mismatch")));
            }
            let wd = if decay[k] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv -= self.lr * wd * *pv;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
