//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` with central
/// differences of step `h`. `floor` keeps near-zero gradients from dividing
/// round-off noise by zero.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = xs.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("parameter leaf").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let n = (up - down) / (2.0 * h);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = err.max(out.max_rel_error);
                out.worst = Some((i, k, a, n));
            }
        }
    }
    Ok(out)
}
