use portfolio_core::autodiff::{check_gradients, AdamW, ParamStore, Tape, Tensor, Var};
use portfolio_core::{Error, Result};
use proptest::prelude::*;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
const PRIMITIVE_TOL: f64 = 1e-5;

/// Values bounded away from zero so kinks (relu, abs) are never straddled.
fn away_from_zero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.05f64..2.0, any::<bool>()), len)
        .prop_map(|v| v.into_iter().map(|(x, neg)| if neg { -x } else { x }).collect())
}

fn positive(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2f64..3.0, len)
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` with a fixed weighting, so every output element matters.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|k| 0.3 + 0.17 * ((k * 7) % 5) as f64).collect();
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), w)?)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let r = check_gradients(inputs, H, FLOOR, |tape, v| {
        let out = f(tape, v)?;
        weighted_sum(tape, out)
    })
    .unwrap();
    r.max_rel_error
}

macro_rules! unary_case {
    ($name:ident, $gen:expr, $op:ident) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn $name(x in $gen) {
                let err = check(&[t(&[2, 3], x)], |tape, v| tape.$op(v[0]));
                prop_assert!(err <= PRIMITIVE_TOL, "rel error {err}");
            }
        }
    };
}

unary_case!(grad_relu, away_from_zero(6), relu);
unary_case!(grad_abs, away_from_zero(6), abs);
unary_case!(grad_exp, away_from_zero(6), exp);
unary_case!(grad_log, positive(6), log);
unary_case!(grad_sqrt, positive(6), sqrt);
unary_case!(grad_sigmoid, away_from_zero(6), sigmoid);
unary_case!(grad_tanh, away_from_zero(6), tanh);
unary_case!(grad_softplus, away_from_zero(6), softplus);
unary_case!(grad_softmax, away_from_zero(6), softmax);
unary_case!(grad_sum_last, away_from_zero(6), sum_last);
unary_case!(grad_pairwise_diff, away_from_zero(6), pairwise_diff);
unary_case!(grad_neg, away_from_zero(6), neg);

macro_rules! binary_case {
    ($name:ident, $ga:expr, $gb:expr, $op:ident) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn $name(a in $ga, b in $gb) {
                let err = check(&[t(&[2, 3], a), t(&[2, 3], b)], |tape, v| tape.$op(v[0], v[1]));
                prop_assert!(err <= PRIMITIVE_TOL, "rel error {err}");
            }
        }
    };
}

binary_case!(grad_add, away_from_zero(6), away_from_zero(6), add);
binary_case!(grad_sub, away_from_zero(6), away_from_zero(6), sub);
binary_case!(grad_mul, away_from_zero(6), away_from_zero(6), mul);
binary_case!(grad_div, away_from_zero(6), positive(6), div);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_scalar_reductions(x in away_from_zero(5)) {
        let inputs = [t(&[5], x)];
        for f in [
            |tape: &mut Tape, v: &[Var]| tape.sum(v[0]),
            |tape: &mut Tape, v: &[Var]| tape.mean(v[0]),
            |tape: &mut Tape, v: &[Var]| tape.std(v[0]),
            |tape: &mut Tape, v: &[Var]| tape.prod(v[0]),
        ] {
            let err = check(&inputs, f);
            prop_assert!(err <= PRIMITIVE_TOL, "rel error {err}");
        }
    }

    #[test]
    fn grad_matmul_and_bmm(a in away_from_zero(12), b in away_from_zero(12)) {
        let err = check(&[t(&[3, 4], a.clone()), t(&[4, 3], b.clone())], |tape, v| tape.matmul(v[0], v[1]));
        prop_assert!(err <= PRIMITIVE_TOL, "matmul rel error {err}");
        let err = check(&[t(&[2, 3, 2], a), t(&[2, 2, 3], b)], |tape, v| tape.bmm(v[0], v[1]));
        prop_assert!(err <= PRIMITIVE_TOL, "bmm rel error {err}");
    }

    #[test]
    fn grad_broadcasting_ops(a in away_from_zero(6), row in away_from_zero(3), s in away_from_zero(1)) {
        let inputs = [t(&[2, 3], a), t(&[3], row), t(&[1], s)];
        for f in [
            |tape: &mut Tape, v: &[Var]| tape.add_row(v[0], v[1]),
            |tape: &mut Tape, v: &[Var]| tape.mul_scalar(v[0], v[2]),
            |tape: &mut Tape, v: &[Var]| tape.add_scalar(v[0], v[2]),
            |tape: &mut Tape, v: &[Var]| tape.scale(v[0], -1.7),
            |tape: &mut Tape, v: &[Var]| tape.shift(v[0], 0.4),
        ] {
            let err = check(&inputs, f);
            prop_assert!(err <= PRIMITIVE_TOL, "rel error {err}");
        }
    }

    #[test]
    fn grad_shape_ops(a in away_from_zero(12), b in away_from_zero(4)) {
        let inputs = [t(&[4, 3], a), t(&[1, 4], b)];
        for f in [
            |tape: &mut Tape, v: &[Var]| tape.reshape(v[0], &[2, 6]),
            |tape: &mut Tape, v: &[Var]| tape.slice_rows(v[0], 1, 3),
            |tape: &mut Tape, v: &[Var]| tape.slice_cols(v[0], 1, 3),
            |tape: &mut Tape, v: &[Var]| tape.repeat_rows(v[0], 3),
            |tape: &mut Tape, v: &[Var]| {
                let r = tape.reshape(v[0], &[3, 4])?;
                tape.concat(&[r, v[1], r])
            },
        ] {
            let err = check(&inputs, f);
            prop_assert!(err <= PRIMITIVE_TOL, "rel error {err}");
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[3, 4], x)).unwrap();
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).to_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0));
        }
    }
}

#[test]
fn square_derivative_at_three() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn mean_softmax_of_linear_map() {
    let w = t(&[3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.8]);
    let x = t(&[2, 1], vec![1.5, -0.7]);
    let r = check_gradients(&[w, x], 1e-5, FLOOR, |tape, v| {
        let z = tape.matmul(v[0], v[1])?;
        let z = tape.reshape(z, &[1, 3])?;
        let s = tape.softmax(z)?;
        tape.mean(s)
    })
    .unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

#[test]
fn sum_of_parameters_has_unit_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(t(&[2, 2], vec![1.0, -2.0, 3.0, 0.5])).unwrap();
    let q = tape.param(t(&[3], vec![1.0, 2.0, 3.0])).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);
    assert_eq!(g.get(q).unwrap().data(), &[0.0; 3], "disconnected parameter");
}

#[test]
fn backward_twice_and_non_scalar_loss_are_errors() {
    let mut tape = Tape::new();
    let p = tape.param(t(&[2], vec![1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(p), Err(Error::Shape(_))));
    let l = tape.sum(p).unwrap();
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
    tape.reset();
    assert!(tape.backward(l).is_ok());
}

#[test]
fn domain_and_shape_errors() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[2], vec![0.0, 1.0])).unwrap();
    let n = tape.constant(t(&[2], vec![-1.0, 1.0])).unwrap();
    assert!(tape.log(z).is_err());
    assert!(tape.sqrt(n).is_err());
    assert!(tape.sqrt(z).is_ok());
    let m = tape.constant(t(&[3], vec![1.0; 3])).unwrap();
    assert!(matches!(tape.add(z, m), Err(Error::Shape(_))));
    let big = tape.constant(Tensor::scalar(800.0)).unwrap();
    assert!(matches!(tape.exp(big), Err(Error::NonFinite(_))));
    assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn sqrt_at_zero_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], vec![0.0, 4.0])).unwrap();
    let s = tape.sqrt(x).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.25]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], vec![-1.0, 0.0, 2.0])).unwrap();
    let r = tape.relu(x).unwrap();
    let l = tape.sum(r).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], vec![0.1, -0.4, 0.9, 1.3, -0.2, 0.05])).unwrap();
        let b = tape.param(t(&[3, 2], vec![0.7, 0.2, -0.3, 0.8, 0.6, -1.1])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let c = tape.tanh(c).unwrap();
        let s = tape.softmax(c).unwrap();
        let l = tape.std(s).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
    };
    let (x, y) = (run(), run());
    assert_eq!(x.0.to_bits(), y.0.to_bits());
    assert_eq!(x.1, y.1);
    assert_eq!(x.2, y.2);
}

#[test]
fn adamw_examples() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.0).unwrap();
    opt.step(&mut p, &[Tensor::scalar(0.0)], &[true]).unwrap();
    assert_eq!(p[0].item(), 1.0);

    let mut p = vec![Tensor::scalar(1.0)];
    let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.0).unwrap();
    opt.step(&mut p, &[Tensor::scalar(1.0)], &[true]).unwrap();
    assert!((p[0].item() - 0.9).abs() < 1e-6);
    assert_eq!(opt.steps_taken(), 1);

    let mut p = vec![Tensor::scalar(2.0)];
    let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.5).unwrap();
    opt.step(&mut p, &[Tensor::scalar(0.0)], &[true]).unwrap();
    assert!((p[0].item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);

    assert!(AdamW::new(0.0, (0.9, 0.999), 0.0).is_err());
    assert!(AdamW::new(-1.0, (0.9, 0.999), 0.0).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut store = ParamStore::new();
    store.insert("a", t(&[2, 2], vec![0.1, 1.0 / 3.0, -2.5e-17, 1e300]));
    store.insert("b", Tensor::scalar(std::f64::consts::PI));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    store.save(&path).unwrap();
    let back = ParamStore::load(&path).unwrap();
    assert_eq!(back, store);
    let again = dir.path().join("again.json");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
