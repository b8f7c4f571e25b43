#![allow(dead_code)]

use distill_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

/// Deterministic proptest settings: fixed RNG seed, no persistence files.
pub fn fixed_config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed_d157),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Tensors of a fixed shape with entries in [-2, 2].
pub fn tensor_strategy(shape: &[usize]) -> impl Strategy<Value = Tensor> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    proptest::collection::vec(-2.0f64..2.0, n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
}

/// Max relative error between backward and central differences over every
/// input element. Error is `|a - n| / max(|a|, |n|, 1e-6)`, so gradients that
/// are both essentially zero compare absolutely.
pub fn fd_check(inputs: &[Tensor], step: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    fd_check_sampled(inputs, step, usize::MAX, f)
}

/// Like [`fd_check`], probing at most `per_tensor` evenly spaced entries of
/// each input (all of them when the tensor is smaller).
pub fn fd_check_sampled(
    inputs: &[Tensor],
    step: f64,
    per_tensor: usize,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(&x.clone().with_requires_grad(true))).collect();
        let loss = f(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        let n = x.numel();
        let stride = n.div_ceil(per_tensor.min(n).max(1));
        for i in (0..n).step_by(stride.max(1)) {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += delta;
                let (t, _, l) = eval(&xs);
                t.value(l)[0]
            };
            let numeric = (shifted(step) - shifted(-step)) / (2.0 * step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
