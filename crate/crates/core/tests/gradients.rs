//! Analytic gradients against central finite differences.

mod common;

use common::{fd_check, fd_check_sampled, fixed_config, tensor_strategy};
use distill_core::autograd::Conv2dGeometry;
use distill_core::nn::{preset, Activation, LayerSpec, ModelSpec};
use distill_core::objectives::{cross_entropy, kd_loss, total_loss, DistillConfig, KlDirection};
use distill_core::{Model, Tape, Tensor};
use proptest::prelude::*;

const STEP: f64 = 1e-5;

fn sum_of(tape: &mut Tape, v: distill_core::Var) -> distill_core::Var {
    tape.sum(v).unwrap()
}

/// Weighted sum so that every output element carries a distinct cotangent.
fn weighted(tape: &mut Tape, v: distill_core::Var) -> distill_core::Var {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap();
    let w = tape.constant(&w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(&Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    let a = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = tape.constant(&Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
    let err = tape.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

#[test]
fn elementwise_trivia() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    let z = tape.constant(&Tensor::zeros(&[3]));
    let s = tape.add(x, z).unwrap();
    assert_eq!(tape.value(s), tape.value(x));
    let bad = tape.constant(&Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap());
    match tape.log(bad) {
        Err(distill_core::Error::Domain { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected a domain error, got {other:?}"),
    }
}

#[test]
fn backward_trivia() {
    let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -4.0]).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let s = tape.sum(v).unwrap();
    assert!(tape.backward(s).unwrap().get(v).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    assert_eq!(tape.backward(half).unwrap().get(v).unwrap(), w.data());

    // Non-scalar losses and foreign variables are rejected.
    assert!(tape.backward(v).is_err());
    let other = Tape::new().leaf(&Tensor::scalar(1.0));
    assert!(tape.backward(other).is_err());
}

proptest! {
    #![proptest_config(fixed_config(24))]

    #[test]
    fn matmul_gradients(a in tensor_strategy(&[3, 4]), b in tensor_strategy(&[4, 2])) {
        let err = fd_check(&[a, b], STEP, |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            weighted(t, c)
        });
        prop_assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn pointwise_gradients(a in tensor_strategy(&[2, 5]), b in tensor_strategy(&[2, 5])) {
        for op in 0..7 {
            let err = fd_check(&[a.clone(), b.clone()], STEP, |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1]).unwrap(),
                    1 => t.sub(v[0], v[1]).unwrap(),
                    2 => t.mul(v[0], v[1]).unwrap(),
                    3 => t.scale(v[0], -1.7).unwrap(),
                    4 => t.relu(v[0]).unwrap(),
                    5 => t.gelu(v[0]).unwrap(),
                    _ => t.exp(v[0]).unwrap(),
                };
                weighted(t, y)
            });
            prop_assert!(err < 1e-5, "op {op}: max rel err {err}");
        }
    }

    #[test]
    fn exp_log_round_trip(a in tensor_strategy(&[3, 3])) {
        let err = fd_check(&[a], STEP, |t, v| {
            let e = t.exp(v[0]).unwrap();
            let l = t.log(e).unwrap();
            let sq = t.mul(l, e).unwrap();
            weighted(t, sq)
        });
        prop_assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn log_of_positive_input(a in tensor_strategy(&[4])) {
        let pos = Tensor::new(vec![4], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        let err = fd_check(&[pos], STEP, |t, v| {
            let l = t.log(v[0]).unwrap();
            weighted(t, l)
        });
        prop_assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn reductions_bias_and_reshape(x in tensor_strategy(&[3, 4]), b in tensor_strategy(&[4])) {
        let err = fd_check(&[x, b], STEP, |t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            let r = t.reshape(y, vec![4, 3]).unwrap();
            let m = t.mean(r).unwrap();
            let w = weighted(t, r);
            let s = t.add(m, w).unwrap();
            sum_of(t, s)
        });
        prop_assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn conv_and_pool_gradients(
        x in tensor_strategy(&[2, 2, 5, 5]),
        w in tensor_strategy(&[3, 2, 3, 3]),
        b in tensor_strategy(&[3]),
    ) {
        for (stride, padding) in [(1, 1), (2, 0), (1, 0)] {
            let err = fd_check(&[x.clone(), w.clone(), b.clone()], STEP, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], Conv2dGeometry { stride, padding }).unwrap();
                let k = if tape_side(t, y) >= 2 { 2 } else { 1 };
                let p = t.mean_pool(y, k, k).unwrap();
                weighted(t, p)
            });
            prop_assert!(err < 1e-5, "stride {stride} padding {padding}: max rel err {err}");
        }
    }

    #[test]
    fn softmax_gradients(x in tensor_strategy(&[3, 5]), temp in 0.5f64..4.0) {
        let err = fd_check(std::slice::from_ref(&x), STEP, |t, v| {
            let p = t.softmax(v[0], temp).unwrap();
            weighted(t, p)
        });
        prop_assert!(err < 1e-4, "softmax: max rel err {err}");
        let err = fd_check(&[x], STEP, |t, v| {
            let p = t.log_softmax(v[0], temp).unwrap();
            weighted(t, p)
        });
        prop_assert!(err < 1e-4, "log_softmax: max rel err {err}");
    }

    #[test]
    fn loss_gradients(
        z in tensor_strategy(&[4, 5]),
        teacher in tensor_strategy(&[4, 5]),
        labels in proptest::collection::vec(0usize..5, 4),
        temp in 0.5f64..5.0,
        alpha in 0.0f64..1.0,
    ) {
        let err = fd_check(std::slice::from_ref(&z), STEP, |t, v| cross_entropy(t, v[0], &labels).unwrap());
        prop_assert!(err < 1e-4, "cross-entropy: {err}");
        for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
            let err = fd_check(std::slice::from_ref(&z), STEP, |t, v| kd_loss(t, v[0], &teacher, temp, dir).unwrap());
            prop_assert!(err < 1e-4, "kd {dir:?}: {err}");
            let cfg = DistillConfig { temperature: temp, alpha, kl_direction: dir };
            let err = fd_check(std::slice::from_ref(&z), STEP, |t, v| {
                total_loss(t, v[0], Some(&teacher), &labels, &cfg).unwrap()
            });
            prop_assert!(err < 1e-4, "total {dir:?}: {err}");
        }
    }

    #[test]
    fn backward_is_linear(
        x in tensor_strategy(&[3, 4]),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let grad = |f: &dyn Fn(&mut Tape, distill_core::Var) -> distill_core::Var| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x.clone().with_requires_grad(true));
            let loss = f(&mut tape, v);
            tape.backward(loss).unwrap().get(v).unwrap().to_vec()
        };
        let l1 = |t: &mut Tape, v| {
            let e = t.exp(v).unwrap();
            t.sum(e).unwrap()
        };
        let l2 = |t: &mut Tape, v| {
            let p = t.log_softmax(v, 1.5).unwrap();
            weighted(t, p)
        };
        let g1 = grad(&l1);
        let g2 = grad(&l2);
        let g = grad(&|t: &mut Tape, v| {
            let x1 = l1(t, v);
            let x2 = l2(t, v);
            let s1 = t.scale(x1, a).unwrap();
            let s2 = t.scale(x2, b).unwrap();
            t.add(s1, s2).unwrap()
        });
        for i in 0..g.len() {
            prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }
}

fn tape_side(t: &Tape, v: distill_core::Var) -> usize {
    t.shape(v)[3]
}

/// Every parameter of a model, through the full forward pass and the blended
/// loss, against finite differences.
fn model_fd(spec: &ModelSpec, input: &Tensor, labels: &[usize], seed: u64) -> f64 {
    let model = Model::init_truncated_normal(spec, 0.5, seed).unwrap();
    let teacher = Model::init_truncated_normal(spec, 0.5, seed + 100).unwrap().forward(input).unwrap();
    let cfg = DistillConfig::default();
    let named = model.named_tensors();
    let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    fd_check_sampled(&tensors, 1e-5, 25, |tape, vars| {
        let bound = distill_core::nn::Bound::from_vars(vars.to_vec());
        let x = tape.constant(input);
        let logits = model.forward_on(tape, &bound, x).unwrap();
        total_loss(tape, logits, Some(&teacher), labels, &cfg).unwrap()
    })
}

#[test]
fn every_preset_matches_finite_differences() {
    let image = Tensor::new(vec![4, 1, 8, 8], (0..256).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect()).unwrap();
    let flat = Tensor::new(vec![4, 6], (0..24).map(|i| ((i * 13 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let labels = [0, 2, 1, 2];
    for act in [Activation::Relu, Activation::Gelu] {
        for name in distill_core::nn::PRESETS {
            let input = if name.starts_with("conv") || name.starts_with("patch") { &image } else { &flat };
            let spec = preset(name, &input.shape()[1..], 3, act).unwrap();
            let err = model_fd(&spec, input, &labels, 3);
            assert!(err < 1e-4, "{name} {act:?}: max rel err {err}");
        }
    }
}

#[test]
fn hand_built_spec_with_every_layer_kind() {
    let spec = ModelSpec {
        name: "custom".into(),
        input_shape: vec![2, 6, 6],
        layers: vec![
            LayerSpec::conv2d(2, 3, 3, 1, 1),
            LayerSpec::activation(Activation::Gelu),
            LayerSpec::pool_mean(2, 2),
            LayerSpec::conv2d(3, 4, 2, 1, 0),
            LayerSpec::activation(Activation::Relu),
            LayerSpec::flatten(),
            LayerSpec::dense(16, 5),
            LayerSpec::activation(Activation::Gelu),
        ],
        head: distill_core::nn::HeadSpec {
            in_features: 5,
            out_features: 3,
        },
    };
    let input = Tensor::new(vec![4, 2, 6, 6], (0..288).map(|i| ((i * 29 % 23) as f64 - 11.0) / 6.0).collect()).unwrap();
    let err = model_fd(&spec, &input, &[1, 0, 2, 1], 9);
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn identical_inputs_give_identical_gradients() {
    let spec = preset("conv-t", &[1, 8, 8], 4, Activation::Relu).unwrap();
    let model = Model::init_truncated_normal(&spec, 0.3, 1).unwrap();
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64).sin()).collect()).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(&x);
        let logits = model.forward_on(&mut tape, &bound, xv).unwrap();
        let loss = cross_entropy(&mut tape, logits, &[1, 3]).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut out = tape.value(loss).to_vec();
        for v in bound.vars() {
            out.extend_from_slice(g.get(*v).unwrap());
        }
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
