mod common;

use common::{fixed_config, tensor_strategy};
use distill_core::objectives::{cross_entropy, kd_loss, softmax_t_values, total_loss, DistillConfig, KlDirection};
use distill_core::{Tape, Tensor};
use proptest::prelude::*;

/// Scalar softmax of one row, written without the library helpers.
fn oracle_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &z in row {
        if z / t > max {
            max = z / t;
        }
    }
    let mut total = 0.0;
    let mut out = Vec::new();
    for &z in row {
        let e = (z / t - max).exp();
        total += e;
        out.push(e);
    }
    out.into_iter().map(|e| e / total).collect()
}

fn kd_value_and_grad(z: &Tensor, teacher: &Tensor, t: f64, dir: KlDirection) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.leaf(&z.clone().with_requires_grad(true));
    let loss = kd_loss(&mut tape, v, teacher, t, dir).unwrap();
    let g = tape.backward(loss).unwrap().get(v).unwrap().to_vec();
    (tape.value(loss)[0], g)
}

#[test]
fn kl_of_a_distribution_with_itself_is_exactly_zero() {
    let z = Tensor::from_rows(&[vec![0.1, -2.0, 3.5], vec![10.0, 10.0, 10.0], vec![-4.0, 0.0, 7.0]]).unwrap();
    for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
        for t in [0.5, 1.0, 2.0, 9.0] {
            assert_eq!(kd_value_and_grad(&z, &z, t, dir).0, 0.0, "{dir:?} T={t}");
        }
    }
}

proptest! {
    #![proptest_config(fixed_config(1000))]

    #[test]
    fn kl_is_non_negative(
        a in tensor_strategy(&[1, 6]),
        b in tensor_strategy(&[1, 6]),
        scale in 0.1f64..20.0,
        t in 0.25f64..8.0,
    ) {
        let s = Tensor::new(vec![1, 6], a.data().iter().map(|x| x * scale).collect()).unwrap();
        for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
            prop_assert!(kd_value_and_grad(&s, &b, t, dir).0 >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(fixed_config(64))]

    #[test]
    fn kd_gradient_is_scaled_probability_gap(
        z in tensor_strategy(&[5, 7]),
        teacher in tensor_strategy(&[5, 7]),
        t in 0.5f64..6.0,
    ) {
        let (_, g) = kd_value_and_grad(&z, &teacher, t, KlDirection::TeacherStudent);
        let batch = 5.0;
        for row in 0..5 {
            let ps = oracle_softmax(&z.data()[row * 7..(row + 1) * 7], t);
            let pt = oracle_softmax(&teacher.data()[row * 7..(row + 1) * 7], t);
            for c in 0..7 {
                let expected = t * (ps[c] - pt[c]) / batch;
                prop_assert!((g[row * 7 + c] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn high_temperature_gradient_approaches_centered_logit_difference(
        z in tensor_strategy(&[3, 5]),
        teacher in tensor_strategy(&[3, 5]),
    ) {
        // d/dz_s -> (d_c - mean d) / (C B), with an error shrinking like 1/T.
        let mut limit = vec![0.0; 15];
        for row in 0..3 {
            let d: Vec<f64> = (0..5).map(|c| z.data()[row * 5 + c] - teacher.data()[row * 5 + c]).collect();
            let mean = d.iter().sum::<f64>() / 5.0;
            for c in 0..5 {
                limit[row * 5 + c] = (d[c] - mean) / (5.0 * 3.0);
            }
        }
        let scale = limit.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assume!(scale > 1e-3);
        let err = |t: f64| {
            let (_, g) = kd_value_and_grad(&z, &teacher, t, KlDirection::TeacherStudent);
            g.iter().zip(&limit).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
        };
        let (coarse, fine) = (err(1e3), err(1e4));
        prop_assert!(coarse < 2e-2, "{coarse}");
        prop_assert!(fine < coarse / 5.0 || fine < 1e-9, "{coarse} -> {fine}");
    }

    #[test]
    fn high_temperature_limit_is_centered_logit_mse(
        z in tensor_strategy(&[3, 5]),
        teacher in tensor_strategy(&[3, 5]),
    ) {
        // T^2 KL -> sum_c (d_c - mean d)^2 / (2 C) per row as T grows, d = z_s - z_t.
        let t = 1000.0;
        let (value, _) = kd_value_and_grad(&z, &teacher, t, KlDirection::TeacherStudent);
        let mut limit = 0.0;
        for row in 0..3 {
            let d: Vec<f64> = (0..5).map(|c| z.data()[row * 5 + c] - teacher.data()[row * 5 + c]).collect();
            let mean = d.iter().sum::<f64>() / 5.0;
            limit += d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (2.0 * 5.0);
        }
        limit /= 3.0;
        prop_assert!((value - limit).abs() <= 1e-3 * limit.max(1e-3), "{value} vs {limit}");
    }

    #[test]
    fn blend_is_linear_in_alpha(
        z in tensor_strategy(&[4, 3]),
        teacher in tensor_strategy(&[4, 3]),
        labels in proptest::collection::vec(0usize..3, 4),
        alpha in 0.0f64..1.0,
    ) {
        let value = |f: &dyn Fn(&mut Tape, distill_core::Var) -> distill_core::Var| {
            let mut tape = Tape::new();
            let v = tape.leaf(&z.clone().with_requires_grad(true));
            let l = f(&mut tape, v);
            tape.value(l)[0]
        };
        let cfg = DistillConfig { alpha, ..DistillConfig::default() };
        let total = value(&|t, v| total_loss(t, v, Some(&teacher), &labels, &cfg).unwrap());
        let ce = value(&|t, v| cross_entropy(t, v, &labels).unwrap());
        let kd = value(&|t, v| kd_loss(t, v, &teacher, cfg.temperature, cfg.kl_direction).unwrap());
        prop_assert!((total - ((1.0 - alpha) * ce + alpha * kd)).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_is_bitwise_cross_entropy(
        z in tensor_strategy(&[4, 3]),
        teacher in tensor_strategy(&[4, 3]),
        labels in proptest::collection::vec(0usize..3, 4),
    ) {
        let run = |blend: bool| {
            let mut tape = Tape::new();
            let v = tape.leaf(&z.clone().with_requires_grad(true));
            let cfg = DistillConfig { alpha: 0.0, ..DistillConfig::default() };
            let l = if blend {
                total_loss(&mut tape, v, Some(&teacher), &labels, &cfg).unwrap()
            } else {
                cross_entropy(&mut tape, v, &labels).unwrap()
            };
            let g = tape.backward(l).unwrap().get(v).unwrap().to_vec();
            let mut bits = vec![tape.value(l)[0].to_bits()];
            bits.extend(g.iter().map(|x| x.to_bits()));
            bits
        };
        prop_assert_eq!(run(true), run(false));
    }

    #[test]
    fn softmax_is_shift_invariant_and_stochastic(
        z in tensor_strategy(&[3, 6]),
        shift in -1e4f64..1e4,
        magnitude in 1.0f64..1e4,
        t in 0.5f64..4.0,
    ) {
        let big = Tensor::new(vec![3, 6], z.data().iter().map(|x| x * magnitude / 2.0).collect()).unwrap();
        let moved = Tensor::new(vec![3, 6], big.data().iter().map(|x| x + shift).collect()).unwrap();
        let p = softmax_t_values(&big, t).unwrap();
        let q = softmax_t_values(&moved, t).unwrap();
        for row in p.data().chunks(6) {
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let plain = softmax_t_values(&z, t).unwrap();
        let plain_moved = softmax_t_values(
            &Tensor::new(vec![3, 6], z.data().iter().map(|x| x + shift).collect()).unwrap(),
            t,
        )
        .unwrap();
        for (a, b) in plain.data().iter().zip(plain_moved.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn student_teacher_direction_matches_its_closed_form() {
    let z = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.3]]).unwrap();
    let teacher = Tensor::from_rows(&[vec![1.0, 1.0, -1.0], vec![2.0, 0.0, 0.0]]).unwrap();
    let t = 2.0;
    let (value, _) = kd_value_and_grad(&z, &teacher, t, KlDirection::StudentTeacher);
    let mut expected = 0.0;
    for row in 0..2 {
        let ps = oracle_softmax(&z.data()[row * 3..row * 3 + 3], t);
        let pt = oracle_softmax(&teacher.data()[row * 3..row * 3 + 3], t);
        expected += (0..3).map(|c| ps[c] * (ps[c] / pt[c]).ln()).sum::<f64>();
    }
    expected *= t * t / 2.0;
    assert!((value - expected).abs() < 1e-12, "{value} vs {expected}");
}
