use super::gradcheck::{max_rel_error, random_tensor};
use super::*;
use crate::error::Error;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    assert_eq!(Tensor::scalar(1.0).len(), 1);
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let b = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = tape.constant(Tensor::identity(2));
    let out = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(out), &t2(&[&[1.0, 2.0], &[3.0, 4.0]]));

    let p = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let q = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let out = tape.matmul(p, q).unwrap();
    assert_eq!(tape.value(out), &t2(&[&[5.0, 6.0], &[0.0, 0.0]]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(11);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let w = random_tensor(&[3, 2], &mut rng);
    let err = max_rel_error(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(c, wv).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn batched_matmul_layouts_match_finite_differences() {
    let mut rng = Rng::seed_from(12);
    let shared = random_tensor(&[3, 4], &mut rng);
    let batch = random_tensor(&[2, 4, 5], &mut rng);
    let right = random_tensor(&[5, 2], &mut rng);
    let w = random_tensor(&[2, 3, 2], &mut rng);
    let err = max_rel_error(&[shared, batch, right], |t, v| {
        let left = t.matmul(v[0], v[1]).unwrap(); // [2,3,5]
        let out = t.matmul(left, v[2]).unwrap(); // [2,3,2]
        let wv = t.constant(w.clone());
        let p = t.mul(out, wv).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn transpose_gradient() {
    let mut rng = Rng::seed_from(13);
    let a = random_tensor(&[3, 2], &mut rng);
    let b = random_tensor(&[3, 4], &mut rng);
    let err = max_rel_error(&[a, b], |t, v| {
        let at = t.transpose(v[0]).unwrap();
        let p = t.matmul(at, v[1]).unwrap();
        let sq = t.mul(p, p).unwrap();
        t.sum(sq)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn add_broadcast_cases() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let out = tape.add(a, z).unwrap();
    assert_eq!(tape.value(out), tape.value(a));

    let m = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
    let ones = tape.constant(Tensor::vector(vec![1.0; 3]));
    let out = tape.add(m, ones).unwrap();
    assert_eq!(tape.value(out), &t2(&[&[2.0, 3.0, 4.0], &[5.0, 6.0, 7.0]]));

    let bad = tape.constant(Tensor::vector(vec![1.0; 2]));
    assert!(matches!(tape.add(m, bad), Err(Error::Dimension { .. })));
}

#[test]
fn broadcast_axis_gradient_is_column_sum() {
    let mut rng = Rng::seed_from(14);
    let a = random_tensor(&[4, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let up = random_tensor(&[4, 3], &mut rng);

    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.param(b.clone());
    let s = tape.add(av, bv).unwrap();
    let u = tape.constant(up.clone());
    let p = tape.mul(s, u).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    let gb = tape.grad(bv).unwrap();
    for j in 0..3 {
        let col: f64 = (0..4).map(|i| up.at(i, j)).sum();
        assert!((gb[j] - col).abs() < 1e-12);
    }

    let err = max_rel_error(&[a, b], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let u = t.constant(up.clone());
        let p = t.mul(s, u).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6);
}

#[test]
fn column_broadcast_and_division_gradients() {
    let mut rng = Rng::seed_from(15);
    let a = random_tensor(&[2, 4, 3], &mut rng);
    let col = random_tensor(&[4, 1], &mut rng);
    let denom = Tensor::vector(vec![1.5, -2.0, 0.7]);
    let err = max_rel_error(&[a, col, denom], |t, v| {
        let s = t.sub(v[0], v[1]).unwrap();
        let d = t.div(s, v[2]).unwrap();
        let sq = t.mul(d, d).unwrap();
        t.sum(sq)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn relu_values_and_slopes() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.activation(x, Activation::Relu);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g[2], 1.0);
    assert_eq!(g[0], 0.0);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from(16);
    let x = random_tensor(&[20], &mut rng);
    let err = max_rel_error(&[x], |t, v| {
        let y = t.activation(v[0], Activation::Gelu);
        let sq = t.mul(y, y).unwrap();
        t.sum(sq)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn softmax_rows_are_stable_probabilities() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let s = tape.row_softmax(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.25; 4]);

    let big = tape.constant(t2(&[&[1000.0, 1000.0]]));
    let s = tape.row_softmax(big).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from(17);
    let x = random_tensor(&[3, 5], &mut rng);
    let w = random_tensor(&[3, 5], &mut rng);
    let err = max_rel_error(&[x], |t, v| {
        let s = t.row_softmax(v[0]).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(s, wv).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

fn affine(c: usize) -> (Tensor, Tensor) {
    (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
}

#[test]
fn layer_norm_constant_input_maps_to_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 3], 2.5));
    let (g, b) = affine(3);
    let (g, b) = (tape.constant(g), tape.constant(b));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = Rng::seed_from(18);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[5, 6], &mut rng));
    let (g, b) = affine(6);
    let (g, b) = (tape.constant(g), tape.constant(b));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    for row in tape.value(y).data().chunks(6) {
        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn normalization_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(19);
    let x = random_tensor(&[4, 3], &mut rng);
    let g = random_tensor(&[3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let w = random_tensor(&[4, 3], &mut rng);
    let layer = max_rel_error(&[x.clone(), g.clone(), b.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p)
    });
    assert!(layer < 1e-5, "layer norm rel err {layer}");
    let batch = max_rel_error(&[x, g, b], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::FromInput).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p)
    });
    assert!(batch < 1e-5, "batch norm rel err {batch}");
}

#[test]
fn frozen_batch_norm_uses_given_statistics() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 4.0], &[3.0, 8.0]]));
    let (g, b) = affine(2);
    let (g, b) = (tape.constant(g), tape.constant(b));
    let mode = NormMode::Frozen {
        mean: vec![1.0, 4.0],
        var: vec![4.0, 16.0],
    };
    let (y, moments) = tape.batch_norm(x, g, b, 1e-300, mode).unwrap();
    assert!(moments.is_none());
    let out = tape.value(y).data();
    assert!((out[2] - 1.0).abs() < 1e-12 && (out[3] - 1.0).abs() < 1e-12);
}

#[test]
fn batch_norm_reports_per_channel_moments() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 10.0], &[3.0, 10.0]]));
    let (g, b) = affine(2);
    let (g, b) = (tape.constant(g), tape.constant(b));
    let (_, m) = tape.batch_norm(x, g, b, 1e-5, NormMode::FromInput).unwrap();
    let m = m.unwrap();
    assert_eq!(m.mean, vec![2.0, 10.0]);
    assert_eq!(m.var, vec![1.0, 0.0]);
}

#[test]
fn dropout_degenerate_cases_are_identity() {
    let mut rng = Rng::seed_from(20);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[10], 3.0));
    for training in [true, false] {
        let y = tape.dropout(x, 0.0, training, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
    let y = tape.dropout(x, 0.3, false, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(matches!(
        tape.dropout(x, 1.0, true, &mut rng),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn dropout_monte_carlo_rate_and_mean() {
    let mut rng = Rng::seed_from(21);
    let mut data_rng = Rng::seed_from(22);
    let input: Vec<f64> = (0..10_000).map(|_| data_rng.uniform_in(1.0, 3.0)).collect();
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(input.clone()));
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let out = tape.value(y).data().to_vec();
    let survivors = out.iter().filter(|v| **v != 0.0).count() as f64 / 10_000.0;
    assert!((survivors - 0.5).abs() <= 0.02, "survivors {survivors}");
    let mean_in: f64 = input.iter().sum::<f64>() / 10_000.0;
    let mean_out: f64 = out.iter().sum::<f64>() / 10_000.0;
    assert!(((mean_out - mean_in) / mean_in).abs() < 0.02);

    // gradient flows through the same mask
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for (gi, oi) in g.iter().zip(&out) {
        assert_eq!(*gi == 0.0, *oi == 0.0);
    }
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 3, 4], 0.7));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| *g == 1.0));
}

#[test]
fn reuse_doubles_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let once = tape.sum(x);
    tape.backward(once).unwrap();
    let single = tape.grad(x).unwrap().to_vec();

    let twice = tape.add(x, x).unwrap();
    let s = tape.sum(twice);
    tape.backward(s).unwrap();
    let double = tape.grad(x).unwrap();
    for (s, d) in single.iter().zip(double) {
        assert_eq!(2.0 * s, *d);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn mse_gradient_matches_closed_form() {
    let mut rng = Rng::seed_from(23);
    let pred = random_tensor(&[4, 3], &mut rng);
    let target = random_tensor(&[4, 3], &mut rng);
    let mut tape = Tape::new();
    let p = tape.param(pred.clone());
    let loss = tape.mse(p, &target).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(p).unwrap();
    for i in 0..12 {
        let expect = 2.0 * (pred.data()[i] - target.data()[i]) / 12.0;
        assert!((g[i] - expect).abs() < 1e-15);
    }
    let err = max_rel_error(&[pred], |t, v| t.mse(v[0], &target).unwrap());
    assert!(err < 1e-6);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = Rng::seed_from(24);
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&[5, 4], &mut rng));
        let b = tape.param(random_tensor(&[4, 3], &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.dropout(c, 0.3, true, &mut rng).unwrap();
        let s = tape.row_softmax(d).unwrap();
        let l = tape.sum(s);
        let l2 = tape.mul(l, l).unwrap();
        tape.backward(l2).unwrap();
        let mut out = tape.grad(a).unwrap().to_vec();
        out.extend_from_slice(tape.grad(b).unwrap());
        out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn select_last_gradient_scatters() {
    let mut rng = Rng::seed_from(25);
    let x = random_tensor(&[3, 4], &mut rng);
    let err = max_rel_error(&[x], |t, v| {
        let s = t.select_last(v[0], &[2, 0]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum(sq)
    });
    assert!(err < 1e-6);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn softmax_rows_sum_to_one(data in vals(12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
            let s = tape.row_softmax(x).unwrap();
            for row in tape.value(s).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }

        #[test]
        fn primitive_chain_matches_finite_differences(a in vals(12), b in vals(12), c in vals(3)) {
            let ta = Tensor::new(vec![4, 3], a).unwrap();
            let tb = Tensor::new(vec![3, 4], b).unwrap();
            let tc = Tensor::vector(c);
            let err = max_rel_error(&[ta, tb, tc], |t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                let m = t.activation(m, Activation::Gelu);
                let tr = t.transpose(m).unwrap();
                let s = t.row_softmax(tr).unwrap();
                let prod = t.matmul(s, v[0]).unwrap();
                let shifted = t.add(prod, v[2]).unwrap();
                let sq = t.mul(shifted, shifted).unwrap();
                t.mean(sq)
            });
            prop_assert!(err < 1e-5, "rel err {}", err);
        }
    }
}

#[test]
fn gelu_agrees_with_libm_tanh_form() {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for i in -4000..=4000 {
        let x = i as f64 * 0.01;
        let exact = 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
        assert!((Activation::Gelu.apply(x) - exact).abs() < 1e-14, "x = {x}");
    }
}
