use super::*;
use crate::tensor::gradcheck::{max_rel_error, random_tensor};

fn tiny(norm: NormKind, activation: Activation) -> ModelConfig {
    ModelConfig {
        lookback: 6,
        horizon: 3,
        channels: 3,
        target_channels: vec![0, 1, 2],
        rounds: 2,
        blocks: 2,
        slots: 4,
        hidden: 5,
        norm,
        activation,
        dropout: 0.0,
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    random_tensor(shape, &mut rng)
}

/// Perturbs the norm affines and instance parameters away from their
/// init so that every term of the oracle is exercised.
fn jittered(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = Rng::seed_from(seed);
    let mut p = ModelParams::init(cfg, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.uniform_in(-1.0, 1.0);
        }
    }
    for v in p.slot_keys.data_mut().iter_mut().chain(p.slot_values.data_mut()) {
        *v *= 20.0;
    }
    p
}

// ---- scalar-loop reference --------------------------------------------

type Mat = Vec<Vec<f64>>;

fn layer_norm_rows(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mu) * inv * g[c] + b[c])
                .collect()
        })
        .collect()
}

fn reference_forward(p: &ModelParams, x: &Mat) -> Mat {
    let cfg = &p.config;
    let (l, c, t, s, h) = (cfg.lookback, cfg.channels, cfg.horizon, cfg.slots, cfg.hidden);
    let act = |v: f64| cfg.activation.apply(v);
    let mut mu = vec![0.0; c];
    let mut sd = vec![0.0; c];
    let ig = p.instance_gamma.data();
    let ib = p.instance_beta.data();
    let mut g: Mat = vec![vec![0.0; c]; l];
    for ch in 0..c {
        mu[ch] = (0..l).map(|i| x[i][ch]).sum::<f64>() / l as f64;
        let var = (0..l).map(|i| (x[i][ch] - mu[ch]).powi(2)).sum::<f64>() / l as f64;
        sd[ch] = var.sqrt().max(INSTANCE_EPS);
        for i in 0..l {
            g[i][ch] = (x[i][ch] - mu[ch]) / sd[ch] * ig[ch] + ib[ch];
        }
    }
    for _ in 0..cfg.rounds {
        for b in &p.blocks {
            let sn = layer_norm_rows(&g, b.norm1_gamma.data(), b.norm1_beta.data());
            let mut tm = g.clone();
            for i in 0..l {
                for ch in 0..c {
                    let mut acc = b.time_bias.data()[i];
                    for j in 0..l {
                        acc += b.time_weight.at(i, j) * sn[j][ch];
                    }
                    tm[i][ch] += act(acc);
                }
            }
            let q = layer_norm_rows(&tm, b.norm2_gamma.data(), b.norm2_beta.data());
            let mut out = tm.clone();
            for i in 0..l {
                let hidden: Vec<f64> = (0..h)
                    .map(|k| {
                        let mut acc = b.feat_bias1.data()[k];
                        for ch in 0..c {
                            acc += q[i][ch] * b.feat_weight1.at(ch, k);
                        }
                        act(acc)
                    })
                    .collect();
                for ch in 0..c {
                    let mut acc = b.feat_bias2.data()[ch];
                    for k in 0..h {
                        acc += hidden[k] * b.feat_weight2.at(k, ch);
                    }
                    out[i][ch] += acc;
                }
            }
            g = out;
        }
    }
    let mut z = g.clone();
    for i in 0..l {
        let logits: Vec<f64> = (0..s)
            .map(|j| (0..c).map(|ch| g[i][ch] * p.slot_keys.at(j, ch)).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = e.iter().sum();
        for ch in 0..c {
            z[i][ch] += (0..s).map(|j| e[j] / total * p.slot_values.at(j, ch)).sum::<f64>();
        }
    }
    let targets = &cfg.target_channels;
    (0..t)
        .map(|r| {
            targets
                .iter()
                .map(|&ch| {
                    let mut acc = p.head_bias.data()[r];
                    for i in 0..l {
                        acc += p.head_weight.at(r, i) * z[i][ch];
                    }
                    (acc - ib[ch]) / ig[ch] * sd[ch] + mu[ch]
                })
                .collect()
        })
        .collect()
}

fn rows_of(t: &Tensor) -> Mat {
    let c = t.shape()[t.rank() - 1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

#[test]
fn forward_matches_scalar_loop_reference() {
    for activation in [Activation::Relu, Activation::Gelu] {
        let mut cfg = tiny(NormKind::Layer, activation);
        cfg.target_channels = vec![2, 0];
        let p = jittered(&cfg, 11);
        let x = random_input(&[6, 3], 12);
        let got = p.predict(&x).unwrap();
        assert_eq!(got.shape(), &[3, 2]);
        let want = reference_forward(&p, &rows_of(&x));
        for (gr, wr) in rows_of(&got).iter().zip(&want) {
            for (a, b) in gr.iter().zip(wr) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn batched_forward_equals_per_window_forward() {
    let cfg = tiny(NormKind::Layer, Activation::Relu);
    let p = jittered(&cfg, 4);
    let windows: Vec<Tensor> = (0..3).map(|k| random_input(&[6, 3], 40 + k)).collect();
    let refs: Vec<&Tensor> = windows.iter().collect();
    let batch = Tensor::stack(&refs).unwrap();
    let joint = p.predict(&batch).unwrap();
    assert_eq!(joint.shape(), &[3, 3, 3]);
    for (k, w) in windows.iter().enumerate() {
        let single = p.predict(w).unwrap();
        assert!(joint.slice_outer(k).max_abs_diff(&single) < 1e-13);
    }
}

#[test]
fn zero_mixing_weights_make_the_stack_an_identity() {
    let cfg = tiny(NormKind::Layer, Activation::Gelu);
    let mut p = jittered(&cfg, 5);
    for b in &mut p.blocks {
        for t in [
            &mut b.time_weight,
            &mut b.time_bias,
            &mut b.feat_weight2,
            &mut b.feat_bias2,
        ] {
            t.data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let g = tape.constant(random_input(&[2, 6, 3], 6));
    let mut rng = Rng::seed_from(0);
    let mut ctx = StageContext {
        config: &p.config,
        training: false,
        rng: &mut rng,
        moments: Vec::new(),
    };
    let out = iterative_refine(&mut tape, g, &bound.blocks, 3, &mut ctx).unwrap();
    assert_eq!(tape.value(out), tape.value(g));
}

#[test]
fn parameter_count_matches_closed_form() {
    // 2·3 + 2·(36 + 6 + 30 + 5 + 3 + 12) + 2·4·3 + 3·6 + 3
    let cfg = tiny(NormKind::Layer, Activation::Relu);
    assert_eq!(cfg.parameter_count(), 6 + 2 * 92 + 24 + 18 + 3);
    let mut rng = Rng::seed_from(0);
    for norm in [NormKind::Layer, NormKind::Batch] {
        for rounds in [1, 4, 8] {
            let mut c = tiny(norm, Activation::Relu);
            c.rounds = rounds;
            let p = ModelParams::init(&c, &mut rng).unwrap();
            assert_eq!(p.count_parameters(), 235);
        }
    }
    let mut big = ModelConfig::new(96, 24, 7);
    big.blocks = 4;
    big.slots = 32;
    big.hidden = 128;
    let p = ModelParams::init(&big, &mut rng).unwrap();
    assert_eq!(p.count_parameters(), big.parameter_count());
}

#[test]
fn instance_map_standardizes_and_inverts() {
    let x = random_input(&[2, 6, 3], 8);
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (h, stats) = instance_normalize(&mut tape, &x, g, b).unwrap();
    let hv = tape.value(h).clone();
    for bi in 0..2 {
        for ch in 0..3 {
            let col: Vec<f64> = (0..6).map(|t| hv.data()[bi * 18 + t * 3 + ch]).collect();
            let mu = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
            assert!(mu.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    let mut tape = Tape::new();
    let g = tape.constant(Tensor::vector(vec![0.7, -1.3, 2.1]));
    let b = tape.constant(Tensor::vector(vec![0.2, 0.0, -4.0]));
    let (h, stats2) = instance_normalize(&mut tape, &x, g, b).unwrap();
    assert_eq!(stats, stats2);
    let back = instance_denormalize(&mut tape, h, g, b, &stats2).unwrap();
    assert!(tape.value(back).max_abs_diff(&x) < 1e-12);
}

#[test]
fn constant_window_normalizes_to_beta() {
    let x = Tensor::full(&[1, 6, 2], 42.0);
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::vector(vec![0.5, -0.5]));
    let (h, stats) = instance_normalize(&mut tape, &x, g, b).unwrap();
    assert_eq!(stats.std.data(), &[INSTANCE_EPS, INSTANCE_EPS]);
    assert!(tape.value(h).data().chunks(2).all(|r| r == [0.5, -0.5]));
}

#[test]
fn attention_weights_are_distributions() {
    let mut tape = Tape::new();
    let h = tape.constant(random_input(&[2, 7, 3], 1));
    let keys = tape.constant(random_input(&[5, 3], 2));
    let a = attention_weights(&mut tape, h, keys).unwrap();
    assert_eq!(tape.shape(a), &[2, 7, 5]);
    for row in tape.value(a).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| *v > 0.0));
    }
    let zero_keys = tape.constant(Tensor::zeros(&[4, 3]));
    let u = attention_weights(&mut tape, h, zero_keys).unwrap();
    assert!(tape.value(u).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn attention_stays_finite_for_huge_activations() {
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::full(&[4, 3], 1000.0));
    let keys = tape.constant(random_input(&[6, 3], 3));
    let values = tape.constant(random_input(&[6, 3], 4));
    let z = external_attention(&mut tape, h, keys, values).unwrap();
    assert!(tape.value(z).is_finite());
}

#[test]
fn attention_cost_is_linear_in_lookback() {
    let cost = |l: usize| {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[l, 8]));
        let k = tape.constant(Tensor::zeros(&[16, 8]));
        let v = tape.constant(Tensor::zeros(&[16, 8]));
        let before = tape.flops();
        external_attention(&mut tape, h, k, v).unwrap();
        (tape.flops() - before) as i64
    };
    let (c1, c2, c4, c8) = (cost(32), cost(64), cost(128), cost(256));
    assert_eq!(c4 - c2, 2 * (c2 - c1));
    assert_eq!(c8 - c4, 2 * (c4 - c2));
}

#[test]
fn shape_mismatch_is_reported() {
    let cfg = tiny(NormKind::Layer, Activation::Relu);
    let p = jittered(&cfg, 1);
    let err = p.predict(&Tensor::zeros(&[5, 3])).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::zeros(&[4, 3]));
    let k = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(external_attention(&mut tape, h, k, k).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = Rng::seed_from(0);
    let mut c = tiny(NormKind::Layer, Activation::Relu);
    c.dropout = 0.6;
    assert!(matches!(ModelParams::init(&c, &mut rng), Err(Error::Config { .. })));
    let mut c = tiny(NormKind::Layer, Activation::Relu);
    c.target_channels = vec![3];
    assert!(ModelParams::init(&c, &mut rng).is_err());
    let mut c = tiny(NormKind::Layer, Activation::Relu);
    c.target_channels = vec![1, 1];
    assert!(ModelParams::init(&c, &mut rng).is_err());
    let mut c = tiny(NormKind::Layer, Activation::Relu);
    c.rounds = 0;
    assert!(ModelParams::init(&c, &mut rng).is_err());
}

// ---- gradients --------------------------------------------------------

fn bound_from(vars: &[Var], template: &ModelParams) -> BoundParams {
    let mut it = vars.iter().copied();
    let mut next = || it.next().unwrap();
    let instance_gamma = next();
    let instance_beta = next();
    let blocks = template
        .blocks
        .iter()
        .map(|b| BoundBlock {
            time_weight: next(),
            time_bias: next(),
            feat_weight1: next(),
            feat_bias1: next(),
            feat_weight2: next(),
            feat_bias2: next(),
            norm1_gamma: next(),
            norm1_beta: next(),
            norm2_gamma: next(),
            norm2_beta: next(),
            norm1_running: b.norm1_running.clone(),
            norm2_running: b.norm2_running.clone(),
        })
        .collect();
    BoundParams {
        instance_gamma,
        instance_beta,
        blocks,
        slot_keys: next(),
        slot_values: next(),
        head_weight: next(),
        head_bias: next(),
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for (norm, activation) in [
        (NormKind::Layer, Activation::Gelu),
        (NormKind::Batch, Activation::Gelu),
        (NormKind::Layer, Activation::Relu),
    ] {
        let cfg = tiny(norm, activation);
        let p = jittered(&cfg, 21);
        let x = random_input(&[2, 6, 3], 22);
        let target = random_input(&[2, 3, 3], 23);
        let inputs: Vec<Tensor> = p.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let err = max_rel_error(&inputs, |tape, vars| {
            let bound = bound_from(vars, &p);
            let mut rng = Rng::seed_from(0);
            let pass = p.forward(tape, &bound, &x, true, &mut rng).unwrap();
            tape.mse(pass.output, &target).unwrap()
        });
        assert!(err < 1e-4, "{norm:?}/{activation:?}: relative error {err}");
    }
}

#[test]
fn tied_gradient_is_sum_over_rounds() {
    let mut cfg = tiny(NormKind::Layer, Activation::Gelu);
    cfg.dropout = 0.2;
    cfg.rounds = 3;
    let p = jittered(&cfg, 31);
    let x = random_input(&[2, 6, 3], 32);
    let target = random_input(&[2, 3, 3], 33);

    let mut tied = Tape::new();
    let bt = p.bind(&mut tied, true);
    let mut rng = Rng::seed_from(77);
    let pass = p.forward(&mut tied, &bt, &x, true, &mut rng).unwrap();
    let loss = tied.mse(pass.output, &target).unwrap();
    tied.backward(loss).unwrap();

    // Same computation with an independent copy of the stack per round.
    let mut untied = Tape::new();
    let shared = p.bind(&mut untied, true);
    let copies: Vec<BoundParams> = (0..cfg.rounds).map(|_| p.bind(&mut untied, true)).collect();
    let mut rng = Rng::seed_from(77);
    let mut ctx = StageContext {
        config: &cfg,
        training: true,
        rng: &mut rng,
        moments: Vec::new(),
    };
    let (mut h, stats) =
        instance_normalize(&mut untied, &x, shared.instance_gamma, shared.instance_beta).unwrap();
    for copy in &copies {
        h = apply_stack(&mut untied, h, &copy.blocks, &mut ctx).unwrap();
    }
    let z = external_attention(&mut untied, h, shared.slot_keys, shared.slot_values).unwrap();
    let y = temporal_readout(&mut untied, z, &shared, &stats, &cfg).unwrap();
    let loss2 = untied.mse(y, &target).unwrap();
    assert_eq!(untied.value(loss2).data(), tied.value(loss).data());
    untied.backward(loss2).unwrap();

    for (bi, block) in bt.blocks.iter().enumerate() {
        for (k, &v) in block.vars().iter().enumerate() {
            let want = tied.grad(v).unwrap();
            let mut sum = vec![0.0; want.len()];
            for copy in &copies {
                let g = untied.grad(copy.blocks[bi].vars()[k]).unwrap();
                for (s, g) in sum.iter_mut().zip(g) {
                    *s += g;
                }
            }
            for (a, b) in want.iter().zip(&sum) {
                assert!((a - b).abs() < 1e-10, "block {bi} param {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn dropout_masks_differ_between_rounds_and_vanish_at_inference() {
    let mut cfg = tiny(NormKind::Layer, Activation::Relu);
    cfg.dropout = 0.3;
    let p = jittered(&cfg, 3);
    let x = random_input(&[1, 6, 3], 4);
    let run = |training: bool, seed: u64| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let mut rng = Rng::seed_from(seed);
        let out = p.forward(&mut tape, &b, &x, training, &mut rng).unwrap().output;
        tape.value(out).clone()
    };
    assert_ne!(run(true, 1), run(true, 2));
    assert_eq!(run(true, 1), run(true, 1));
    assert_eq!(run(false, 1), run(false, 2));
    assert_eq!(run(false, 1), p.predict(&x).unwrap());
}

#[test]
fn batch_norm_collects_moments_per_application() {
    let cfg = tiny(NormKind::Batch, Activation::Relu);
    let mut p = jittered(&cfg, 9);
    let x = random_input(&[4, 6, 3], 10);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, true);
    let mut rng = Rng::seed_from(0);
    let pass = p.forward(&mut tape, &b, &x, true, &mut rng).unwrap();
    assert_eq!(pass.moments.len(), 2 * cfg.blocks * cfg.rounds);
    let before = p.blocks[0].norm1_running.clone();
    p.absorb_moments(&pass.moments);
    assert_ne!(p.blocks[0].norm1_running, before);

    // inference uses the frozen running statistics, not the batch
    let alone = p.predict(&x.slice_outer(0)).unwrap();
    let joint = p.predict(&x).unwrap();
    assert!(joint.slice_outer(0).max_abs_diff(&alone) < 1e-13);
}

// ---- checkpoints ------------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = tiny(NormKind::Batch, Activation::Gelu);
    cfg.target_channels = vec![1];
    cfg.dropout = 0.25;
    let mut p = jittered(&cfg, 50);
    p.blocks[1].norm2_running.mean[2] = 1.0 / 3.0;
    let ck = Checkpoint {
        params: p.clone(),
        norm_stats: Some(crate::data::NormStats {
            mean: vec![0.1, 2.0 / 7.0, -3.0],
            std: vec![1.0, 1e-7, 12345.678],
        }),
        feature_names: vec!["a".into(), "b c".into(), "OT".into()],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let x = random_input(&[2, 6, 3], 51);
    let a = p.predict(&x).unwrap();
    let b = back.params.predict(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    assert!(matches!(Checkpoint::from_text("hello\n"), Err(Error::Checkpoint(_))));
    let cfg = tiny(NormKind::Layer, Activation::Relu);
    let ck = Checkpoint {
        params: jittered(&cfg, 1),
        norm_stats: None,
        feature_names: vec![],
    };
    let text = ck.to_text();
    let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
    assert!(Checkpoint::from_text(&truncated).is_err());
    let wrong = text.replace("config.hidden 5", "config.hidden 6");
    assert!(Checkpoint::from_text(&wrong).is_err());
    assert_eq!(Checkpoint::from_text(&text).unwrap(), ck);
}
