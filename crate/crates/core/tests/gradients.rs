mod common;

use common::{assert_passed, away_from_zero, normal, sampled, spaced, strict};
use probact::autodiff::{finite_diff_check, ops, ParamId, ParamStore, Tape};
use probact::nn::activation::ops as act_ops;
use probact::nn::layers::{self, ops as layer_ops, BatchNormState};
use probact::nn::probact::probact;
use probact::nn::{build_model, Activation, EvalMode, ModelOptions, ModelSpec, Phase, ProbActConfig, SigmaMode};
use probact::{Error, NoiseKey, Tensor};

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.add(name, t, true);
    }
    s
}

#[test]
fn dense_gradients() {
    let mut store = store_of(vec![
        ("x", normal(&[3, 5], 1)),
        ("w", normal(&[4, 5], 2)),
        ("b", normal(&[4], 3)),
    ]);
    let probe = normal(&[3, 4], 4);
    let report = finite_diff_check(
        |s, tape| {
            let (x, w, b) = (
                tape.param(s, ParamId(0)),
                tape.param(s, ParamId(1)),
                tape.param(s, ParamId(2)),
            );
            let y = layer_ops::dense(tape, x, w, b)?;
            ops::weighted_sum(tape, y, &probe)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("dense", &report);
}

#[test]
fn conv_gradients() {
    let mut store = store_of(vec![
        ("x", normal(&[2, 3, 5, 5], 5)),
        ("k", normal(&[4, 3, 3, 3], 6)),
        ("b", normal(&[4], 7)),
    ]);
    let probe = normal(&[2, 4, 5, 5], 8);
    let report = finite_diff_check(
        |s, tape| {
            let (x, k, b) = (
                tape.param(s, ParamId(0)),
                tape.param(s, ParamId(1)),
                tape.param(s, ParamId(2)),
            );
            let y = layer_ops::conv2d(tape, x, k, b, 1)?;
            ops::weighted_sum(tape, y, &probe)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("conv2d", &report);
}

#[test]
fn maxpool_gradients() {
    let mut store = store_of(vec![("x", spaced(&[2, 3, 4, 6], 9, 0.01))]);
    let probe = normal(&[2, 3, 2, 3], 10);
    let report = finite_diff_check(
        |s, tape| {
            let x = tape.param(s, ParamId(0));
            let y = layer_ops::maxpool2d(tape, x, 2)?;
            ops::weighted_sum(tape, y, &probe)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("maxpool2d", &report);
}

#[test]
fn batchnorm_gradients() {
    for shape in [vec![4, 3, 3, 3], vec![6, 5]] {
        let c = shape[1];
        let mut store = store_of(vec![
            ("x", normal(&shape, 11)),
            ("gamma", normal(&[c], 12).map(|v| 1.0 + 0.3 * v)),
            ("beta", normal(&[c], 13)),
        ]);
        let probe = normal(&shape, 14);
        let report = finite_diff_check(
            |s, tape| {
                let (x, g, b) = (
                    tape.param(s, ParamId(0)),
                    tape.param(s, ParamId(1)),
                    tape.param(s, ParamId(2)),
                );
                let mut state = BatchNormState::new(c);
                let y = layer_ops::batchnorm(tape, x, g, b, &mut state, Phase::Train)?;
                ops::weighted_sum(tape, y, &probe)
            },
            &mut store,
            &strict(),
        )
        .unwrap();
        assert_passed(&format!("batchnorm {shape:?}"), &report);
    }
}

#[test]
fn batchnorm_eval_gradients() {
    let mut store = store_of(vec![
        ("x", normal(&[3, 2, 2, 2], 15)),
        ("gamma", normal(&[2], 16)),
        ("beta", normal(&[2], 17)),
    ]);
    let probe = normal(&[3, 2, 2, 2], 18);
    let mut state = BatchNormState::new(2);
    state.running_mean = vec![0.3, -0.2];
    state.running_var = vec![1.5, 0.7];
    let report = finite_diff_check(
        |s, tape| {
            let (x, g, b) = (
                tape.param(s, ParamId(0)),
                tape.param(s, ParamId(1)),
                tape.param(s, ParamId(2)),
            );
            let mut st = state.clone();
            let y = layer_ops::batchnorm(tape, x, g, b, &mut st, Phase::Eval)?;
            ops::weighted_sum(tape, y, &probe)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("batchnorm eval", &report);
}

#[test]
fn dropout_gradients() {
    let mut store = store_of(vec![("x", normal(&[4, 6], 19))]);
    let probe = normal(&[4, 6], 20);
    let key = NoiseKey::new(5, 1 << 20, 3, 0);
    let report = finite_diff_check(
        |s, tape| {
            let x = tape.param(s, ParamId(0));
            let y = layer_ops::dropout(tape, x, 0.5, Phase::Train, key)?;
            ops::weighted_sum(tape, y, &probe)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("dropout", &report);
}

#[test]
fn cross_entropy_gradients() {
    let mut store = store_of(vec![("logits", normal(&[5, 4], 21))]);
    let labels = [0, 3, 1, 1, 2];
    let report = finite_diff_check(
        |s, tape| {
            let z = tape.param(s, ParamId(0));
            layer_ops::softmax_cross_entropy(tape, z, &labels)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("cross entropy", &report);
}

#[test]
fn deterministic_activation_gradients() {
    let probe = normal(&[3, 2, 2, 2], 22);
    for name in ["relu", "leaky", "swish"] {
        let mut store = store_of(vec![("x", away_from_zero(&[3, 2, 2, 2], 23, 0.05))]);
        let report = finite_diff_check(
            |s, tape| {
                let x = tape.param(s, ParamId(0));
                let y = match name {
                    "relu" => act_ops::relu(tape, x),
                    "leaky" => act_ops::leaky_relu(tape, x),
                    _ => act_ops::swish(tape, x),
                };
                ops::weighted_sum(tape, y, &probe)
            },
            &mut store,
            &strict(),
        )
        .unwrap();
        assert_passed(name, &report);
    }
}

#[test]
fn prelu_gradients() {
    let probe = normal(&[3, 2, 2, 2], 24);
    let mut store = store_of(vec![
        ("x", away_from_zero(&[3, 2, 2, 2], 25, 0.05)),
        ("slope", Tensor::from_f64(&[2], &[0.25, -0.4]).unwrap()),
    ]);
    let report = finite_diff_check(
        |s, tape| {
            let (x, a) = (tape.param(s, ParamId(0)), tape.param(s, ParamId(1)));
            let y = act_ops::prelu(tape, x, a)?;
            ops::weighted_sum(tape, y, &probe)
        },
        &mut store,
        &strict(),
    )
    .unwrap();
    assert_passed("prelu", &report);
}

fn probact_store(mode: SigmaMode, site: &[usize], batch: usize) -> (ParamStore<f64>, ProbActConfig) {
    let cfg = ProbActConfig::new(mode);
    let mut shape = vec![batch];
    shape.extend_from_slice(site);
    let mut entries = vec![("x", away_from_zero(&shape, 26, 0.05))];
    if let Some(ps) = cfg.param_shape(site) {
        let init = match mode {
            SigmaMode::Single => Tensor::from_f64(&ps, &[0.37]).unwrap(),
            _ => normal(&ps, 27).map(|v| 0.4 * v),
        };
        entries.push(("sigma", init));
    }
    (store_of(entries), cfg)
}

#[test]
fn probact_gradients_under_frozen_noise() {
    let site = [2, 3, 3];
    let probe = normal(&[2, 2, 3, 3], 28);
    let key = NoiseKey::new(99, 4, 17, 0);
    for mode in [
        SigmaMode::Fixed { sigma: 0.8 },
        SigmaMode::Single,
        SigmaMode::ElementwiseUnbound,
        SigmaMode::bounded(),
    ] {
        let (mut store, cfg) = probact_store(mode, &site, 2);
        let report = finite_diff_check(
            |s, tape| {
                let x = tape.param(s, ParamId(0));
                let p = (s.len() > 1).then(|| tape.param(s, ParamId(1)));
                let (y, _) = probact(tape, x, p, &cfg, key, Phase::Train)?;
                ops::weighted_sum(tape, y, &probe)
            },
            &mut store,
            &strict(),
        )
        .unwrap();
        assert_passed(&format!("{mode:?}"), &report);
    }
}

#[test]
fn probact_sigma_gradient_matches_within_1e6() {
    // E = y with a single element; the analytic gradient is the drawn eps.
    let cfg = ProbActConfig::new(SigmaMode::Single);
    let key = NoiseKey::new(1, 0, 0, 0);
    let mut store = store_of(vec![("sigma", Tensor::from_vec(vec![0.25]))]);
    let x = Tensor::from_f64(&[1, 1], &[0.7]).unwrap();
    let report = finite_diff_check(
        |s, tape| {
            let xi = tape.input(x.clone());
            let p = tape.param(s, ParamId(0));
            let (y, _) = probact(tape, xi, Some(p), &cfg, key, Phase::Train)?;
            Ok(ops::sum(tape, y))
        },
        &mut store,
        &probact::autodiff::GradCheckConfig {
            tolerance: 1e-6,
            ..strict()
        },
    )
    .unwrap();
    assert_passed("sigma", &report);
    let (_, rec) =
        probact::nn::probact_forward(&x, &cfg, Some(&Tensor::from_vec(vec![0.25])), key, Phase::Train).unwrap();
    assert_eq!(report.params[0].analytic, rec.eps.item());
}

#[test]
fn bounded_k_gradient_at_zero_is_two_and_a_half_eps() {
    let cfg = ProbActConfig::new(SigmaMode::bounded());
    let key = NoiseKey::new(2, 0, 0, 0);
    let x = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
    let mut store = store_of(vec![("k", Tensor::from_f64(&[1], &[0.0]).unwrap())]);
    let report = finite_diff_check(
        |s, tape| {
            let xi = tape.input(x.clone());
            let p = tape.param(s, ParamId(0));
            let (y, _) = probact(tape, xi, Some(p), &cfg, key, Phase::Train)?;
            Ok(ops::sum(tape, y))
        },
        &mut store,
        &probact::autodiff::GradCheckConfig {
            tolerance: 1e-6,
            ..strict()
        },
    )
    .unwrap();
    assert_passed("k", &report);
    let (_, rec) = probact::nn::probact_forward(
        &x,
        &cfg,
        Some(&Tensor::from_f64(&[1], &[0.0]).unwrap()),
        key,
        Phase::Train,
    )
    .unwrap();
    assert!((report.params[0].analytic - 2.5 * rec.eps.item()).abs() < 1e-12);
}

fn model_check(spec: ModelSpec, activation: Activation, input: [usize; 3], batch: usize, max: usize) {
    let opts = ModelOptions {
        classes: 3,
        input: input.to_vec(),
        dropout: Some(0.3),
        weight_seed: 5,
    };
    let mut model = build_model::<f64>(&spec, activation, opts).unwrap();
    // Move trainable sigmas away from zero so their gradients are not trivially tiny.
    for p in model.params.iter_mut() {
        if p.name == "sigma" {
            p.value = Tensor::from_vec(vec![0.3]);
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(&input);
    let x = normal(&shape, 30);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    // A conv bias followed by batch norm has an exact zero gradient, which a
    // relative test cannot resolve below rounding noise; those are checked
    // on their own with an absolute bound.
    let cancelled = |name: &str| name.starts_with("conv") && name.ends_with(".bias");
    let mut store = model.params.clone();
    let mut loss = |s: &ParamStore<f64>, tape: &mut Tape<f64>| {
        model.params = s.clone();
        let out = model.forward(tape, x.clone(), Phase::Train, EvalMode::Stochastic, 41, 3, 0)?;
        layer_ops::softmax_cross_entropy(tape, out, &labels)
    };
    for p in store.iter_mut() {
        p.trainable = !cancelled(&p.name);
    }
    let report = finite_diff_check(&mut loss, &mut store, &sampled(max)).unwrap();
    assert_passed(&format!("{spec} with {}", activation.label()), &report);

    for p in store.iter_mut() {
        p.trainable = cancelled(&p.name);
    }
    let biases = finite_diff_check(&mut loss, &mut store, &sampled(max)).unwrap();
    for b in &biases.params {
        assert!(
            b.analytic.abs() < 1e-12 && (b.analytic - b.numeric).abs() < 1e-9,
            "{biases}"
        );
    }
    assert_eq!(report.params.len() + biases.params.len(), store.len());
}

#[test]
fn vgg_lite_one_batch_all_parameters() {
    let bounded = Activation::probact(ProbActConfig::new(SigmaMode::bounded()));
    model_check(ModelSpec::vgg_lite(), bounded, [3, 16, 16], 3, 4);
}

#[test]
fn small_models_every_activation() {
    let spec = ModelSpec::from_tokens("tiny", "[4,M,FC6,C]").unwrap();
    for act in [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Prelu,
        Activation::Swish,
        Activation::probact(ProbActConfig::fixed(0.5)),
        Activation::probact(ProbActConfig::new(SigmaMode::Single)),
        Activation::probact(ProbActConfig::new(SigmaMode::ElementwiseUnbound)),
        Activation::probact(ProbActConfig::new(SigmaMode::bounded())),
    ] {
        model_check(spec.clone(), act, [2, 4, 4], 4, 6);
    }
}

#[test]
fn parameter_used_twice_gets_both_path_gradients() {
    // f(w) = sum(w * w) built from two uses of one parameter equals the
    // same expression with a duplicated, separately tracked parameter.
    let w0 = normal(&[5], 31);
    let mut shared = store_of(vec![("w", w0.clone())]);
    let mut tape = Tape::new();
    let a = tape.param(&shared, ParamId(0));
    let b = tape.param(&shared, ParamId(0));
    let y = ops::mul(&mut tape, a, b).unwrap();
    let root = ops::sum(&mut tape, y);
    tape.backward(root, &Tensor::scalar(1.0), &mut shared).unwrap();

    let mut split = store_of(vec![("w1", w0.clone()), ("w2", w0.clone())]);
    let mut tape = Tape::new();
    let a = tape.param(&split, ParamId(0));
    let b = tape.param(&split, ParamId(1));
    let y = ops::mul(&mut tape, a, b).unwrap();
    let root = ops::sum(&mut tape, y);
    tape.backward(root, &Tensor::scalar(1.0), &mut split).unwrap();

    let summed = split.grad(ParamId(0)).add(split.grad(ParamId(1))).unwrap();
    assert_eq!(shared.grad(ParamId(0)), &summed);
}

#[test]
fn backward_is_repeatable_and_single_use() {
    let cfg = ProbActConfig::new(SigmaMode::ElementwiseUnbound);
    let key = NoiseKey::new(8, 2, 5, 0);
    let grads: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let (mut store, _) = probact_store(SigmaMode::ElementwiseUnbound, &[4], 3);
            let mut tape = Tape::new();
            let x = tape.param(&store, ParamId(0));
            let p = tape.param(&store, ParamId(1));
            let (y, _) = probact(&mut tape, x, Some(p), &cfg, key, Phase::Train).unwrap();
            let root = ops::sum(&mut tape, y);
            tape.backward(root, &Tensor::scalar(1.0), &mut store).unwrap();
            let again = tape.backward(root, &Tensor::scalar(1.0), &mut store);
            assert!(matches!(again, Err(Error::Usage(_))));
            store.grad(ParamId(1)).clone()
        })
        .collect();
    assert_eq!(grads[0], grads[1]);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x = normal(&[2, 3, 8, 8], 32);
    let k = normal(&[4, 3, 3, 3], 33);
    let b = normal(&[4], 34);
    let y = layers::conv2d(&x, &k, &b, 1).unwrap();
    assert_eq!(y.shape(), &[2, 4, 8, 8]);
    let at = |n: usize, c: usize, i: isize, j: isize| -> f64 {
        if (0..8).contains(&i) && (0..8).contains(&j) {
            x.data()[((n * 3 + c) * 8 + i as usize) * 8 + j as usize]
        } else {
            0.0
        }
    };
    for n in 0..2 {
        for o in 0..4 {
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = b.data()[o];
                    for c in 0..3 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let kv = k.data()[((o * 3 + c) * 3 + di) * 3 + dj];
                                acc += kv * at(n, c, i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            }
                        }
                    }
                    let got = y.data()[((n * 4 + o) * 8 + i) * 8 + j];
                    assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0), "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn batchnorm_training_output_is_normalized() {
    let x = normal(&[8, 3, 4, 4], 35).map(|v| 3.0 * v + 2.0);
    let mut state = BatchNormState::new(3);
    let (y, _) = layers::batchnorm(
        &x,
        &Tensor::full(&[3], 1.0),
        &Tensor::zeros(&[3]),
        &mut state,
        Phase::Train,
    )
    .unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|n| {
                let start = (n * 3 + c) * 16;
                y.data()[start..start + 16].to_vec()
            })
            .collect();
        let (m, s) = common::mean_std(&vals);
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((s * s - 1.0).abs() < 1e-4, "var {}", s * s);
    }
}
