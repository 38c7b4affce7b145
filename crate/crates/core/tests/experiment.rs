mod common;

use std::fs;

use common::{blobs, small_run};
use probact::experiment::{
    evaluate, evaluate_checkpoint, export_k_histogram, export_sigma_trajectory, gamma, read_histogram,
    run_reduced_data_suite, run_training, run_training_on, swap_activation, ActivationConfig, DatasetConfig, HistSpace,
    RunConfig,
};
use probact::nn::{build_model, Activation, EvalMode, ModelOptions, ModelSpec};
use probact::optim::OptimizerKind;
use probact::Error;

#[test]
fn vgg_lite_relu_fits_blobs() {
    let out = run_training(&small_run("vgg-lite", ActivationConfig::named("relu"), 5)).unwrap();
    let last = out.metrics.final_epoch().unwrap();
    assert!(last.train_acc > 95.0, "train accuracy {}", last.train_acc);
    assert_eq!(out.metrics.epochs.len(), 5);
}

#[test]
fn identical_configs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run("mlp", ActivationConfig::named("probact:bounded"), 3);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let files = [
        "metrics.csv",
        "metrics.json",
        "config.json",
        "sigma_trajectory.csv",
        "k_hist_layer0.csv",
        "checkpoint.bin",
    ];
    run_training(&cfg).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    run_training(&cfg).unwrap();
    for (f, a) in files.iter().zip(&first) {
        assert!(
            &fs::read(dir.path().join(f)).unwrap() == a,
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn fixed_sigma_one_trains_with_finite_loss() {
    let out = run_training(&small_run("vgg-lite", ActivationConfig::fixed(1.0), 3)).unwrap();
    for e in &out.metrics.epochs {
        assert!(e.train_loss.is_finite() && e.test_loss.is_finite(), "{e:?}");
    }
}

#[test]
fn diverging_run_reports_epoch_and_batch() {
    let mut cfg = small_run("mlp", ActivationConfig::named("relu"), 2);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.schedule.base = 1e30;
    match run_training(&cfg) {
        Err(Error::NonFiniteLoss { epoch, .. }) => assert_eq!(epoch, 0),
        Err(e) => panic!("expected a non-finite loss error, got {e}"),
        Ok(_) => panic!("a diverging run finished"),
    }
}

#[test]
fn gamma_matches_final_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run("mlp", ActivationConfig::named("swish"), 2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_training(&cfg).unwrap();
    let last = out.metrics.final_epoch().unwrap();
    assert_eq!(out.metrics.gamma, gamma(last.train_acc, last.test_acc));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let final_row = csv.lines().last().unwrap();
    let g: f64 = final_row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(g, out.metrics.gamma);
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,lr,train_loss,train_acc,test_loss,test_acc,gamma"
    );
}

#[test]
fn zero_classifier_scores_chance_on_ten_balanced_classes() {
    let data = blobs(200, 10, 0.3, 4);
    let opts = ModelOptions {
        classes: 10,
        input: data.sample_shape().to_vec(),
        dropout: None,
        weight_seed: 1,
    };
    let mut model = build_model::<f32>(&ModelSpec::mlp(), Activation::Relu, opts).unwrap();
    for p in model.params.iter_mut() {
        if p.name.starts_with("classifier.") {
            p.value = p.value.map(|_| 0.0);
        }
    }
    let r = evaluate(&mut model, &data, EvalMode::Stochastic, 0, 0, 64).unwrap();
    assert_eq!(r.accuracy, 10.0);
}

fn noisy_run(activation: ActivationConfig) -> RunConfig {
    let mut cfg = small_run("mlp", activation, 4);
    cfg.dataset = DatasetConfig::Synthetic {
        shape: probact::data::SyntheticKind::Blobs,
        train: 512,
        test: 512,
        classes: 4,
        noise: 1.5,
        lift: 1,
    };
    cfg
}

#[test]
fn evaluation_modes() {
    let cfg = noisy_run(ActivationConfig::fixed(1.0));
    let (_, test) = cfg.load_data().unwrap();
    let out = run_training(&cfg).unwrap();
    let ck = &out.checkpoint;
    let acc = |mode: EvalMode, id: u64| evaluate_checkpoint(ck, &test, mode, 5, id, 128).unwrap().accuracy;

    assert_eq!(acc(EvalMode::Mean, 0), acc(EvalMode::Mean, 1));
    assert_eq!(acc(EvalMode::Stochastic, 3), acc(EvalMode::Stochastic, 3));

    let var = |v: &[f64]| {
        let (_, s) = common::mean_std(v);
        s * s
    };
    let single: Vec<f64> = (0..12).map(|i| acc(EvalMode::Stochastic, 100 + i)).collect();
    let averaged: Vec<f64> = (0..12).map(|i| acc(EvalMode::McAverage(16), 100 + i)).collect();
    assert!(
        var(&averaged) < var(&single),
        "mc:16 variance {} vs single {}",
        var(&averaged),
        var(&single)
    );
    for a in single.iter().chain(&averaged) {
        assert!((0.0..=100.0).contains(a));
    }
}

#[test]
fn swap_equals_mean_mode_for_single_and_fixed() {
    for act in [ActivationConfig::fixed(0.5), ActivationConfig::named("probact:single")] {
        let cfg = noisy_run(act);
        let (_, test) = cfg.load_data().unwrap();
        let out = run_training(&cfg).unwrap();
        let swapped = swap_activation(&out.checkpoint, Activation::Relu).unwrap();
        assert_eq!(swapped.meta.activation, Activation::Relu);
        let mean = evaluate_checkpoint(&out.checkpoint, &test, EvalMode::Mean, 1, 0, 128).unwrap();
        let a = evaluate_checkpoint(&swapped, &test, EvalMode::Stochastic, 1, 0, 128).unwrap();
        let b = evaluate_checkpoint(&swapped, &test, EvalMode::Stochastic, 2, 9, 128).unwrap();
        assert_eq!(a, mean);
        assert_eq!(a, b);
        // Weights survive unchanged.
        for (name, t) in &swapped.params {
            let orig = out.checkpoint.params.iter().find(|(n, _)| n == name).unwrap();
            assert_eq!(t, &orig.1);
        }
        assert!(swapped.params.iter().all(|(n, _)| n != "sigma"));
    }
}

#[test]
fn sigma_trajectory_export() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run("mlp", ActivationConfig::named("probact:single"), 4);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_training(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("sigma_trajectory.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "epoch,sigma");
    assert_eq!(rows[1], "0,0");
    assert_eq!(rows.len(), 1 + 1 + 4);
    for (i, r) in rows[1..].iter().enumerate() {
        assert!(r.starts_with(&format!("{i},")));
    }

    let relu = run_training(&small_run("mlp", ActivationConfig::named("relu"), 1)).unwrap();
    let err = export_sigma_trajectory(&relu.metrics, &dir.path().join("x.csv")).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    let fixed = run_training(&small_run("mlp", ActivationConfig::fixed(0.2), 1)).unwrap();
    assert!(matches!(
        export_sigma_trajectory(&fixed.metrics, &dir.path().join("x.csv")),
        Err(Error::Usage(_))
    ));
    assert!(out.metrics.sigma.iter().all(|s| s.len() == 2));
}

#[test]
fn elementwise_trajectory_has_one_column_per_site() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run("mlp", ActivationConfig::named("probact:unbound"), 2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    run_training(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("sigma_trajectory.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].split(',').count(), 3);
}

#[test]
fn k_histograms_conserve_counts_and_respect_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run("vgg-lite", ActivationConfig::named("probact:bounded"), 2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_training(&cfg).unwrap();
    let model = out.checkpoint.model().unwrap();
    let sizes: Vec<usize> = model
        .site_params()
        .iter()
        .map(|p| model.params.value(p.unwrap()).len())
        .collect();
    assert_eq!(sizes.len(), 6);

    for (i, n) in sizes.iter().enumerate() {
        let h = read_histogram(&dir.path().join(format!("k_hist_layer{i}.csv"))).unwrap();
        assert_eq!(h.total() as usize, *n);
    }
    let sdir = dir.path().join("sigma_space");
    let paths = export_k_histogram(&out.checkpoint, 30, HistSpace::Sigma, &sdir).unwrap();
    assert_eq!(paths.len(), sizes.len());
    for (p, n) in paths.iter().zip(&sizes) {
        let h = read_histogram(p).unwrap();
        assert_eq!(h.total() as usize, *n);
        let (lo, hi) = (h.edges[0], *h.edges.last().unwrap());
        assert!(lo > 0.0 && hi < 2.0, "support [{lo}, {hi}]");
    }

    let relu = run_training(&small_run("mlp", ActivationConfig::named("relu"), 1)).unwrap();
    let err = export_k_histogram(&relu.checkpoint, 10, HistSpace::Raw, &sdir).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn checkpoint_rejects_mismatched_data() {
    let out = run_training(&small_run("mlp", ActivationConfig::named("relu"), 1)).unwrap();
    let wrong = blobs(30, 3, 0.1, 1);
    let err = evaluate_checkpoint(&out.checkpoint, &wrong, EvalMode::Mean, 0, 0, 10).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}

#[test]
fn checkpoint_file_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run("mlp", ActivationConfig::named("probact:single"), 2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_training(&cfg).unwrap();
    let loaded = probact::optim::Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
    let back: RunConfig = serde_json::from_value(loaded.meta.run.clone()).unwrap();
    assert_eq!(back, cfg);
    let json = fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert_eq!(RunConfig::parse(&json, true).unwrap(), cfg);
}

#[test]
fn reduced_suite_shares_subsets_and_logs_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_run("mlp", ActivationConfig::named("probact:bounded"), 1);
    let acts = [
        ActivationConfig::named("relu"),
        ActivationConfig::named("probact:bounded"),
    ];
    let summary = run_reduced_data_suite(&base, &[0.5, 0.25], 3, &acts, Some(dir.path())).unwrap();
    assert_eq!(summary.rows.len(), 2 * 3 * 2);
    assert_eq!(summary.cells.len(), 4);
    for fraction in [0.5, 0.25] {
        let mut seeds: Vec<u64> = summary
            .rows
            .iter()
            .filter(|r| r.fraction == fraction && r.activation == "relu")
            .map(|r| r.seeds.subset)
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 3, "each repeat needs its own subset seed");
        assert!(summary.cell(fraction, "relu").is_some());
        assert!(summary
            .cell(fraction, "probact-bounded")
            .unwrap()
            .time_vs_relu
            .is_some());
    }
    let runs = fs::read_to_string(dir.path().join("suite_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 12);
    assert!(runs.lines().next().unwrap().contains("subset_seed"));
    assert!(dir.path().join("suite_summary.csv").exists());
    assert!(dir.path().join("0.25/probact-bounded/repeat2/metrics.csv").exists());
}

#[test]
fn training_on_a_stratified_subset() {
    let mut cfg = small_run("mlp", ActivationConfig::named("relu"), 1);
    cfg.fraction = 0.25;
    let (train, test) = cfg.load_data().unwrap();
    assert_eq!(train.len(), 64);
    assert!(train.class_counts().iter().all(|&c| c == 16));
    let out = run_training_on(&cfg, &train, &test).unwrap();
    assert_eq!(out.metrics.epochs.len(), 1);
}
