#![allow(dead_code)]

use probact::autodiff::{GradCheckConfig, GradCheckReport, Tape};
use probact::data::{synthetic_dataset, SyntheticKind};
use probact::experiment::{ActivationConfig, DatasetConfig, RunConfig, Seeds};
use probact::nn::layers::ops::dense;
use probact::nn::probact::probact;
use probact::nn::{Phase, ProbActConfig};
use probact::tensor::sample_standard_normal;
use probact::{NoiseKey, Tensor};

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    sample_standard_normal(shape, NoiseKey::new(seed, 7, 0, 0))
}

/// Normal values pushed at least `margin` away from zero, so kinks at 0
/// stay out of reach of finite-difference steps.
pub fn away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    normal(shape, seed).map(move |v| v + margin * v.signum())
}

/// Values on a shuffled grid with spacing `gap`, so max-pool windows never
/// hold near-ties.
pub fn spaced(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let key = NoiseKey::new(seed, 9, 0, 0);
    let mut order: Vec<(f64, usize)> = (0..n).map(|i| (key.uniform(i as u64), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut data = vec![0.0; n];
    for (rank, (_, i)) in order.into_iter().enumerate() {
        data[i] = (rank as f64 - n as f64 / 2.0) * gap;
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn strict() -> GradCheckConfig {
    GradCheckConfig::default()
}

pub fn sampled(max: usize) -> GradCheckConfig {
    GradCheckConfig {
        max_elements: Some(max),
        ..GradCheckConfig::default()
    }
}

pub fn assert_passed(what: &str, report: &GradCheckReport) {
    assert!(report.passed(), "{what}:\n{report}");
}

/// Small synthetic run used by the end-to-end tests.
pub fn small_run(model: &str, activation: ActivationConfig, epochs: usize) -> RunConfig {
    RunConfig {
        model: model.into(),
        activation,
        dataset: DatasetConfig::Synthetic {
            shape: SyntheticKind::Blobs,
            train: 256,
            test: 128,
            classes: 4,
            noise: 0.5,
            lift: 8,
        },
        epochs,
        batch_size: 64,
        seeds: Seeds::from_base(11),
        ..RunConfig::default()
    }
}

pub fn blobs(n: usize, classes: usize, noise: f64, seed: u64) -> probact::data::Dataset {
    synthetic_dataset(SyntheticKind::Blobs, n, classes, noise, seed, 1).unwrap()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Writes a CIFAR-10 style directory: five training files of `per_file`
/// records and a test file of `test` records, labels cycling through 0..10.
pub fn write_cifar10_fixture(dir: &std::path::Path, per_file: usize, test: usize) {
    let record = |i: usize| {
        let mut r = Vec::with_capacity(3073);
        r.push((i % 10) as u8);
        r.extend((0..3072).map(|p| ((i * 31 + p * 7) % 256) as u8));
        r
    };
    let names = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ];
    for (f, name) in names.iter().enumerate() {
        let bytes: Vec<u8> = (0..per_file).flat_map(|i| record(f * per_file + i)).collect();
        std::fs::write(dir.join(name), bytes).unwrap();
    }
    let bytes: Vec<u8> = (0..test).flat_map(record).collect();
    std::fs::write(dir.join("test_batch.bin"), bytes).unwrap();
}

/// Two stacked dense + stochastic units, one row per independent draw.
pub fn two_layer(x: f64, w1: f64, w2: f64, s1: f64, s2: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let input = tape.input(Tensor::full(&[n, 1], x));
    let w1 = tape.input(Tensor::full(&[1, 1], w1));
    let w2 = tape.input(Tensor::full(&[1, 1], w2));
    let zero = tape.input(Tensor::zeros(&[1]));
    let h = dense(&mut tape, input, w1, zero).unwrap();
    let (y1, _) = probact(
        &mut tape,
        h,
        None,
        &ProbActConfig::fixed(s1),
        NoiseKey::new(17, 0, 0, 0),
        Phase::Train,
    )
    .unwrap();
    let pre2 = dense(&mut tape, y1, w2, zero).unwrap();
    let (y2, _) = probact(
        &mut tape,
        pre2,
        None,
        &ProbActConfig::fixed(s2),
        NoiseKey::new(17, 1, 0, 0),
        Phase::Train,
    )
    .unwrap();
    (tape.value(pre2).data().to_vec(), tape.value(y2).data().to_vec())
}
