//! Training runs, evaluation, the overfitting gap, sigma telemetry, the
//! activation swap and the reduced-data suite.

mod config;
mod report;
mod suite;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batch_indices, ordered_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::layers::{ops as layer_ops, softmax_cross_entropy};
use crate::nn::{build_model, Activation, EvalMode, Model, ModelOptions, Phase};
use crate::optim::{Checkpoint, OptimizerState};
use crate::tensor::{argmax_by, Tensor};

pub use config::{ActivationConfig, DatasetConfig, RunConfig, Seeds};
pub use report::{
    export_k_histogram, export_sigma_trajectory, histogram, read_histogram, write_metrics_csv, write_sigma_stats_csv,
    write_timing_csv, HistSpace, Histogram,
};
pub use suite::{run_reduced_data_suite, SuiteCell, SuiteRow, SuiteSummary};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Train minus test accuracy, in percentage points.
pub fn gamma(train_acc: f64, test_acc: f64) -> f64 {
    train_acc - test_acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Summary of the effective sigma of one stochastic site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaStats {
    pub layer: usize,
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub activation: Activation,
    pub epochs: Vec<EpochMetrics>,
    /// Final train accuracy minus final test accuracy.
    pub gamma: f64,
    /// Per-site sigma statistics, index 0 before training, then one entry
    /// per finished epoch.
    pub sigma: Vec<Vec<SigmaStats>>,
    pub k_histograms: Vec<Histogram>,
    /// Wall clock; excluded from equality-sensitive outputs.
    #[serde(skip)]
    pub timing: Vec<EpochTiming>,
}

impl RunMetrics {
    pub fn final_epoch(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.timing.is_empty() {
            return 0.0;
        }
        self.timing.iter().map(|t| t.train_seconds).sum::<f64>() / self.timing.len() as f64
    }
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub config: RunConfig,
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 prediction per row; ties go to the smallest class index.
pub fn predictions(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(|row| argmax_by(c, |j| row[j])).collect()
}

/// Accuracy (percent) and mean loss of `model` on `dataset`. `eval_id`
/// separates the noise of independent evaluations.
pub fn evaluate(
    model: &mut Model<f32>,
    dataset: &Dataset,
    eval: EvalMode,
    noise_seed: u64,
    eval_id: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let (mut correct, mut loss) = (0usize, 0.0f64);
    for (b, (x, y)) in ordered_batches(dataset, batch_size).enumerate() {
        let step = (eval_id << 24) | b as u64;
        let logits = model.predict(&x, eval, noise_seed, step)?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += f64::from(l) * y.len() as f64;
        correct += predictions(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(EvalResult {
        accuracy: 100.0 * correct as f64 / dataset.len() as f64,
        loss: loss / dataset.len() as f64,
    })
}

/// Rebuilds the checkpointed model and evaluates it on `dataset`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    eval: EvalMode,
    noise_seed: u64,
    eval_id: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    let opts = &checkpoint.meta.options;
    if dataset.sample_shape() != &opts.input[..] || dataset.classes != opts.classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {:?} inputs with {} classes, dataset has {:?} with {}",
            opts.input,
            opts.classes,
            dataset.sample_shape(),
            dataset.classes
        )));
    }
    let mut model = checkpoint.model()?;
    evaluate(&mut model, dataset, eval, noise_seed, eval_id, batch_size)
}

/// Replaces every activation site with `replacement`, keeping all other
/// weights, batch-norm statistics and the matching optimizer moments.
pub fn swap_activation(checkpoint: &Checkpoint, replacement: Activation) -> Result<Checkpoint> {
    let model = checkpoint.model()?;
    let swapped = model.with_activation(replacement)?;
    let mut opt = OptimizerState::new(checkpoint.optimizer.kind, &swapped.params);
    opt.step = checkpoint.optimizer.step;
    opt.lr = checkpoint.optimizer.lr;
    if !checkpoint.optimizer.first.is_empty() {
        for (i, (_, p)) in swapped.params.iter().enumerate() {
            if let Some(j) = checkpoint.params.iter().position(|(n, _)| *n == p.name) {
                opt.first[i] = checkpoint.optimizer.first[j].clone();
                opt.second[i] = checkpoint.optimizer.second[j].clone();
            }
        }
    }
    let mut out = Checkpoint::new(
        &swapped,
        &opt,
        checkpoint.meta.epoch,
        checkpoint.meta.noise_seed,
        checkpoint.meta.run.clone(),
    );
    out.meta.producer = checkpoint.meta.producer.clone();
    Ok(out)
}

/// Effective sigma statistics of every stochastic site.
pub fn sigma_stats(model: &Model<f32>) -> Result<Vec<SigmaStats>> {
    let sigmas = model.site_sigmas()?;
    Ok(model
        .probact_sites()
        .iter()
        .zip(sigmas)
        .enumerate()
        .map(|(layer, ((name, _), s))| {
            let v = s.to_f64_vec();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            SigmaStats {
                layer,
                name: name.clone(),
                mean,
                std: var.sqrt(),
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

/// Raw values of the element-wise sigma (or k) parameter of each site.
pub fn site_raw_values(model: &Model<f32>) -> Vec<Vec<f64>> {
    model
        .site_params()
        .into_iter()
        .map(|p| p.map(|id| model.params.value(id).to_f64_vec()).unwrap_or_default())
        .collect()
}

/// Trains `config` from scratch. When `config.out_dir` is set, writes
/// `metrics.csv`, `metrics.json`, `config.json`, `timing.csv`,
/// `sigma_stats.csv`, `sigma_trajectory.csv`, `k_hist_layer<i>.csv` and the
/// checkpoint there.
pub fn run_training(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let (train, test) = config.load_data()?;
    run_training_on(config, &train, &test)
}

/// As [`run_training`], with the data supplied by the caller.
pub fn run_training_on(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    if train.classes != test.classes || train.sample_shape() != test.sample_shape() {
        return Err(Error::Argument(
            "train and test splits disagree on shape or classes".into(),
        ));
    }
    let spec = config.model_spec()?;
    let activation = config.resolved_activation()?;
    let options = ModelOptions {
        classes: train.classes,
        input: train.sample_shape().to_vec(),
        dropout: config.dropout,
        weight_seed: config.seeds.weights,
    };
    let mut model = build_model::<f32>(&spec, activation, options)?;
    let mut opt = OptimizerState::new(config.optimizer, &model.params);
    let noise = config.seeds.noise;
    info!(
        "training {} with {} on {} samples, {} trainable values",
        spec,
        activation.label(),
        train.len(),
        model.params.num_elements(true)
    );

    let mut metrics = RunMetrics {
        activation,
        epochs: Vec::new(),
        gamma: 0.0,
        sigma: vec![sigma_stats(&model)?],
        k_histograms: Vec::new(),
        timing: Vec::new(),
    };
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch);
        let started = Instant::now();
        let (mut correct, mut seen, mut loss_sum) = (0usize, 0usize, 0.0f64);
        for (b, idx) in batch_indices(train.len(), config.batch_size, config.seeds.shuffle, epoch)?
            .into_iter()
            .enumerate()
        {
            if idx.len() < 2 && model.has_batch_norm() {
                continue;
            }
            let (x, y) = train.gather(&idx);
            model.params.zero_grad();
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, x, Phase::Train, config.eval_mode, noise, step, 0)?;
            let preds = predictions(tape.value(logits));
            let loss = layer_ops::softmax_cross_entropy(&mut tape, logits, &y)?;
            let lv = f64::from(tape.value(loss).item());
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            tape.backward(loss, &Tensor::scalar(1.0), &mut model.params)?;
            opt.update(&mut model.params, lr)?;
            correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += y.len();
            loss_sum += lv * y.len() as f64;
            step += 1;
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let test_result = evaluate(
            &mut model,
            test,
            config.eval_mode,
            noise,
            epoch as u64,
            config.eval_batch_size,
        )?;
        let eval_seconds = started.elapsed().as_secs_f64();
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: 100.0 * correct as f64 / seen.max(1) as f64,
            test_loss: test_result.loss,
            test_acc: test_result.accuracy,
        };
        info!(
            "epoch {} lr {} train loss {:.4} acc {:.2} | test loss {:.4} acc {:.2}",
            row.epoch, lr, row.train_loss, row.train_acc, row.test_loss, row.test_acc
        );
        metrics.epochs.push(row);
        metrics.sigma.push(sigma_stats(&model)?);
        metrics.timing.push(EpochTiming {
            epoch: epoch + 1,
            train_seconds,
            eval_seconds,
        });
    }
    if let Some(last) = metrics.epochs.last() {
        metrics.gamma = gamma(last.train_acc, last.test_acc);
    }
    if model
        .activation
        .probact_config()
        .is_some_and(|c| c.mode.is_elementwise())
    {
        metrics.k_histograms = site_raw_values(&model)
            .iter()
            .map(|v| histogram(v, config.histogram_bins))
            .collect();
    }

    let checkpoint = Checkpoint::new(&model, &opt, config.epochs, noise, serde_json::to_value(config)?);
    if let Some(dir) = &config.out_dir {
        write_run_outputs(dir, config, &metrics, &checkpoint)?;
    }
    Ok(RunOutcome {
        config: config.clone(),
        metrics,
        checkpoint,
    })
}

fn write_run_outputs(dir: &Path, config: &RunConfig, metrics: &RunMetrics, checkpoint: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), metrics)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(metrics)?)?;
    fs::write(dir.join("config.json"), config.to_json()?)?;
    write_timing_csv(&dir.join("timing.csv"), metrics)?;
    if metrics.activation.probact_config().is_some() {
        write_sigma_stats_csv(&dir.join("sigma_stats.csv"), metrics)?;
    }
    if metrics
        .activation
        .probact_config()
        .is_some_and(|c| c.mode.is_trainable())
    {
        export_sigma_trajectory(metrics, &dir.join("sigma_trajectory.csv"))?;
    }
    for (i, h) in metrics.k_histograms.iter().enumerate() {
        h.write_csv(&dir.join(format!("k_hist_layer{i}.csv")))?;
    }
    checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// Reads `metrics.json` from a run directory.
pub fn load_metrics(dir: &Path) -> Result<RunMetrics> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("metrics.json"))?)?)
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma(90.0, 60.0), 30.0);
        assert_eq!(gamma(71.5, 71.5), 0.0);
    }

    #[test]
    fn tie_break_smallest_index() {
        let logits = Tensor::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(predictions(&logits), vec![0, 1]);
    }
}
