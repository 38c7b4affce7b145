use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{run_training_on, ActivationConfig, RunConfig, Seeds};
use crate::data::stratified_subset;
use crate::error::{Error, Result};
use crate::tensor::derive_seed;

/// One training run of the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub fraction: f64,
    pub activation: String,
    pub repeat: usize,
    pub seeds: Seeds,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gamma: f64,
    pub mean_epoch_seconds: f64,
}

/// Mean over repeats for one (fraction, activation) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub fraction: f64,
    pub activation: String,
    pub mean_test_acc: f64,
    pub mean_gamma: f64,
    pub mean_epoch_seconds: f64,
    /// Epoch time relative to the ReLU runs of the same fraction.
    pub time_vs_relu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub rows: Vec<SuiteRow>,
    pub cells: Vec<SuiteCell>,
}

impl SuiteSummary {
    pub fn cell(&self, fraction: f64, activation: &str) -> Option<&SuiteCell> {
        self.cells
            .iter()
            .find(|c| c.fraction == fraction && c.activation == activation)
    }
}

/// Seeds of repeat `r`: every stream is re-derived except the synthetic
/// data generator, so all repeats share one base dataset.
pub fn repeat_seeds(base: &Seeds, r: usize) -> Seeds {
    let r = r as u64;
    Seeds {
        weights: derive_seed(base.weights, r),
        noise: derive_seed(base.noise, r),
        subset: derive_seed(base.subset, r),
        shuffle: derive_seed(base.shuffle, r),
        data: base.data,
    }
}

/// For each fraction and repeat, draws one stratified subset and trains
/// every activation in `activations` on it. With `out` set, writes
/// `suite_runs.csv` and `suite_summary.csv` there and each run's files in
/// `<fraction>/<activation>/repeat<r>/`.
pub fn run_reduced_data_suite(
    base: &RunConfig,
    fractions: &[f64],
    repeats: usize,
    activations: &[ActivationConfig],
    out: Option<&Path>,
) -> Result<SuiteSummary> {
    if repeats == 0 || activations.is_empty() || fractions.is_empty() {
        return Err(Error::Argument(
            "the suite needs fractions, repeats and activations".into(),
        ));
    }
    base.validate()?;
    let (full_train, test) = base.dataset.load(base.seeds.data)?;
    let mut rows = Vec::new();
    for &fraction in fractions {
        for r in 0..repeats {
            let seeds = repeat_seeds(&base.seeds, r);
            let train = stratified_subset(&full_train, fraction, seeds.subset)?;
            for act in activations {
                let mut cfg = base.clone();
                cfg.activation = act.clone();
                cfg.fraction = fraction;
                cfg.seeds = seeds;
                cfg.out_dir = out.map(|o| {
                    o.join(format!("{fraction}"))
                        .join(act.label())
                        .join(format!("repeat{r}"))
                });
                info!("suite: fraction {fraction}, {}, repeat {r}", act.label());
                let outcome = run_training_on(&cfg, &train, &test)?;
                let last = outcome
                    .metrics
                    .final_epoch()
                    .cloned()
                    .ok_or_else(|| Error::Config("the suite needs at least one epoch".into()))?;
                rows.push(SuiteRow {
                    fraction,
                    activation: act.label(),
                    repeat: r,
                    seeds,
                    train_acc: last.train_acc,
                    test_acc: last.test_acc,
                    gamma: outcome.metrics.gamma,
                    mean_epoch_seconds: outcome.metrics.mean_epoch_seconds(),
                });
            }
        }
    }

    let mut cells = Vec::new();
    for &fraction in fractions {
        let relu_time = mean_of(&rows, fraction, "relu", |r| r.mean_epoch_seconds);
        for act in activations {
            let label = act.label();
            let time = mean_of(&rows, fraction, &label, |r| r.mean_epoch_seconds).unwrap_or(0.0);
            cells.push(SuiteCell {
                fraction,
                mean_test_acc: mean_of(&rows, fraction, &label, |r| r.test_acc).unwrap_or(f64::NAN),
                mean_gamma: mean_of(&rows, fraction, &label, |r| r.gamma).unwrap_or(f64::NAN),
                mean_epoch_seconds: time,
                time_vs_relu: relu_time.filter(|t| *t > 0.0).map(|t| time / t),
                activation: label,
            });
        }
    }
    let summary = SuiteSummary { rows, cells };
    if let Some(dir) = out {
        write_suite(dir, &summary)?;
    }
    Ok(summary)
}

fn mean_of(rows: &[SuiteRow], fraction: f64, label: &str, f: impl Fn(&SuiteRow) -> f64) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.fraction == fraction && r.activation == label)
        .map(f)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn write_suite(dir: &Path, s: &SuiteSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("suite_runs.csv"))?;
    w.write_record([
        "fraction",
        "activation",
        "repeat",
        "subset_seed",
        "weight_seed",
        "noise_seed",
        "shuffle_seed",
        "train_acc",
        "test_acc",
        "gamma",
    ])?;
    for r in &s.rows {
        w.write_record([
            r.fraction.to_string(),
            r.activation.clone(),
            r.repeat.to_string(),
            r.seeds.subset.to_string(),
            r.seeds.weights.to_string(),
            r.seeds.noise.to_string(),
            r.seeds.shuffle.to_string(),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
            r.gamma.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("suite_summary.csv"))?;
    w.write_record([
        "fraction",
        "activation",
        "mean_test_acc",
        "mean_gamma",
        "mean_epoch_seconds",
        "time_vs_relu",
    ])?;
    for c in &s.cells {
        w.write_record([
            c.fraction.to_string(),
            c.activation.clone(),
            c.mean_test_acc.to_string(),
            c.mean_gamma.to_string(),
            c.mean_epoch_seconds.to_string(),
            c.time_vs_relu.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
