use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunMetrics;
use crate::error::{Error, Result};
use crate::nn::SigmaMode;
use crate::optim::Checkpoint;

/// Equal-width histogram; the last bin includes its upper edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

/// Which values a parameter histogram is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistSpace {
    /// The trained parameter itself (`k` in bounded mode).
    Raw,
    /// The effective noise scale.
    Sigma,
}

impl FromStr for HistSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "k" => Ok(HistSpace::Raw),
            "sigma" => Ok(HistSpace::Sigma),
            _ => Err(Error::Argument(format!("histogram space '{s}' (expected k or sigma)"))),
        }
    }
}

/// One histogram CSV per stochastic site, `k_hist_layer<i>.csv` in `dir`.
pub fn export_k_histogram(checkpoint: &Checkpoint, bins: usize, space: HistSpace, dir: &Path) -> Result<Vec<PathBuf>> {
    let config = checkpoint
        .meta
        .activation
        .probact_config()
        .copied()
        .filter(|c| c.mode.is_elementwise())
        .ok_or_else(|| Error::usage("parameter histograms need an element-wise stochastic activation"))?;
    let model = checkpoint.model()?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, p) in model.site_params().into_iter().enumerate() {
        let raw = model.params.value(p.expect("element-wise site parameter"));
        let values = match space {
            HistSpace::Raw => raw.to_f64_vec(),
            HistSpace::Sigma => config.sigma_of(Some(&raw.cast::<f64>()))?.to_f64_vec(),
        };
        let path = dir.join(format!("k_hist_layer{i}.csv"));
        histogram(&values, bins).write_csv(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Epoch-to-sigma table of a trainable run: one `sigma` column in single
/// mode, the mean sigma of every site otherwise. Row 0 is the initial value.
pub fn export_sigma_trajectory(metrics: &RunMetrics, path: &Path) -> Result<()> {
    let mode = metrics
        .activation
        .probact_config()
        .map(|c| c.mode)
        .filter(SigmaMode::is_trainable)
        .ok_or_else(|| Error::usage("sigma trajectory needs a trainable stochastic activation"))?;
    let mut w = csv::Writer::from_path(path)?;
    let single = mode == SigmaMode::Single;
    let names: Vec<String> = metrics
        .sigma
        .first()
        .map(|s| s.iter().map(|x| x.name.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["epoch".to_string()];
    if single {
        header.push("sigma".into());
    } else {
        header.extend(names);
    }
    w.write_record(&header)?;
    for (epoch, stats) in metrics.sigma.iter().enumerate() {
        let mut row = vec![epoch.to_string()];
        if single {
            row.push(stats.first().map(|s| s.mean).unwrap_or(0.0).to_string());
        } else {
            row.extend(stats.iter().map(|s| s.mean.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "test_loss",
        "test_acc",
        "gamma",
    ])?;
    for e in &metrics.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_loss.to_string(),
            e.train_acc.to_string(),
            e.test_loss.to_string(),
            e.test_acc.to_string(),
            super::gamma(e.train_acc, e.test_acc).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sigma_stats_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "layer", "name", "mean", "std", "min", "max"])?;
    for (epoch, stats) in metrics.sigma.iter().enumerate() {
        for s in stats {
            w.write_record([
                epoch.to_string(),
                s.layer.to_string(),
                s.name.clone(),
                s.mean.to_string(),
                s.std.to_string(),
                s.min.to_string(),
                s.max.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_seconds", "eval_seconds"])?;
    for t in &metrics.timing {
        w.write_record([
            t.epoch.to_string(),
            t.train_seconds.to_string(),
            t.eval_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a histogram written by [`Histogram::write_csv`].
pub fn read_histogram(path: &Path) -> Result<Histogram> {
    let mut r = csv::Reader::from_path(path)?;
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
                offset: rec.position().map_or(0, |p| p.byte()),
                message: "bad histogram row".into(),
            })
        };
        if edges.is_empty() {
            edges.push(parse(0)?);
        }
        edges.push(parse(1)?);
        counts.push(parse(2)? as u64);
    }
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let h = histogram(&v, 17);
        assert_eq!(h.total(), 1000);
        assert_eq!(h.edges.len(), 18);
        let c = histogram(&[2.0, 2.0], 4);
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn histogram_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = histogram(&[0.0, 0.25, 0.5, 1.0], 4);
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        assert_eq!(read_histogram(&p).unwrap(), h);
    }
}
