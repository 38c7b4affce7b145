//! Datasets: the CIFAR binary format, synthetic point sets, stratified
//! subsets and shuffled mini-batches.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, NoiseKey, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Labeled images `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(shape, data), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn files(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            CifarVariant::Cifar10 => (
                &[
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                &["test_batch.bin"],
            ),
            CifarVariant::Cifar100 => (&["train.bin"], &["test.bin"]),
        }
    }
}

/// Decodes CIFAR records. CIFAR-100 uses the fine label (second byte).
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!("truncated record: {} of {rec} bytes", bytes.len() - whole),
        });
    }
    let n = bytes.len() / rec;
    let classes = variant.classes();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: (i * rec + variant.label_bytes() - 1) as u64,
                message: format!("label {label} out of range for {classes} classes"),
            });
        }
        labels.push(label);
        pixels.extend(r[variant.label_bytes()..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(
        Tensor::from_parts(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels),
        labels,
        classes,
    )
}

fn read_split(dir: &Path, names: &[&str], variant: CifarVariant) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for name in names {
        let path = dir.join(name);
        let chunk = fs::read(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        if chunk.len() % variant.record_len() != 0 {
            let whole = chunk.len() / variant.record_len() * variant.record_len();
            return Err(Error::Format {
                offset: whole as u64,
                message: format!("{}: truncated record", path.display()),
            });
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes, variant)
}

/// Loads the `(train, test)` splits from the standard binary files in `dir`.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let (train, test) = variant.files();
    Ok((read_split(dir, train, variant)?, read_split(dir, test, variant)?))
}

/// Indices of a class-balanced subset: `floor(fraction * n_c)` of each
/// class, where `n_c` is the smallest class count. Sorted ascending.
pub fn stratified_indices(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("subset fraction {fraction} not in (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let smallest = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let take = (fraction * smallest as f64 + 1e-9).floor() as usize;
    let mut picked = Vec::with_capacity(take * classes);
    for (c, idx) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn stratified_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let idx = stratified_indices(&dataset.labels, dataset.classes, fraction, seed)?;
    Ok(dataset.subset(&idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Blobs,
    Spirals,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "gaussian-blobs" => Ok(SyntheticKind::Blobs),
            "spirals" => Ok(SyntheticKind::Spirals),
            _ => Err(Error::Argument(format!("unknown synthetic dataset '{s}'"))),
        }
    }
}

/// Balanced 2-D point set. Each point becomes a `[2, lift, lift]` image
/// whose two channels are constant planes holding the coordinates.
pub fn synthetic_dataset(
    kind: SyntheticKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
    lift: usize,
) -> Result<Dataset> {
    if classes == 0 || !n.is_multiple_of(classes) {
        return Err(Error::Argument(format!(
            "{n} samples cannot be split evenly into {classes} classes"
        )));
    }
    if lift == 0 {
        return Err(Error::Argument("lift must be at least 1".into()));
    }
    let key = NoiseKey::new(seed, 0, 0, 0);
    let tau = std::f64::consts::TAU;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (nx, ny) = (key.normal(2 * i as u64), key.normal(2 * i as u64 + 1));
        let (x, y) = match kind {
            SyntheticKind::Blobs => {
                let a = tau * c as f64 / classes as f64;
                (3.0 * a.cos(), 3.0 * a.sin())
            }
            SyntheticKind::Spirals => {
                let t = key.with_draw(1).uniform(i as u64);
                let a = 1.75 * tau * t + tau * c as f64 / classes as f64;
                (t * a.cos(), t * a.sin())
            }
        };
        points.push([x + noise * nx, y + noise * ny]);
        labels.push(c);
    }
    let plane = lift * lift;
    let mut data = Vec::with_capacity(n * 2 * plane);
    for p in &points {
        for v in p {
            data.extend(std::iter::repeat_n(*v as f32, plane));
        }
    }
    Dataset::new(Tensor::from_parts(vec![n, 2, lift, lift], data), labels, classes)
}

/// A permutation of `0..n` that depends only on `(seed, epoch)`.
pub fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Index lists of the mini-batches for one epoch; the last one may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    Ok(shuffled_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Shuffled mini-batches `(images, labels)` for one epoch.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_> {
    let idx = batch_indices(dataset.len(), batch_size, seed, epoch)?;
    Ok(idx.into_iter().map(move |b| dataset.gather(&b)))
}

/// Sequential, unshuffled batches for evaluation.
pub fn ordered_batches(dataset: &Dataset, batch_size: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_ {
    let bs = batch_size.max(1);
    (0..dataset.len()).step_by(bs).map(move |s| {
        let idx: Vec<usize> = (s..(s + bs).min(dataset.len())).collect();
        dataset.gather(&idx)
    })
}
