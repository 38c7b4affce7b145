//! Dense, convolution, pooling, batch-norm and dropout layers with their
//! gradients, plus the softmax cross-entropy loss.
//!
//! Layouts are row-major: images are `[N, C, H, W]`, dense activations
//! `[N, features]`, dense weights `[out, in]`, conv kernels `[O, C, KH, KW]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probact::Phase;
use crate::autodiff::{Backward, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{argmax_by, gemm, gemm_abt, sample_uniform, transpose, NoiseKey, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------- dense

pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = match x.shape() {
        [n, f] => (*n, *f),
        s => return Err(Error::shape(format!("dense input must be [N, in], got {s:?}"))),
    };
    let fout = match w.shape() {
        [o, i] if *i == fin => *o,
        s => return Err(Error::shape(format!("dense weight {s:?} does not take {fin} inputs"))),
    };
    if b.shape() != [fout] {
        return Err(Error::shape(format!("dense bias {:?}, expected [{fout}]", b.shape())));
    }
    let mut out = vec![T::zero(); n * fout];
    for row in out.chunks_mut(fout) {
        row.copy_from_slice(b.data());
    }
    gemm_abt(n, fin, fout, x.data(), w.data(), &mut out);
    Tensor::new(vec![n, fout], out)
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut dx = vec![T::zero(); n * fin];
    gemm(n, fout, fin, dy.data(), w.data(), &mut dx);
    let dy_t = transpose(dy.data(), n, fout);
    let mut dw = vec![T::zero(); fout * fin];
    gemm(fout, n, fin, &dy_t, x.data(), &mut dw);
    let db = (0..fout)
        .map(|o| (0..n).fold(T::zero(), |acc, i| acc + dy.data()[i * fout + o]))
        .collect();
    (
        Tensor::from_parts(vec![n, fin], dx),
        Tensor::from_parts(vec![fout, fin], dw),
        Tensor::from_parts(vec![fout], db),
    )
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], pad: usize) -> Result<(usize, Self)> {
        let ([n, c, h, w], [o, kc, kh, kw]) = (x, k) else {
            return Err(Error::shape(format!(
                "conv2d needs rank-4 input and kernel, got {x:?} and {k:?}"
            )));
        };
        if c != kc {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels, kernel expects {kc}"
            )));
        }
        if h + 2 * pad < *kh || w + 2 * pad < *kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let geom = ConvGeom {
            c: *c,
            h: *h,
            w: *w,
            o: *o,
            kh: *kh,
            kw: *kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        };
        Ok((*n, geom))
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy + ky).checked_sub(self.pad)?;
        let x = (ox + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            col[row + oy * self.wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some((y, x)) => img[(ci * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.src(oy, ox, ky, kx) {
                                let d = &mut img[(ci * self.h + y) * self.w + x];
                                *d = *d + col[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, g) = ConvGeom::new(x.shape(), k.shape(), pad)?;
    if b.shape() != [g.o] {
        return Err(Error::shape(format!("conv bias {:?}, expected [{}]", b.shape(), g.o)));
    }
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * g.out_plane();
    let mut out = vec![T::zero(); n * out_img];
    out.par_chunks_mut(out_img.max(1)).enumerate().for_each(|(i, o)| {
        let mut col = vec![T::zero(); g.patch() * g.out_plane()];
        g.im2col(&x.data()[i * in_img..(i + 1) * in_img], &mut col);
        for (oc, plane) in o.chunks_mut(g.out_plane()).enumerate() {
            plane.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        gemm(g.o, g.patch(), g.out_plane(), k.data(), &col, o);
    });
    Tensor::new(vec![n, g.o, g.ho, g.wo], out)
}

/// `(dx, dk, db)` of a convolution.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Returns `(dx, dk, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    k: &Tensor<T>,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, g) = ConvGeom::new(x.shape(), k.shape(), pad)?;
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * g.out_plane();
    let plane = g.out_plane();

    let mut dk = vec![T::zero(); g.o * g.patch()];
    let mut col = vec![T::zero(); g.patch() * plane];
    for i in 0..n {
        g.im2col(&x.data()[i * in_img..(i + 1) * in_img], &mut col);
        gemm_abt(
            g.o,
            plane,
            g.patch(),
            &dy.data()[i * out_img..(i + 1) * out_img],
            &col,
            &mut dk,
        );
    }
    let db = (0..g.o)
        .map(|oc| {
            (0..n).fold(T::zero(), |acc, i| {
                let s = &dy.data()[i * out_img + oc * plane..i * out_img + (oc + 1) * plane];
                acc + s.iter().fold(T::zero(), |a, &v| a + v)
            })
        })
        .collect();

    let dx = need_dx.then(|| {
        let k_t = transpose(k.data(), g.o, g.patch());
        let mut dx = vec![T::zero(); n * in_img];
        dx.par_chunks_mut(in_img.max(1)).enumerate().for_each(|(i, d)| {
            let mut dcol = vec![T::zero(); g.patch() * plane];
            gemm(
                g.patch(),
                g.o,
                plane,
                &k_t,
                &dy.data()[i * out_img..(i + 1) * out_img],
                &mut dcol,
            );
            g.col2im(&dcol, d);
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    Ok((
        dx,
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.o], db),
    ))
}

// ---------------------------------------------------------------- max pooling

/// Non-overlapping `size x size` max pooling (stride = size). Returns the
/// pooled tensor and, per output element, the flat index of the chosen input.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape() else {
        return Err(Error::shape(format!("maxpool needs [N, C, H, W], got {:?}", x.shape())));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if size == 0 || h % size != 0 || w % size != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "spatial size {h}x{w} is not divisible by pooling size {size}"
        )));
    }
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |j: usize| {
                    let (dy, dx) = (j / size, j % size);
                    base + (oy * size + dy) * w + ox * size + dx
                };
                let best = at(argmax_by(size * size, |j| d[at(j)]));
                out.push(d[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), idx))
}

pub fn maxpool2d_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize], argmax: &[u32]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(argmax) {
        d[i as usize] = d[i as usize] + g;
    }
    dx
}

// ---------------------------------------------------------------- batch norm

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Saved values for the batch-norm gradient.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
    pub training: bool,
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::shape(format!(
            "batch norm needs [N, C] or [N, C, H, W], got {s:?}"
        ))),
    }
}

/// Per-channel normalization. Training uses batch statistics (and updates
/// the running averages); evaluation uses the running averages.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState,
    phase: Phase,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, inner) = bn_dims(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || state.running_mean.len() != c {
        return Err(Error::shape(format!("batch norm parameters do not match {c} channels")));
    }
    let training = phase == Phase::Train;
    if training && n < 2 {
        return Err(Error::usage("batch norm in training mode needs a batch of at least 2"));
    }
    let m = (n * inner) as f64;
    let d = x.data();
    let at = |i: usize, ch: usize| &d[(i * c + ch) * inner..(i * c + ch + 1) * inner];

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    if training {
        for ch in 0..c {
            let s: f64 = (0..n).map(|i| at(i, ch).iter().map(|v| v.f64()).sum::<f64>()).sum();
            let mu = s / m;
            let ss: f64 = (0..n)
                .map(|i| at(i, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>())
                .sum();
            mean[ch] = mu;
            var[ch] = ss / m;
            let unbiased = ss / (m - 1.0).max(1.0);
            state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
            state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
        }
    } else {
        mean.copy_from_slice(&state.running_mean);
        var.copy_from_slice(&state.running_var);
    }
    let invstd: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + state.eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            for j in base..base + inner {
                let xh = (d[j] - mean_t[ch]) * invstd[ch];
                xhat[j] = xh;
                y[j] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    let cache = BatchNormCache {
        xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
        invstd,
        training,
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), y), cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, inner) = bn_dims(dy.shape())?;
    let m = T::of((n * inner) as f64);
    let g = dy.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            for j in base..base + inner {
                dgamma[ch] = dgamma[ch] + g[j] * xh[j];
                dbeta[ch] = dbeta[ch] + g[j];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            let scale = gamma.data()[ch] * cache.invstd[ch];
            for j in base..base + inner {
                dx[j] = if cache.training {
                    // d/dx of gamma * (x - mean) * invstd with batch statistics
                    scale * (g[j] - dbeta[ch] / m - xh[j] * dgamma[ch] / m)
                } else {
                    scale * g[j]
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

// ---------------------------------------------------------------- dropout

/// Inverted dropout. In training each element is zeroed with probability
/// `p` and survivors are scaled by `1 / (1 - p)`; evaluation is the identity.
/// Returns the output and the per-element multiplier (absent in evaluation).
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, phase: Phase, key: NoiseKey) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("dropout probability {p} not in [0, 1)")));
    }
    if phase == Phase::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let u = sample_uniform::<f64>(x.shape(), key);
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = u.data().iter().map(|&v| if v < p { T::zero() } else { keep }).collect();
    let y = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), y), Some(mask)))
}

// ---------------------------------------------------------------- loss

/// Mean softmax cross-entropy of `logits [N, C]` against integer labels.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, c] = logits.shape() else {
        return Err(Error::shape(format!("logits must be [N, C], got {:?}", logits.shape())));
    };
    let (n, c) = (*n, *c);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut probs = vec![T::zero(); n * c];
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Argument(format!("label {label} out of range for {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        for (j, &v) in row.iter().enumerate() {
            probs[i * c + j] = (v - max).exp() / sum;
        }
        loss += (sum.ln() + max - row[label]).f64();
    }
    Ok((T::of(loss / n as f64), Tensor::from_parts(vec![n, c], probs)))
}

// ---------------------------------------------------------------- tape ops

struct DenseOp;

impl<T: Scalar> Backward<T> for DenseOp {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _o: &Tensor<T>,
        _n: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dw, db) = dense_backward(grad, inputs[0], inputs[1]);
        Ok(vec![Some(dx), Some(dw), Some(db)])
    }
}

struct ConvOp {
    pad: usize,
}

impl<T: Scalar> Backward<T> for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _o: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dk, db) = conv2d_backward(grad, inputs[0], inputs[1], self.pad, needs[0])?;
        Ok(vec![dx, Some(dk), Some(db)])
    }
}

struct PoolOp {
    argmax: Vec<u32>,
}

impl<T: Scalar> Backward<T> for PoolOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _o: &Tensor<T>,
        _n: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(maxpool2d_backward(grad, inputs[0].shape(), &self.argmax))])
    }
}

struct BatchNormOp<T> {
    cache: BatchNormCache<T>,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _o: &Tensor<T>,
        _n: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dg, db) = batchnorm_backward(grad, &self.cache, inputs[1])?;
        Ok(vec![Some(dx), Some(dg), Some(db)])
    }
}

struct DropoutOp<T> {
    mask: Vec<T>,
}

impl<T: Scalar> Backward<T> for DropoutOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _i: &[&Tensor<T>],
        _o: &Tensor<T>,
        _n: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let d = grad.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), d))])
    }
}

struct CrossEntropyOp<T> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _i: &[&Tensor<T>],
        _o: &Tensor<T>,
        _n: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, c) = (self.probs.shape()[0], self.probs.shape()[1]);
        let scale = grad.item() / T::of(n as f64);
        let mut d = self.probs.data().to_vec();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * c + l] = d[i * c + l] - T::one();
        }
        d.iter_mut().for_each(|v| *v = *v * scale);
        Ok(vec![Some(Tensor::from_parts(vec![n, c], d))])
    }
}

pub mod ops {
    use super::*;

    pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = super::dense(tape.value(x), tape.value(w), tape.value(b))?;
        Ok(tape.push(DenseOp, &[x, w, b], y))
    }

    pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: NodeId, k: NodeId, b: NodeId, pad: usize) -> Result<NodeId> {
        let y = super::conv2d(tape.value(x), tape.value(k), tape.value(b), pad)?;
        Ok(tape.push(ConvOp { pad }, &[x, k, b], y))
    }

    pub fn maxpool2d<T: Scalar>(tape: &mut Tape<T>, x: NodeId, size: usize) -> Result<NodeId> {
        let (y, argmax) = super::maxpool2d(tape.value(x), size)?;
        Ok(tape.push(PoolOp { argmax }, &[x], y))
    }

    pub fn batchnorm<T: Scalar>(
        tape: &mut Tape<T>,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        phase: Phase,
    ) -> Result<NodeId> {
        let (y, cache) = super::batchnorm(tape.value(x), tape.value(gamma), tape.value(beta), state, phase)?;
        Ok(tape.push(BatchNormOp { cache }, &[x, gamma, beta], y))
    }

    pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: NodeId, p: f64, phase: Phase, key: NoiseKey) -> Result<NodeId> {
        match super::dropout(tape.value(x), p, phase, key)? {
            (_, None) => Ok(x),
            (y, Some(mask)) => Ok(tape.push(DropoutOp { mask }, &[x], y)),
        }
    }

    pub fn softmax_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = super::softmax_cross_entropy(tape.value(logits), labels)?;
        let op = CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
        };
        Ok(tape.push(op, &[logits], Tensor::scalar(loss)))
    }

    pub fn flatten<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let s = tape.value(x).shape();
        let n = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        crate::autodiff::ops::reshape(tape, x, &[n, rest])
    }
}
