//! Parameter updates, the step-decay learning-rate schedule and checkpoints.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Learning rate `base * factor^floor(epoch / period)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            base: 0.01,
            factor: 0.1,
            period: 100,
        }
    }
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.period.max(1)) as i32;
        self.base / (1.0 / self.factor).powi(drops)
    }
}

/// The default schedule: 0.01, divided by 10 every 100 epochs.
pub fn step_decay(epoch: usize) -> f64 {
    StepDecay::default().lr(epoch)
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("learning rate must be positive, got {lr}")))
    }
}

/// `p <- p - lr * g` for every trainable parameter.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_lr(lr)?;
    let lr = T::of(lr);
    for p in store.iter_mut().filter(|p| p.trainable) {
        let g = p.grad.data();
        for (v, &d) in p.value.data_mut().iter_mut().zip(g) {
            *v = *v - lr * d;
        }
    }
    Ok(())
}

/// Moments and counters of an optimizer, one entry per parameter in store
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    pub lr: f64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => {
                let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
                (zeros.clone(), zeros)
            }
        };
        Self {
            kind,
            step: 0,
            lr: 0.0,
            first,
            second,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(store, lr)?;
                self.step += 1;
                self.lr = lr;
                Ok(())
            }
            OptimizerKind::Adam { .. } => adam_step(store, self, lr),
        }
    }
}

/// Adam with bias correction.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    check_lr(lr)?;
    let OptimizerKind::Adam { beta1, beta2, eps } = state.kind else {
        return Err(Error::usage("adam_step called with a non-Adam optimizer state"));
    };
    if state.first.len() != store.len() {
        return Err(Error::usage(format!(
            "optimizer state has {} moments for {} parameters",
            state.first.len(),
            store.len()
        )));
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one, step, eps) = (T::one(), T::of(lr / c1), T::of(eps));
    let inv_c2 = T::of(1.0 / c2);
    for ((p, m), v) in store.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if !p.trainable {
            continue;
        }
        if m.shape() != p.value.shape() {
            return Err(Error::usage(format!("moment shape mismatch for '{}'", p.name)));
        }
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * g[i];
            vd[i] = b2 * vd[i] + (one - b2) * g[i] * g[i];
            *w = *w - step * md[i] / ((vd[i] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_vec(vec![v]), true);
        s.get_mut(id).grad = Tensor::from_vec(vec![g]);
        s
    }

    #[test]
    fn schedule_values() {
        assert_eq!(step_decay(0), 0.01);
        assert_eq!(step_decay(99), 0.01);
        assert_eq!(step_decay(100), 0.001);
        assert_eq!(step_decay(399), 1e-5);
    }

    #[test]
    fn sgd_basic() {
        let mut s = store(1.0, 0.5);
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.value(crate::autodiff::ParamId(0)).item() - 0.95).abs() < 1e-15);
        let mut z = store(1.0, 0.0);
        sgd_step(&mut z, 0.1).unwrap();
        assert_eq!(z.value(crate::autodiff::ParamId(0)).item(), 1.0);
        assert!(sgd_step(&mut z, 0.0).is_err());
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::from_vec(vec![1.0]), false);
        s.get_mut(id).grad = Tensor::from_vec(vec![1.0]);
        sgd_step(&mut s, 0.5).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn adam_first_step_is_unit() {
        let mut s = store(1.0, 1.0);
        let mut st = OptimizerState::new(OptimizerKind::adam(), &s);
        adam_step(&mut s, &mut st, 0.01).unwrap();
        let p = s.value(crate::autodiff::ParamId(0)).item();
        assert!((1.0 - p - 0.01).abs() < 1e-9, "{p}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient() {
        let mut s = store(0.3, 0.0);
        let mut st = OptimizerState::new(OptimizerKind::adam(), &s);
        for _ in 0..10 {
            adam_step(&mut s, &mut st, 0.01).unwrap();
        }
        assert_eq!(s.value(crate::autodiff::ParamId(0)).item(), 0.3);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut s = store(1.0, 0.0);
        let id = crate::autodiff::ParamId(0);
        let mut st = OptimizerState::new(OptimizerKind::adam(), &s);
        for _ in 0..100 {
            let p = s.value(id).item();
            s.get_mut(id).grad = Tensor::from_vec(vec![2.0 * p]);
            adam_step(&mut s, &mut st, 0.1).unwrap();
        }
        assert!(s.value(id).item().abs() < 0.1);
    }
}
