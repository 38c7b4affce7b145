//! Central finite-difference validation of analytic gradients.
//!
//! The function under test must be deterministic for fixed parameters; for
//! stochastic layers that means the caller keeps the noise keys fixed so the
//! same draws are replayed on every evaluation.

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{splitmix64, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Step sizes tried per element; the best match is kept.
    pub steps: Vec<f64>,
    pub tolerance: f64,
    /// Check at most this many elements per parameter (chosen
    /// deterministically). `None` checks every element.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            steps: vec![1e-4, 1e-5, 1e-6],
            tolerance: 1e-4,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} n={:<6} max_rel={:.3e} at {} (analytic {:.6e}, numeric {:.6e}) {}",
                p.name,
                p.checked,
                p.max_rel_error,
                p.worst_index,
                p.analytic,
                p.numeric,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `|a - c| / max(|a|, |c|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape<f64>, root: NodeId) -> Result<f64> {
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::shape(format!(
            "function under test must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn evaluate<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let root = f(store, &mut tape)?;
    scalar_of(&tape, root)
}

fn selected(len: usize, max: Option<usize>, salt: u64) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut picked: Vec<usize> = (0..m as u64)
                .map(|i| (splitmix64(salt ^ i.wrapping_mul(0x9E37)) % len as u64) as usize)
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Compares the tape gradient of `f` with central differences for every
/// trainable parameter in `store`.
pub fn finite_diff_check<F>(mut f: F, store: &mut ParamStore<f64>, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let root = f(store, &mut tape)?;
    let base = scalar_of(&tape, root)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: "function value".into(),
        });
    }
    tape.backward(root, &Tensor::full(tape.value(root).shape(), 1.0), store)?;

    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic_grad = store.grad(id).clone();
        if let Some(index) = analytic_grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                index,
                context: format!("analytic gradient of '{name}'"),
            });
        }
        let elements = selected(analytic_grad.len(), config.max_elements, id.0 as u64);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: elements.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for &e in &elements {
            let analytic = analytic_grad.data()[e];
            let original = store.value(id).data()[e];
            let mut best: Option<(f64, f64)> = None;
            for &h in &config.steps {
                store.get_mut(id).value.data_mut()[e] = original + h;
                let plus = evaluate(&mut f, store)?;
                store.get_mut(id).value.data_mut()[e] = original - h;
                let minus = evaluate(&mut f, store)?;
                store.get_mut(id).value.data_mut()[e] = original;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        index: e,
                        context: format!("perturbed evaluation of '{name}'"),
                    });
                }
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(analytic, numeric);
                if best.is_none_or(|(b, _)| err < b) {
                    best = Some((err, numeric));
                }
            }
            let (err, numeric) = best.expect("at least one step size");
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = e;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < config.tolerance;
        report.push(check);
    }
    store.zero_grad();
    Ok(GradCheckReport { params: report })
}
