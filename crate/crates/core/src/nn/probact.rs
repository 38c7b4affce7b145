//! The stochastic activation `y = max(0, x) + sigma * eps`, `eps ~ N(0, 1)`.
//!
//! `sigma` is either a fixed constant, one trainable scalar shared by every
//! site, or one trainable value per activation element. The bounded
//! element-wise variant trains `k` and uses `sigma = alpha * sigmoid(beta * k)`.
//!
//! The forward pass returns a [`NoiseRecord`] holding the exact `eps` it
//! used; the backward pass differentiates through that frozen draw:
//! `dy/dx = 1[x > 0]`, `dy/dsigma = eps`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{sample_standard_normal, sigmoid, NoiseKey, Scalar, Tensor};

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaMode {
    Fixed { sigma: f64 },
    Single,
    ElementwiseUnbound,
    ElementwiseBounded { alpha: f64, beta: f64 },
}

impl SigmaMode {
    pub fn bounded() -> Self {
        SigmaMode::ElementwiseBounded {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, SigmaMode::Fixed { .. })
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            SigmaMode::ElementwiseUnbound | SigmaMode::ElementwiseBounded { .. }
        )
    }
}

/// How a trained stochastic network predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalMode {
    /// One fresh noise draw.
    Stochastic,
    /// The noise-free mean, i.e. plain ReLU.
    Mean,
    /// Average of `n` draws.
    McAverage(u32),
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(EvalMode::Stochastic),
            "mean" => Ok(EvalMode::Mean),
            _ => match s.strip_prefix("mc:").map(str::parse::<u32>) {
                Some(Ok(n)) if n > 0 => Ok(EvalMode::McAverage(n)),
                _ => Err(Error::Argument(format!(
                    "eval mode '{s}' (expected stochastic, mean or mc:<n>)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for EvalMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EvalMode> for String {
    fn from(m: EvalMode) -> String {
        m.to_string()
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Stochastic => f.write_str("stochastic"),
            EvalMode::Mean => f.write_str("mean"),
            EvalMode::McAverage(n) => write!(f, "mc:{n}"),
        }
    }
}

/// Parameter layout for the element-wise modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One value per activation-map element.
    #[default]
    Element,
    /// One value per channel.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbActConfig {
    pub mode: SigmaMode,
    pub eval: EvalMode,
    #[serde(default)]
    pub granularity: Granularity,
}

impl ProbActConfig {
    pub fn new(mode: SigmaMode) -> Self {
        Self {
            mode,
            eval: EvalMode::Stochastic,
            granularity: Granularity::Element,
        }
    }

    pub fn fixed(sigma: f64) -> Self {
        Self::new(SigmaMode::Fixed { sigma })
    }

    pub fn with_eval(self, eval: EvalMode) -> Self {
        Self { eval, ..self }
    }

    /// Shape of the trainable parameter for an activation site of shape
    /// `site` (`[C, H, W]` or `[units]`), or `None` when nothing is trained.
    pub fn param_shape(&self, site: &[usize]) -> Option<Vec<usize>> {
        match self.mode {
            SigmaMode::Fixed { .. } => None,
            SigmaMode::Single => Some(vec![1]),
            _ => Some(match self.granularity {
                Granularity::Element => site.to_vec(),
                Granularity::Channel => {
                    let mut s = vec![1; site.len()];
                    s[0] = site[0];
                    s
                }
            }),
        }
    }

    /// Effective sigma for a raw parameter (or the constant in fixed mode).
    pub fn sigma_of<T: Scalar>(&self, param: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match (self.mode, param) {
            (SigmaMode::Fixed { sigma }, None) => Ok(Tensor::from_vec(vec![T::of(sigma)])),
            (SigmaMode::Single | SigmaMode::ElementwiseUnbound, Some(p)) => Ok(p.clone()),
            (SigmaMode::ElementwiseBounded { alpha, beta }, Some(k)) => bounded_sigma(k, alpha, beta),
            (mode, p) => Err(Error::usage(format!(
                "{mode:?} {} a sigma parameter",
                if p.is_some() { "does not take" } else { "needs" }
            ))),
        }
    }
}

/// `alpha * sigmoid(beta * k)`, strictly inside `(0, alpha)` for finite `k`.
pub fn bounded_sigma<T: Scalar>(k: &Tensor<T>, alpha: f64, beta: f64) -> Result<Tensor<T>> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Argument(format!(
            "bounded sigma needs alpha > 0 and beta > 0 (got {alpha}, {beta})"
        )));
    }
    let (a, b) = (T::of(alpha), T::of(beta));
    // The sigmoid rounds to exactly 0 or 1 once |beta * k| is large; keep
    // the result on the representable values just inside the interval.
    let lo = a * T::min_positive_value();
    let hi = a - a * T::epsilon();
    Ok(k.map(move |v| (a * sigmoid(b * v)).max(lo).min(hi)))
}

/// The exact noise used by one forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord<T> {
    /// Noise per output element; the mean of all draws when more than one
    /// draw was taken, zeros when none was.
    pub eps: Tensor<T>,
    pub key: NoiseKey,
    pub draws: u32,
}

/// Whether layers run in training or evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[inline]
fn sigma_index(e: usize, site_len: usize, sigma_len: usize) -> usize {
    if sigma_len == 1 {
        0
    } else if sigma_len == site_len {
        e
    } else {
        e / (site_len / sigma_len)
    }
}

fn check_sigma_shape(x: &[usize], sigma_len: usize) -> Result<usize> {
    let site_len: usize = x.iter().skip(1).product();
    if x.is_empty()
        || sigma_len == 0
        || !site_len.is_multiple_of(sigma_len)
        || (sigma_len != 1 && sigma_len != site_len && sigma_len != x[1])
    {
        return Err(Error::shape(format!(
            "sigma with {sigma_len} elements does not fit activation {x:?}"
        )));
    }
    Ok(site_len)
}

/// Forward pass. `x` is `[N, ...site]`; `param` is the raw sigma (or `k`)
/// parameter, absent in fixed mode. Training always samples; evaluation
/// follows `config.eval`.
pub fn probact_forward<T: Scalar>(
    x: &Tensor<T>,
    config: &ProbActConfig,
    param: Option<&Tensor<T>>,
    key: NoiseKey,
    phase: Phase,
) -> Result<(Tensor<T>, NoiseRecord<T>)> {
    let sigma = config.sigma_of(param)?;
    let site_len = check_sigma_shape(x.shape(), sigma.len())?;
    let draws = match (phase, config.eval) {
        (Phase::Train, _) | (Phase::Eval, EvalMode::Stochastic) => 1,
        (Phase::Eval, EvalMode::Mean) => 0,
        (Phase::Eval, EvalMode::McAverage(n)) => n,
    };
    let mean = x.map(|v| if v > T::zero() { v } else { T::zero() });
    if draws == 0 {
        let record = NoiseRecord {
            eps: Tensor::zeros(x.shape()),
            key,
            draws,
        };
        return Ok((mean, record));
    }
    let mut eps = sample_standard_normal::<T>(x.shape(), key.with_draw(key.draw));
    for d in 1..draws {
        let extra = sample_standard_normal::<T>(x.shape(), key.with_draw(key.draw + d));
        for (a, &b) in eps.data_mut().iter_mut().zip(extra.data()) {
            *a = *a + b;
        }
    }
    if draws > 1 {
        let inv = T::of(1.0 / f64::from(draws));
        eps.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    let y = combine(&mean, &sigma, &eps, site_len);
    Ok((y, NoiseRecord { eps, key, draws }))
}

fn combine<T: Scalar>(mean: &Tensor<T>, sigma: &Tensor<T>, eps: &Tensor<T>, site_len: usize) -> Tensor<T> {
    let s = sigma.data();
    let y = mean
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&m, &e))| m + s[sigma_index(i % site_len, site_len, s.len())] * e)
        .collect();
    Tensor::from_parts(mean.shape().to_vec(), y)
}

/// Forward pass with a caller-supplied noise tensor instead of a fresh draw.
pub fn probact_with_eps<T: Scalar>(
    x: &Tensor<T>,
    config: &ProbActConfig,
    param: Option<&Tensor<T>>,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if eps.shape() != x.shape() {
        return Err(Error::shape(format!(
            "noise {:?} does not match input {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let sigma = config.sigma_of(param)?;
    let site_len = check_sigma_shape(x.shape(), sigma.len())?;
    let mean = x.map(|v| if v > T::zero() { v } else { T::zero() });
    Ok(combine(&mean, &sigma, eps, site_len))
}

/// Backward pass through a frozen draw. Returns `(grad_x, grad_param)`,
/// where `grad_param` is with respect to sigma (or `k` in bounded mode) and
/// is `None` in fixed mode.
pub fn probact_backward<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    record: &NoiseRecord<T>,
    config: &ProbActConfig,
    param: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if upstream.shape() != x.shape() || record.eps.shape() != x.shape() {
        return Err(Error::usage(format!(
            "noise record {:?} / upstream {:?} do not match input {:?}",
            record.eps.shape(),
            upstream.shape(),
            x.shape()
        )));
    }
    if config.mode.is_trainable() != param.is_some() {
        return Err(Error::usage(format!(
            "parameter presence does not match {:?}",
            config.mode
        )));
    }
    let grad_x: Vec<T> = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    let grad_x = Tensor::from_parts(x.shape().to_vec(), grad_x);
    let Some(p) = param else {
        return Ok((grad_x, None));
    };
    let site_len = check_sigma_shape(x.shape(), p.len())?;
    let mut g = vec![T::zero(); p.len()];
    for (i, (&u, &e)) in upstream.data().iter().zip(record.eps.data()).enumerate() {
        let si = sigma_index(i % site_len, site_len, p.len());
        g[si] = g[si] + u * e;
    }
    if let SigmaMode::ElementwiseBounded { alpha, beta } = config.mode {
        let (a, b) = (T::of(alpha), T::of(beta));
        for (gv, &k) in g.iter_mut().zip(p.data()) {
            let s = sigmoid(b * k);
            *gv = *gv * a * b * s * (T::one() - s);
        }
    }
    Ok((grad_x, Some(Tensor::from_parts(p.shape().to_vec(), g))))
}

struct ProbActOp<T> {
    config: ProbActConfig,
    record: NoiseRecord<T>,
}

impl<T: Scalar> Backward<T> for ProbActOp<T> {
    fn name(&self) -> &'static str {
        "probact"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (gx, gp) = probact_backward(grad, inputs[0], &self.record, &self.config, inputs.get(1).copied())?;
        let mut out = vec![Some(gx)];
        if inputs.len() > 1 {
            out.push(gp);
        }
        Ok(out)
    }
}

/// Records the stochastic activation on a tape. `param` is the sigma/k node
/// (absent in fixed mode).
pub fn probact<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    param: Option<NodeId>,
    config: &ProbActConfig,
    key: NoiseKey,
    phase: Phase,
) -> Result<(NodeId, NoiseRecord<T>)> {
    let (y, record) = probact_forward(tape.value(x), config, param.map(|p| tape.value(p)), key, phase)?;
    let inputs: Vec<NodeId> = std::iter::once(x).chain(param).collect();
    let op = ProbActOp {
        config: *config,
        record: record.clone(),
    };
    Ok((tape.push(op, &inputs, y), record))
}
