//! Model descriptions and the sequential network built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::activation::{self, Activation, PRELU_INIT};
use super::layers::{self, BatchNormState};
use super::probact::{self, EvalMode, Phase, SigmaMode};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Init, NoiseKey, Scalar, Tensor};

/// Noise-key layer offset used by dropout so its stream never collides with
/// an activation site.
pub const DROPOUT_LAYER: u32 = 1 << 20;
/// Evaluation steps set this bit so they never reuse a training key.
pub const EVAL_STEP_BIT: u64 = 1 << 63;

/// One entry of a layer list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    /// 3x3 convolution (padding 1) + batch norm + activation.
    Conv(usize),
    /// 2x2 max pooling, stride 2.
    MaxPool,
    /// Fully connected layer + activation.
    Dense(usize),
    /// Flatten, optional dropout, linear classifier.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn vgg16() -> Self {
        Self::from_tokens("vgg16", "64,64,M,128,128,M,256,256,256,M,512,512,512,M,512,512,512,M,C")
            .expect("valid preset")
    }

    pub fn vgg_lite() -> Self {
        Self::from_tokens("vgg-lite", "32,32,M,64,64,M,128,128,M,C").expect("valid preset")
    }

    pub fn mlp() -> Self {
        Self::from_tokens("mlp", "FC64,FC64,C").expect("valid preset")
    }

    /// Parses a comma-separated token list: a number is a conv block, `M` a
    /// pooling layer, `FC<n>` a dense layer and `C` the classifier.
    pub fn from_tokens(name: &str, tokens: &str) -> Result<Self> {
        let layers = tokens
            .trim()
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "M" | "m" => Ok(LayerSpec::MaxPool),
                "C" | "c" => Ok(LayerSpec::Classifier),
                _ => {
                    let (dense, num) = match t.strip_prefix("FC").or_else(|| t.strip_prefix("fc")) {
                        Some(n) => (true, n),
                        None => (false, t),
                    };
                    let n: usize = num
                        .parse()
                        .map_err(|_| Error::Argument(format!("bad layer token '{t}'")))?;
                    if n == 0 {
                        return Err(Error::Argument(format!("layer width 0 in '{t}'")));
                    }
                    Ok(if dense { LayerSpec::Dense(n) } else { LayerSpec::Conv(n) })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.last() != Some(&LayerSpec::Classifier)
            || layers.iter().filter(|l| **l == LayerSpec::Classifier).count() != 1
        {
            return Err(Error::Argument(format!(
                "layer list '{tokens}' must end with exactly one C"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" | "vgg-16" => Ok(Self::vgg16()),
            "vgg-lite" | "vgglite" => Ok(Self::vgg_lite()),
            "mlp" => Ok(Self::mlp()),
            _ if s.starts_with('[') => Self::from_tokens("custom", s),
            _ => Err(Error::Argument(format!("unknown model '{s}'"))),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(n) => n.to_string(),
                LayerSpec::MaxPool => "M".into(),
                LayerSpec::Dense(n) => format!("FC{n}"),
                LayerSpec::Classifier => "C".into(),
            })
            .collect();
        write!(f, "[{}]", tokens.join(","))
    }
}

/// Build-time options beyond the layer list and activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub classes: usize,
    /// `[C, H, W]` of one input.
    pub input: Vec<usize>,
    /// Dropout probability before the classifier.
    pub dropout: Option<f64>,
    pub weight_seed: u64,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        state: usize,
    },
    Act {
        site: u32,
        param: Option<ParamId>,
    },
    Pool,
    Flatten,
    Dropout {
        p: f64,
    },
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
}

/// A materialized sequential network.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub activation: Activation,
    pub options: ModelOptions,
    pub params: ParamStore<T>,
    pub bn: Vec<BatchNormState>,
    layers: Vec<Layer>,
    sites: Vec<(String, Vec<usize>)>,
    shared_sigma: Option<ParamId>,
}

/// Materializes `spec` with `activation` at every activation site.
pub fn build_model<T: Scalar>(spec: &ModelSpec, activation: Activation, options: ModelOptions) -> Result<Model<T>> {
    if options.input.len() != 3 || options.input.contains(&0) {
        return Err(Error::shape(format!(
            "input must be [C, H, W], got {:?}",
            options.input
        )));
    }
    if options.classes == 0 {
        return Err(Error::Argument("a model needs at least one class".into()));
    }
    if let Some(p) = options.dropout {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout probability {p} not in [0, 1)")));
        }
    }
    if let Some(cfg) = activation.probact_config() {
        if let SigmaMode::ElementwiseBounded { alpha, beta } = cfg.mode {
            probact::bounded_sigma(&Tensor::<f64>::zeros(&[1]), alpha, beta)?;
        }
        if let SigmaMode::Fixed { sigma } = cfg.mode {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Argument(format!(
                    "fixed sigma must be finite and nonnegative, got {sigma}"
                )));
            }
        }
    }

    let mut params = ParamStore::new();
    let mut bn = Vec::new();
    let mut layers = Vec::new();
    let mut sites = Vec::new();
    let seed = options.weight_seed;
    let init = |params: &mut ParamStore<T>, name: String, shape: &[usize], how: Init| -> Result<ParamId> {
        let t = Tensor::create(shape, &how)?;
        Ok(params.add(name, t, true))
    };

    let shared_sigma = match activation.probact_config().map(|c| c.mode) {
        Some(SigmaMode::Single) => Some(init(&mut params, "sigma".into(), &[1], Init::Fill(0.0))?),
        _ => None,
    };

    let mut shape = options.input.clone();
    let mut block = 0usize;
    let add_act = |params: &mut ParamStore<T>,
                   layers: &mut Vec<Layer>,
                   sites: &mut Vec<(String, Vec<usize>)>,
                   site_shape: &[usize],
                   block: usize|
     -> Result<()> {
        let site = sites.len() as u32;
        let param = match &activation {
            Activation::Prelu => Some(init(
                params,
                format!("act{block}.prelu"),
                &[site_shape[0]],
                Init::Fill(PRELU_INIT),
            )?),
            Activation::ProbAct { config } => match config.mode {
                SigmaMode::Fixed { .. } => None,
                SigmaMode::Single => shared_sigma,
                SigmaMode::ElementwiseUnbound | SigmaMode::ElementwiseBounded { .. } => {
                    let suffix = if matches!(config.mode, SigmaMode::ElementwiseBounded { .. }) {
                        "k"
                    } else {
                        "sigma"
                    };
                    let pshape = config.param_shape(site_shape).expect("trainable mode");
                    let s = derive_seed(seed, 0x5157_0000 + u64::from(site));
                    Some(init(params, format!("act{block}.{suffix}"), &pshape, Init::Xavier(s))?)
                }
            },
            _ => None,
        };
        if activation.probact_config().is_some() {
            sites.push((format!("act{block}"), site_shape.to_vec()));
        }
        layers.push(Layer::Act {
            site: if activation.probact_config().is_some() {
                site
            } else {
                u32::MAX
            },
            param,
        });
        Ok(())
    };

    for spec_layer in &spec.layers {
        match *spec_layer {
            LayerSpec::Conv(out) => {
                if shape.len() != 3 {
                    return Err(Error::shape("convolution after a dense layer".to_string()));
                }
                let wshape = [out, shape[0], 3, 3];
                let xs = derive_seed(seed, params.len() as u64);
                let w = init(&mut params, format!("conv{block}.weight"), &wshape, Init::Xavier(xs))?;
                let b = init(&mut params, format!("conv{block}.bias"), &[out], Init::Fill(0.0))?;
                layers.push(Layer::Conv { weight: w, bias: b });
                let g = init(&mut params, format!("bn{block}.gamma"), &[out], Init::Fill(1.0))?;
                let be = init(&mut params, format!("bn{block}.beta"), &[out], Init::Fill(0.0))?;
                layers.push(Layer::BatchNorm {
                    gamma: g,
                    beta: be,
                    state: bn.len(),
                });
                bn.push(BatchNormState::new(out));
                shape[0] = out;
                add_act(&mut params, &mut layers, &mut sites, &shape, block)?;
                block += 1;
            }
            LayerSpec::MaxPool => {
                if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                    return Err(Error::shape(format!(
                        "input resolution {:?} is incompatible with the pooling depth of {spec}",
                        options.input
                    )));
                }
                shape[1] /= 2;
                shape[2] /= 2;
                layers.push(Layer::Pool);
            }
            LayerSpec::Dense(out) => {
                if shape.len() != 1 {
                    layers.push(Layer::Flatten);
                    shape = vec![shape.iter().product()];
                }
                let xs = derive_seed(seed, params.len() as u64);
                let w = init(
                    &mut params,
                    format!("fc{block}.weight"),
                    &[out, shape[0]],
                    Init::Xavier(xs),
                )?;
                let b = init(&mut params, format!("fc{block}.bias"), &[out], Init::Fill(0.0))?;
                layers.push(Layer::Dense { weight: w, bias: b });
                shape = vec![out];
                add_act(&mut params, &mut layers, &mut sites, &shape, block)?;
                block += 1;
            }
            LayerSpec::Classifier => {
                if shape.len() != 1 {
                    layers.push(Layer::Flatten);
                    shape = vec![shape.iter().product()];
                }
                if let Some(p) = options.dropout {
                    layers.push(Layer::Dropout { p });
                }
                let xs = derive_seed(seed, params.len() as u64);
                let w = init(
                    &mut params,
                    "classifier.weight".into(),
                    &[options.classes, shape[0]],
                    Init::Xavier(xs),
                )?;
                let b = init(
                    &mut params,
                    "classifier.bias".into(),
                    &[options.classes],
                    Init::Fill(0.0),
                )?;
                layers.push(Layer::Dense { weight: w, bias: b });
            }
        }
    }

    Ok(Model {
        spec: spec.clone(),
        activation,
        options,
        params,
        bn,
        layers,
        sites,
        shared_sigma,
    })
}

impl<T: Scalar> Model<T> {
    pub fn has_batch_norm(&self) -> bool {
        !self.bn.is_empty()
    }

    /// `(in_features, out_features)` of the final linear layer.
    pub fn classifier_dims(&self) -> (usize, usize) {
        let id = self.params.find("classifier.weight").expect("classifier present");
        let s = self.params.value(id).shape();
        (s[1], s[0])
    }

    /// Names and per-sample shapes of the stochastic activation sites.
    pub fn probact_sites(&self) -> &[(String, Vec<usize>)] {
        &self.sites
    }

    /// Raw trainable parameter (sigma or k) of each stochastic site, in
    /// site order; the shared scalar appears once per site in single mode.
    pub fn site_params(&self) -> Vec<Option<ParamId>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Act { site, param } if *site != u32::MAX => Some(*param),
                _ => None,
            })
            .collect()
    }

    pub fn shared_sigma(&self) -> Option<ParamId> {
        self.shared_sigma
    }

    /// Effective sigma values of every stochastic site.
    pub fn site_sigmas(&self) -> Result<Vec<Tensor<T>>> {
        let Some(cfg) = self.activation.probact_config() else {
            return Ok(Vec::new());
        };
        self.site_params()
            .into_iter()
            .map(|p| cfg.sigma_of(p.map(|id| self.params.value(id))))
            .collect()
    }

    /// Records one forward pass on `tape` and returns the logits node.
    ///
    /// `eval` selects how stochastic sites behave in [`Phase::Eval`]; a
    /// multi-draw average is done by the caller over `draw` ids (see
    /// [`Model::predict`]) so it is treated as a single stochastic draw here.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        phase: Phase,
        eval: EvalMode,
        noise_seed: u64,
        step: u64,
        draw: u32,
    ) -> Result<NodeId> {
        let expected: Vec<usize> = self.options.input.clone();
        if x.rank() != 4 || x.shape()[1..] != expected[..] {
            return Err(Error::shape(format!(
                "model expects [N, {}, {}, {}], got {:?}",
                expected[0],
                expected[1],
                expected[2],
                x.shape()
            )));
        }
        let mut h = tape.input(x);
        for (i, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                Layer::Conv { weight, bias } => {
                    let (w, b) = (tape.param(&self.params, weight), tape.param(&self.params, bias));
                    layers::ops::conv2d(tape, h, w, b, 1)?
                }
                Layer::BatchNorm { gamma, beta, state } => {
                    let (g, b) = (tape.param(&self.params, gamma), tape.param(&self.params, beta));
                    layers::ops::batchnorm(tape, h, g, b, &mut self.bn[state], phase)?
                }
                Layer::Act { site, param } => {
                    let p = param.map(|id| tape.param(&self.params, id));
                    match &self.activation {
                        Activation::Relu => activation::ops::relu(tape, h),
                        Activation::LeakyRelu => activation::ops::leaky_relu(tape, h),
                        Activation::Swish => activation::ops::swish(tape, h),
                        Activation::Prelu => activation::ops::prelu(tape, h, p.expect("prelu slope"))?,
                        Activation::ProbAct { config } => {
                            let cfg = match eval {
                                EvalMode::Mean => config.with_eval(EvalMode::Mean),
                                _ => config.with_eval(EvalMode::Stochastic),
                            };
                            let key = NoiseKey::new(noise_seed, site, step, draw);
                            probact::probact(tape, h, p, &cfg, key, phase)?.0
                        }
                    }
                }
                Layer::Pool => layers::ops::maxpool2d(tape, h, 2)?,
                Layer::Flatten => layers::ops::flatten(tape, h)?,
                Layer::Dropout { p } => {
                    let key = NoiseKey::new(noise_seed, DROPOUT_LAYER + i as u32, step, draw);
                    layers::ops::dropout(tape, h, p, phase, key)?
                }
                Layer::Dense { weight, bias } => {
                    let (w, b) = (tape.param(&self.params, weight), tape.param(&self.params, bias));
                    layers::ops::dense(tape, h, w, b)?
                }
            };
        }
        Ok(h)
    }

    /// Evaluation-mode logits. `McAverage(n)` averages the logits of `n`
    /// full passes with draw ids `0..n`.
    pub fn predict(&mut self, x: &Tensor<T>, eval: EvalMode, noise_seed: u64, step: u64) -> Result<Tensor<T>> {
        let step = step | EVAL_STEP_BIT;
        let draws = match eval {
            EvalMode::McAverage(n) if self.activation.probact_config().is_some() => n,
            _ => 1,
        };
        let mut acc: Option<Tensor<T>> = None;
        for d in 0..draws {
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, x.clone(), Phase::Eval, eval, noise_seed, step, d)?;
            let v = tape.value(out).clone();
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(&v)?,
            });
        }
        let sum = acc.expect("at least one draw");
        let inv = T::of(1.0 / f64::from(draws));
        Ok(sum.map(move |v| v * inv))
    }

    /// Copy of this model with every activation site replaced by `activation`.
    /// Weights, biases and batch-norm statistics are kept; parameters that
    /// only the old activation used are dropped.
    pub fn with_activation(&self, activation: Activation) -> Result<Model<T>> {
        let mut next = build_model::<T>(&self.spec, activation, self.options.clone())?;
        for id in next.params.ids().collect::<Vec<_>>() {
            let name = next.params.get(id).name.clone();
            if let Some(src) = self.params.find(&name) {
                if self.params.value(src).shape() == next.params.value(id).shape() {
                    next.params.get_mut(id).value = self.params.value(src).clone();
                }
            }
        }
        next.bn = self.bn.clone();
        Ok(next)
    }

    /// Same network in another float type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name.clone(), p.value.cast(), p.trainable);
        }
        Model {
            spec: self.spec.clone(),
            activation: self.activation,
            options: self.options.clone(),
            params,
            bn: self.bn.clone(),
            layers: self.layers.clone(),
            sites: self.sites.clone(),
            shared_sigma: self.shared_sigma,
        }
    }
}
