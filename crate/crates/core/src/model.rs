//! Small reference models with batch-normalized hidden layers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::estimator::{aux_loss_graph, EnParams};
use crate::normalization::{
    apply_affine, bn_train_forward, eval_normalized, AffineParams, EmaState, MomentPair, NormMode,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Linear → BN → ReLU blocks, linear head. Input `[D]`.
    Mlp,
    /// Conv3x3 → BN → ReLU blocks, global average pool, linear head. Input `[C, H, W]`.
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-example input shape.
    pub input_shape: Vec<usize>,
    /// Hidden widths (MLP) or channel counts (CNN), one per block.
    pub widths: Vec<usize>,
    /// Whether each block carries a normalization layer.
    pub normalize: Vec<bool>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// MLP with a normalization layer after every hidden layer.
    pub fn mlp(input: usize, widths: &[usize], num_classes: usize, seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape: vec![input],
            widths: widths.to_vec(),
            normalize: vec![true; widths.len()],
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(config_err!("widths must be non-empty and >= 1: {:?}", self.widths));
        }
        if self.normalize.len() != self.widths.len() {
            return Err(config_err!(
                "{} normalization flags for {} blocks",
                self.normalize.len(),
                self.widths.len()
            ));
        }
        if !self.normalize.iter().any(|&n| n) {
            return Err(config_err!("model needs at least one normalization layer"));
        }
        if self.num_classes == 0 || self.input_shape.contains(&0) {
            return Err(config_err!("classes and input extents must be >= 1"));
        }
        match (self.kind, self.input_shape.len()) {
            (ModelKind::Mlp, 1) | (ModelKind::SmallCnn, 3) => Ok(()),
            (kind, _) => Err(config_err!(
                "{:?} cannot take input shape {:?}",
                kind,
                self.input_shape
            )),
        }
    }
}

/// Epsilon and EMA decay shared by every normalization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub eps: f64,
    pub ema_decay: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        NormSettings {
            eps: 1e-5,
            ema_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    /// Index into [`Model::params`] of the scale γ.
    pub gamma: usize,
    /// Index into [`Model::params`] of the shift β.
    pub beta: usize,
    pub ema: EmaState,
    pub en: Option<EnParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Linear { weight: usize, bias: Option<usize> },
    Conv { kernel: usize, bias: Option<usize> },
    Norm(usize),
    Relu,
    GlobalAvgPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    norm: NormSettings,
    layers: Vec<Layer>,
    params: Vec<Param>,
    norms: Vec<NormLayer>,
}

/// Auxiliary-loss variables of one normalization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxVars {
    /// Mean auxiliary loss over the layer's microbatches.
    pub loss: Var,
    pub alpha: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct NormTrace {
    /// Batch moments of each normalization microbatch, in order.
    pub moments: Vec<MomentPair>,
    /// Pre-affine normalized activations for the whole batch.
    pub normalized: Var,
    pub aux: Option<AuxVars>,
}

#[derive(Debug, Clone)]
pub struct TrainPass {
    pub logits: Var,
    /// One variable per entry of [`Model::params`].
    pub params: Vec<Var>,
    pub norms: Vec<NormTrace>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainPassOptions<'a> {
    /// Weights become tape leaves (otherwise constants).
    pub trainable: bool,
    /// Record the auxiliary loss of every normalization layer with these (α̂, β̂).
    pub aux: Option<&'a [EnParams]>,
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Per-layer, per-microbatch moments (training mode only).
    pub moments: Option<Vec<Vec<MomentPair>>>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Model {
    /// Deterministic He-initialized model; γ = 1, β = 0, EMA at (0, 1).
    pub fn build(spec: &ModelSpec, norm: NormSettings) -> Result<Model> {
        spec.validate()?;
        if !(norm.eps > 0.0) {
            return Err(config_err!("eps must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, value: Tensor| {
            params.push(Param { name, value });
            params.len() - 1
        };

        let mut width = spec.input_shape[0];
        for (i, (&w, &normalized)) in spec.widths.iter().zip(&spec.normalize).enumerate() {
            let (weight, prefix) = match spec.kind {
                ModelKind::Mlp => (he_normal(&mut rng, &[width, w], width), format!("fc{i}")),
                ModelKind::SmallCnn => (
                    he_normal(&mut rng, &[w, width, 3, 3], width * 9),
                    format!("conv{i}"),
                ),
            };
            let weight = push(&mut params, format!("{prefix}.weight"), weight);
            let bias = (!normalized)
                .then(|| push(&mut params, format!("{prefix}.bias"), Tensor::zeros(&[w])));
            layers.push(match spec.kind {
                ModelKind::Mlp => Layer::Linear { weight, bias },
                ModelKind::SmallCnn => Layer::Conv { kernel: weight, bias },
            });
            if normalized {
                let id = norms.len();
                let gamma = push(&mut params, format!("bn{id}.gamma"), Tensor::full(&[w], 1.0));
                let beta = push(&mut params, format!("bn{id}.beta"), Tensor::zeros(&[w]));
                norms.push(NormLayer {
                    gamma,
                    beta,
                    ema: EmaState::new(w, norm.ema_decay)?,
                    en: None,
                });
                layers.push(Layer::Norm(id));
            }
            layers.push(Layer::Relu);
            width = w;
        }
        if spec.kind == ModelKind::SmallCnn {
            layers.push(Layer::GlobalAvgPool);
        }
        let weight = push(
            &mut params,
            "head.weight".into(),
            he_normal(&mut rng, &[width, spec.num_classes], width),
        );
        let bias = push(&mut params, "head.bias".into(), Tensor::zeros(&[spec.num_classes]));
        layers.push(Layer::Linear {
            weight,
            bias: Some(bias),
        });
        Ok(Model {
            spec: spec.clone(),
            norm,
            layers,
            params,
            norms,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn norm_settings(&self) -> NormSettings {
        self.norm
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Replaces a parameter by name; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| config_err!("unknown parameter {}", name))?;
        if p.value.shape() != value.shape() {
            return Err(config_err!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn norms(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer] {
        &mut self.norms
    }

    pub fn norm_count(&self) -> usize {
        self.norms.len()
    }

    pub fn affine(&self, layer: usize) -> AffineParams {
        let n = &self.norms[layer];
        AffineParams {
            scale: self.params[n.gamma].value.data().to_vec(),
            shift: self.params[n.beta].value.data().to_vec(),
            trainable: true,
        }
    }

    /// EvalNorm parameters of every layer, if all layers have them.
    pub fn en_params(&self) -> Option<Vec<EnParams>> {
        self.norms.iter().map(|n| n.en.clone()).collect()
    }

    pub fn set_en_params(&mut self, params: Vec<EnParams>) -> Result<()> {
        if params.len() != self.norms.len() {
            return Err(config_err!(
                "{} EvalNorm parameter sets for {} layers",
                params.len(),
                self.norms.len()
            ));
        }
        for (n, p) in self.norms.iter_mut().zip(params) {
            n.en = Some(p);
        }
        Ok(())
    }

    fn batch_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(config_err!(
                "input {:?} does not match [N, {:?}]",
                x.shape(),
                self.spec.input_shape
            ));
        }
        if x.shape()[0] == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Training-mode forward pass recorded on `tape`. Every normalization
    /// layer normalizes each contiguous group of `microbatch` samples with
    /// that group's own moments.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        microbatch: usize,
        opts: &TrainPassOptions<'_>,
    ) -> Result<TrainPass> {
        self.batch_input(x)?;
        let n = x.shape()[0];
        if microbatch == 0 || !n.is_multiple_of(microbatch) {
            return Err(config_err!("microbatch {} must divide batch {}", microbatch, n));
        }
        if let Some(aux) = opts.aux {
            if aux.len() != self.norms.len() {
                return Err(config_err!(
                    "{} EvalNorm parameter sets for {} layers",
                    aux.len(),
                    self.norms.len()
                ));
            }
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if opts.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let mut traces = Vec::with_capacity(self.norms.len());
        let mut h = tape.constant(x.clone());
        let eps = self.norm.eps;
        for layer in &self.layers {
            h = match *layer {
                Layer::Linear { weight, bias } => {
                    let y = tape.matmul(h, params[weight])?;
                    match bias {
                        Some(b) => tape.add(y, params[b])?,
                        None => y,
                    }
                }
                Layer::Conv { kernel, bias } => {
                    let y = tape.conv2d_3x3(h, params[kernel])?;
                    match bias {
                        Some(b) => {
                            let c = tape.value(params[b]).numel();
                            let rb = tape.reshape(params[b], &[1, c, 1, 1])?;
                            tape.add(y, rb)?
                        }
                        None => y,
                    }
                }
                Layer::Relu => tape.relu(h),
                Layer::GlobalAvgPool => tape.mean_axes(h, &[2, 3], false)?,
                Layer::Norm(id) => {
                    let norm = &self.norms[id];
                    let (gamma, beta) = (params[norm.gamma], params[norm.beta]);
                    let en_vars = opts.aux.map(|aux| {
                        (
                            tape.leaf(Tensor::scalar(aux[id].alpha_hat)),
                            tape.leaf(Tensor::scalar(aux[id].beta_hat)),
                        )
                    });
                    let groups = n / microbatch;
                    let mut outputs = Vec::with_capacity(groups);
                    let mut normalized = Vec::with_capacity(groups);
                    let mut moments = Vec::with_capacity(groups);
                    let mut aux_total: Option<Var> = None;
                    for g in 0..groups {
                        let seg = if groups == 1 {
                            h
                        } else {
                            tape.slice(h, 0, g * microbatch, (g + 1) * microbatch)?
                        };
                        let bn = bn_train_forward(tape, seg, gamma, beta, eps)?;
                        if let Some((a, b)) = en_vars {
                            let l = aux_loss_graph(tape, seg, bn.normalized, &norm.ema, a, b, eps)?;
                            aux_total = Some(match aux_total {
                                Some(acc) => tape.add(acc, l)?,
                                None => l,
                            });
                        }
                        outputs.push(bn.output);
                        normalized.push(bn.normalized);
                        moments.push(bn.moments);
                    }
                    let aux = match (aux_total, en_vars) {
                        (Some(total), Some((alpha, beta))) => {
                            let inv = tape.scalar(1.0 / groups as f64);
                            Some(AuxVars {
                                loss: tape.mul(total, inv)?,
                                alpha,
                                beta,
                            })
                        }
                        _ => None,
                    };
                    let (out, normalized) = if groups == 1 {
                        (outputs[0], normalized[0])
                    } else {
                        (tape.concat(&outputs, 0)?, tape.concat(&normalized, 0)?)
                    };
                    traces.push(NormTrace {
                        moments,
                        normalized,
                        aux,
                    });
                    out
                }
            };
        }
        Ok(TrainPass {
            logits: h,
            params,
            norms: traces,
        })
    }

    /// Evaluation-mode forward pass; `probe` receives each normalization
    /// layer's pre-affine activations. Never mutates the model.
    pub fn forward_eval_with(
        &self,
        x: &Tensor,
        mode: NormMode,
        mut probe: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        self.batch_input(x)?;
        mode.validate()?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match *layer {
                Layer::Linear { weight, bias } => {
                    let y = h.matmul(&self.params[weight].value)?;
                    match bias {
                        Some(b) => y.add(&self.params[b].value)?,
                        None => y,
                    }
                }
                Layer::Conv { kernel, bias } => {
                    let y = h.conv2d_3x3(&self.params[kernel].value)?;
                    match bias {
                        Some(b) => {
                            let bv = &self.params[b].value;
                            y.add(&bv.reshape(&[1, bv.numel(), 1, 1])?)?
                        }
                        None => y,
                    }
                }
                Layer::Relu => h.map(|v| if v > 0.0 { v } else { 0.0 }),
                Layer::GlobalAvgPool => h.mean_axes(&[2, 3], false)?,
                Layer::Norm(id) => {
                    let norm = &self.norms[id];
                    let mix = match mode {
                        NormMode::EvalEMA => None,
                        NormMode::EvalSimple(a) => Some((a, a)),
                        NormMode::EvalEN => {
                            let en = norm.en.as_ref().ok_or_else(|| {
                                config_err!("normalization layer {} has no EvalNorm parameters", id)
                            })?;
                            Some((en.alpha_hat, en.beta_hat))
                        }
                        NormMode::TrainBN => {
                            return Err(config_err!("training mode needs forward_train"))
                        }
                    };
                    let normalized = eval_normalized(&h, &norm.ema, mix, self.norm.eps)?;
                    probe(id, &normalized);
                    apply_affine(&normalized, &self.affine(id))?
                }
            };
        }
        Ok(h)
    }

    pub fn forward_eval(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        self.forward_eval_with(x, mode, |_, _| {})
    }

    /// Routes every normalization layer through `mode`. `TrainBN` normalizes
    /// over contiguous microbatches of `microbatch` samples and reports their
    /// moments; the other modes ignore `microbatch`.
    pub fn forward(&self, x: &Tensor, mode: NormMode, microbatch: usize) -> Result<ForwardOutput> {
        match mode {
            NormMode::TrainBN => {
                let mut tape = Tape::new();
                let pass = self.forward_train(&mut tape, x, microbatch, &TrainPassOptions::default())?;
                Ok(ForwardOutput {
                    logits: tape.value(pass.logits).clone(),
                    moments: Some(pass.norms.into_iter().map(|n| n.moments).collect()),
                })
            }
            _ => Ok(ForwardOutput {
                logits: self.forward_eval(x, mode)?,
                moments: None,
            }),
        }
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
