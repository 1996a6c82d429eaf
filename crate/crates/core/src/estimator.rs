//! Estimation of the per-layer EvalNorm weights (α̂, β̂).
//!
//! The auxiliary loss compares the training-time normalized activations of a
//! sample with the reconstruction obtained from its own instance moments mixed
//! with EMA moments:
//!
//! ```text
//! μ̂  = α̂·sg(μ_i) + (1-α̂)·μ_E
//! σ̂² = β̂·sg(σ_i)² + (1-β̂)·σ²_E + β̂(1-β̂)·(sg(μ_i) - μ_E)²
//! L   = mean | sg((x_i - μ_B)/σ_B) - (sg(x_i) - μ̂)/sqrt(σ̂² + eps) |
//! ```
//!
//! Every model-side input enters through `stop_gradient`, so only α̂ and β̂
//! receive gradient and model training is unaffected when the loss is added
//! to the task loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{batch_iterator, Dataset};
use crate::error::{config_err, Error, Result};
use crate::model::{Model, TrainPassOptions};
use crate::normalization::{EmaState, MomentPair};
use crate::optim::{cosine_lr, momentum_step};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Estimated mixing weights of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnParams {
    pub layer_id: usize,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    /// Momentum buffers for `alpha_hat` and `beta_hat`.
    pub velocity: [f64; 2],
}

impl EnParams {
    pub fn new(layer_id: usize, alpha_hat: f64, beta_hat: f64) -> Self {
        EnParams {
            layer_id,
            alpha_hat,
            beta_hat,
            velocity: [0.0; 2],
        }
    }

    /// One momentum-SGD step followed by projection onto `[0, 1]`.
    pub fn apply_gradient(&mut self, grad_alpha: f64, grad_beta: f64, lr: f64, momentum: f64) {
        momentum_step(&mut self.alpha_hat, &mut self.velocity[0], grad_alpha, lr, momentum);
        momentum_step(&mut self.beta_hat, &mut self.velocity[1], grad_beta, lr, momentum);
        *self = project_params(self);
    }
}

/// Clamps `alpha_hat` and `beta_hat` into `[0, 1]`.
pub fn project_params(en: &EnParams) -> EnParams {
    EnParams {
        alpha_hat: en.alpha_hat.clamp(0.0, 1.0),
        beta_hat: en.beta_hat.clamp(0.0, 1.0),
        ..en.clone()
    }
}

/// Auxiliary loss of one layer at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxLossReport {
    pub layer_id: usize,
    pub step: usize,
    pub loss: f64,
}

/// Optimizer settings for (α̂, β̂).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnSettings {
    pub lr: f64,
    pub momentum: f64,
    /// Initial α̂ = β̂; `None` starts at `1/B`.
    pub init: Option<f64>,
}

impl Default for EnSettings {
    fn default() -> Self {
        EnSettings {
            lr: 0.01,
            momentum: 0.9,
            init: None,
        }
    }
}

impl EnSettings {
    pub fn initial_params(&self, layers: usize, microbatch: usize) -> Result<Vec<EnParams>> {
        let v = self.init.unwrap_or(1.0 / microbatch as f64);
        if !(0.0..=1.0).contains(&v) {
            return Err(config_err!("EvalNorm init {} not in [0, 1]", v));
        }
        Ok((0..layers).map(|id| EnParams::new(id, v, v)).collect())
    }
}

/// Records the auxiliary loss of one layer on `tape`.
///
/// * `x`: the layer's input for a normalization microbatch, `[B, C, ...]`.
/// * `target`: training-time normalized activations `(x - μ_B)/σ_B` for the same microbatch.
/// * `alpha`, `beta`: rank-0 variables holding α̂ and β̂.
///
/// `x` and `target` are wrapped in `stop_gradient`; the result depends only on
/// `alpha` and `beta`. The L1 discrepancy is averaged over all elements, which
/// equals averaging the per-sample mean over the microbatch.
pub fn aux_loss_graph(
    tape: &mut Tape,
    x: Var,
    target: Var,
    state: &EmaState,
    alpha: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() < 2 || shape[1] != state.channels() {
        return Err(config_err!(
            "aux loss input {:?} vs EMA with {} channels",
            shape,
            state.channels()
        ));
    }
    let mut channel_shape = vec![1; shape.len()];
    channel_shape[1] = shape[1];
    let spatial: Vec<usize> = (2..shape.len()).collect();

    let xs = tape.stop_gradient(x);
    let tgt = tape.stop_gradient(target);

    let mu_i = tape.mean_axes(xs, &spatial, true)?;
    let dev = tape.sub(xs, mu_i)?;
    let dev_sq = tape.square(dev);
    let var_i = tape.mean_axes(dev_sq, &spatial, true)?;

    let mu_e = tape.constant(Tensor::new(channel_shape.clone(), state.mean.clone())?);
    let var_e = tape.constant(Tensor::new(channel_shape, state.variance.clone())?);
    let one = tape.scalar(1.0);

    // μ̂ = α̂·μ_i + (1-α̂)·μ_E
    let one_minus_a = tape.sub(one, alpha)?;
    let own_mean = tape.mul(alpha, mu_i)?;
    let ema_mean = tape.mul(one_minus_a, mu_e)?;
    let mu_hat = tape.add(own_mean, ema_mean)?;

    // σ̂² = β̂·σ²_i + (1-β̂)·σ²_E + β̂(1-β̂)(μ_i - μ_E)²
    let one_minus_b = tape.sub(one, beta)?;
    let own_var = tape.mul(beta, var_i)?;
    let ema_var = tape.mul(one_minus_b, var_e)?;
    let gap = tape.sub(mu_i, mu_e)?;
    let gap_sq = tape.square(gap);
    let bb = tape.mul(beta, one_minus_b)?;
    let cross = tape.mul(bb, gap_sq)?;
    let partial = tape.add(own_var, ema_var)?;
    let var_hat = tape.add(partial, cross)?;

    let eps_v = tape.scalar(eps);
    let shifted = tape.add(var_hat, eps_v)?;
    let sigma_hat = tape.sqrt(shifted)?;
    let centered = tape.sub(xs, mu_hat)?;
    let recon = tape.div(centered, sigma_hat)?;
    let diff = tape.sub(tgt, recon)?;
    let abs = tape.abs(diff);
    tape.mean_all(abs)
}

/// Value and (α̂, β̂)-gradient of the auxiliary loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxEval {
    pub loss: f64,
    pub grad_alpha: f64,
    pub grad_beta: f64,
}

/// Auxiliary loss for samples `x_i: [n, C, ...]` drawn from a microbatch whose
/// moments are `batch_m`.
pub fn aux_loss(x_i: &Tensor, batch_m: &MomentPair, state: &EmaState, en: &EnParams, eps: f64) -> Result<AuxEval> {
    let shape = x_i.shape();
    if shape.len() < 2 || shape[1] != batch_m.channels() {
        return Err(config_err!(
            "aux loss input {:?} vs moments with {} channels",
            shape,
            batch_m.channels()
        ));
    }
    let mut channel_shape = vec![1; shape.len()];
    channel_shape[1] = shape[1];

    let mut tape = Tape::new();
    let x = tape.constant(x_i.clone());
    let mb = tape.constant(Tensor::new(channel_shape.clone(), batch_m.mean.clone())?);
    let vb = tape.constant(Tensor::new(channel_shape, batch_m.variance.clone())?);
    let eps_v = tape.scalar(eps);
    let centered = tape.sub(x, mb)?;
    let shifted = tape.add(vb, eps_v)?;
    let std = tape.sqrt(shifted)?;
    let target = tape.div(centered, std)?;

    let alpha = tape.leaf(Tensor::scalar(en.alpha_hat));
    let beta = tape.leaf(Tensor::scalar(en.beta_hat));
    let loss = aux_loss_graph(&mut tape, x, target, state, alpha, beta, eps)?;
    let value = tape.value(loss).item()?;
    if !(value >= 0.0) {
        return Err(Error::NumericDomain(alloc::format!("aux loss {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok(AuxEval {
        loss: value,
        grad_alpha: grads.wrt(alpha, &tape).item()?,
        grad_beta: grads.wrt(beta, &tape).item()?,
    })
}

/// Offline estimation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub sgd_batch: usize,
    pub microbatch: usize,
    /// Optimizer steps; `None` = one epoch capped at 2000 steps.
    pub steps: Option<usize>,
    pub en: EnSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineEstimate {
    pub params: Vec<EnParams>,
    /// Per-step, per-layer auxiliary losses.
    pub losses: Vec<AuxLossReport>,
}

/// Fits (α̂, β̂) for every normalization layer of a frozen model.
///
/// Forward passes run in training mode over microbatches of the configured
/// size; only the EvalNorm parameters are updated. The model is borrowed
/// immutably, so its weights and EMA state are untouched.
pub fn estimate_offline(model: &Model, data: &Dataset, cfg: &OfflineConfig) -> Result<OfflineEstimate> {
    let steps_per_epoch = data.len() / cfg.sgd_batch.max(1);
    let steps = cfg.steps.unwrap_or_else(|| steps_per_epoch.min(2000));
    if steps < 1 {
        return Err(config_err!("offline estimation needs at least one step"));
    }
    if steps_per_epoch == 0 {
        return Err(config_err!(
            "dataset of {} examples is smaller than one batch of {}",
            data.len(),
            cfg.sgd_batch
        ));
    }
    let mut params = match model.en_params() {
        Some(existing) if cfg.en.init.is_none() => existing,
        _ => cfg.en.initial_params(model.norm_count(), cfg.microbatch)?,
    };
    let mut losses = Vec::with_capacity(steps * params.len());
    let mut step = 0;
    let mut epoch = 0;
    'outer: loop {
        for batch in batch_iterator(data, cfg.sgd_batch, cfg.microbatch, cfg.seed, epoch)? {
            if step == steps {
                break 'outer;
            }
            let (x, _) = batch.materialize(data)?;
            let mut tape = Tape::new();
            let pass = model.forward_train(
                &mut tape,
                &x,
                cfg.microbatch,
                &TrainPassOptions {
                    trainable: false,
                    aux: Some(&params),
                },
            )?;
            let aux: Vec<_> = pass.norms.iter().filter_map(|n| n.aux).collect();
            let mut total = aux[0].loss;
            for a in &aux[1..] {
                total = tape.add(total, a.loss)?;
            }
            let grads = tape.backward(total)?;
            let lr = cosine_lr(cfg.en.lr, step, steps);
            for (p, a) in params.iter_mut().zip(&aux) {
                losses.push(AuxLossReport {
                    layer_id: p.layer_id,
                    step,
                    loss: tape.value(a.loss).item()?,
                });
                p.apply_gradient(
                    grads.wrt(a.alpha, &tape).item()?,
                    grads.wrt(a.beta, &tape).item()?,
                    lr,
                    cfg.en.momentum,
                );
            }
            step += 1;
        }
        epoch += 1;
    }
    Ok(OfflineEstimate { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_clamps() {
        let p = project_params(&EnParams::new(0, 1.2, -0.1));
        assert_eq!((p.alpha_hat, p.beta_hat), (1.0, 0.0));
        let q = project_params(&EnParams::new(0, 0.5, 0.5));
        assert_eq!((q.alpha_hat, q.beta_hat), (0.5, 0.5));
    }

    #[test]
    fn projection_is_idempotent() {
        for (a, b) in [(1.7, 0.3), (-3.0, 2.0), (0.0, 1.0)] {
            let once = project_params(&EnParams::new(1, a, b));
            assert_eq!(project_params(&once), once);
        }
    }

    #[test]
    fn initial_params_default_to_inverse_batch() {
        let p = EnSettings::default().initial_params(3, 4).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|e| e.alpha_hat == 0.25 && e.beta_hat == 0.25));
        assert_eq!(p[2].layer_id, 2);
        let bad = EnSettings {
            init: Some(2.0),
            ..EnSettings::default()
        };
        assert!(bad.initial_params(1, 2).is_err());
    }

    #[test]
    fn gradient_step_projects() {
        let mut p = EnParams::new(0, 0.99, 0.01);
        p.apply_gradient(-10.0, 10.0, 0.1, 0.9);
        assert_eq!((p.alpha_hat, p.beta_hat), (1.0, 0.0));
    }
}
