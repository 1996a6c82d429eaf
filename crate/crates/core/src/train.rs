//! Microbatched training with EMA tracking and optional online estimation of
//! the EvalNorm parameters.
//!
//! Gradients are averaged over the whole SGD batch while normalization
//! statistics come from each microbatch. The EMA is updated once per
//! microbatch, in microbatch order. When online estimation is enabled the
//! auxiliary losses are added to the task loss; they reach only (α̂, β̂).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{batch_iterator, Dataset};
use crate::error::{config_err, Error, Result};
use crate::estimator::EnSettings;
use crate::model::{argmax_rows, Model, TrainPassOptions};
use crate::normalization::{ema_update, rule_of_thumb_alpha, NormMode};
use crate::optim::{cosine_lr, momentum_step};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    /// SGD batch size G.
    pub sgd_batch: usize,
    /// Normalization microbatch size B; must divide G.
    pub microbatch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Online estimation of (α̂, β̂).
    pub en_enabled: bool,
    pub en: EnSettings,
    pub seed: u64,
}

impl TrainSettings {
    /// Defaults: G = 64, 20 epochs, lr 0.05·G/128 with cosine decay, momentum 0.9.
    pub fn new(microbatch: usize, seed: u64) -> Self {
        let sgd_batch = 64;
        TrainSettings {
            epochs: 20,
            sgd_batch,
            microbatch,
            base_lr: 0.05 * sgd_batch as f64 / 128.0,
            momentum: 0.9,
            en_enabled: true,
            en: EnSettings::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.sgd_batch == 0 || self.microbatch == 0 {
            return Err(config_err!("epochs and batch sizes must be positive"));
        }
        if !self.sgd_batch.is_multiple_of(self.microbatch) {
            return Err(config_err!(
                "normalization microbatch {} must divide SGD batch {}",
                self.microbatch,
                self.sgd_batch
            ));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("invalid learning rate or momentum"));
        }
        Ok(())
    }
}

/// Evaluation modes reported for every run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalModeTag {
    Ema,
    En,
    /// Fixed α = β = 1/B.
    SimpleInvB,
    /// Fixed α = β = 1/B² (rule of thumb).
    SimpleInvB2,
    /// Instance statistics only (α = β = 1).
    Instance,
}

impl EvalModeTag {
    pub const ALL: [EvalModeTag; 5] = [
        EvalModeTag::Ema,
        EvalModeTag::En,
        EvalModeTag::SimpleInvB,
        EvalModeTag::SimpleInvB2,
        EvalModeTag::Instance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalModeTag::Ema => "ema",
            EvalModeTag::En => "en",
            EvalModeTag::SimpleInvB => "simple_inv_b",
            EvalModeTag::SimpleInvB2 => "simple_inv_b2",
            EvalModeTag::Instance => "instance",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// The normalization mode for microbatch size `b`.
    pub fn mode(self, b: usize) -> NormMode {
        match self {
            EvalModeTag::Ema => NormMode::EvalEMA,
            EvalModeTag::En => NormMode::EvalEN,
            EvalModeTag::SimpleInvB => NormMode::EvalSimple(1.0 / b as f64),
            EvalModeTag::SimpleInvB2 => NormMode::EvalSimple(rule_of_thumb_alpha(b)),
            EvalModeTag::Instance => NormMode::EvalSimple(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean task loss over the epoch's steps.
    pub train_loss: f64,
    pub eval: Vec<(EvalModeTag, f64)>,
    /// Mean auxiliary loss per normalization layer (empty without online estimation).
    pub aux_loss: Vec<f64>,
    /// (α̂, β̂) per layer at the end of the epoch.
    pub en: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub microbatch: usize,
    pub sgd_batch: usize,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn final_accuracy(&self, mode: EvalModeTag) -> Option<f64> {
        self.epochs
            .last()?
            .eval
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|(_, a)| *a)
    }
}

/// Classification accuracy under an evaluation mode, processed in chunks of
/// `chunk` examples. Evaluation is per-sample, so `chunk` never changes the result.
pub fn evaluate_accuracy(model: &Model, data: &Dataset, mode: NormMode, chunk: usize) -> Result<f64> {
    let chunk = chunk.max(1);
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(chunk) {
        let (x, y) = data.gather(part)?;
        let logits = model.forward_eval(&x, mode)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub task_loss: f64,
    /// Per-layer auxiliary loss (empty without online estimation).
    pub aux_loss: Vec<f64>,
}

/// Owns the optimizer state of one training run.
#[derive(Debug)]
pub struct Trainer<'m> {
    model: &'m mut Model,
    settings: TrainSettings,
    velocity: Vec<Tensor>,
    step: usize,
    total_steps: usize,
}

impl<'m> Trainer<'m> {
    /// `total_steps` sets the length of the cosine schedule.
    pub fn new(model: &'m mut Model, settings: TrainSettings, total_steps: usize) -> Result<Self> {
        settings.validate()?;
        if settings.en_enabled && model.en_params().is_none() {
            let init = settings.en.initial_params(model.norm_count(), settings.microbatch)?;
            model.set_en_params(init)?;
        }
        let velocity = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(Trainer {
            model,
            settings,
            velocity,
            step: 0,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// One SGD step on batch `x` (size G) with `labels`.
    pub fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let b = self.settings.microbatch;
        let en_now = if self.settings.en_enabled {
            self.model.en_params()
        } else {
            None
        };
        let mut tape = Tape::new();
        let pass = self.model.forward_train(
            &mut tape,
            x,
            b,
            &TrainPassOptions {
                trainable: true,
                aux: en_now.as_deref(),
            },
        )?;
        let task = tape.softmax_cross_entropy(pass.logits, labels)?;
        let task_loss = tape.value(task).item()?;
        if !task_loss.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite loss {task_loss} at step {}",
                self.step
            )));
        }
        let mut total = task;
        let mut aux_loss = Vec::new();
        for trace in &pass.norms {
            if let Some(aux) = trace.aux {
                aux_loss.push(tape.value(aux.loss).item()?);
                total = tape.add(total, aux.loss)?;
            }
        }
        let grads = tape.backward(total)?;

        let lr = cosine_lr(self.settings.base_lr, self.step, self.total_steps);
        let momentum = self.settings.momentum;
        for ((param, var), vel) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(&pass.params)
            .zip(&mut self.velocity)
        {
            let Some(g) = grads.get(*var) else { continue };
            for ((p, v), &gv) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(g.data())
            {
                momentum_step(p, v, gv, lr, momentum);
            }
        }

        let en_lr = cosine_lr(self.settings.en.lr, self.step, self.total_steps);
        let en_momentum = self.settings.en.momentum;
        for (layer, trace) in self.model.norms_mut().iter_mut().zip(&pass.norms) {
            for m in &trace.moments {
                layer.ema = ema_update(&layer.ema, m)?;
            }
            if let (Some(aux), Some(en)) = (trace.aux, layer.en.as_mut()) {
                en.apply_gradient(
                    grads.wrt(aux.alpha, &tape).item()?,
                    grads.wrt(aux.beta, &tape).item()?,
                    en_lr,
                    en_momentum,
                );
            }
        }
        self.step += 1;
        Ok(StepReport { task_loss, aux_loss })
    }
}

/// Full training run with per-epoch evaluation under every available mode.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    eval_data: &Dataset,
    settings: &TrainSettings,
    run_id: &str,
) -> Result<RunRecord> {
    settings.validate()?;
    let steps_per_epoch = train_data.len() / settings.sgd_batch;
    if steps_per_epoch == 0 {
        return Err(config_err!(
            "{} training examples do not fill one batch of {}",
            train_data.len(),
            settings.sgd_batch
        ));
    }
    let total = steps_per_epoch * settings.epochs;
    let mut trainer = Trainer::new(model, settings.clone(), total)?;
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut loss_sum = 0.0;
        let mut aux_sum: Vec<f64> = Vec::new();
        let mut steps = 0usize;
        for batch in batch_iterator(
            train_data,
            settings.sgd_batch,
            settings.microbatch,
            settings.seed,
            epoch as u64,
        )? {
            let (x, y) = batch.materialize(train_data)?;
            let report = trainer.step(&x, &y)?;
            loss_sum += report.task_loss;
            if aux_sum.is_empty() {
                aux_sum = alloc::vec![0.0; report.aux_loss.len()];
            }
            for (s, a) in aux_sum.iter_mut().zip(&report.aux_loss) {
                *s += a;
            }
            steps += 1;
        }
        let model = trainer.model();
        let mut eval = Vec::new();
        for tag in EvalModeTag::ALL {
            if tag == EvalModeTag::En && model.en_params().is_none() {
                continue;
            }
            let acc = evaluate_accuracy(model, eval_data, tag.mode(settings.microbatch), 512)?;
            eval.push((tag, acc));
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            eval,
            aux_loss: aux_sum.iter().map(|s| s / steps as f64).collect(),
            en: model
                .en_params()
                .map(|ps| ps.iter().map(|p| (p.alpha_hat, p.beta_hat)).collect())
                .unwrap_or_default(),
        });
    }
    Ok(RunRecord {
        run_id: run_id.into(),
        microbatch: settings.microbatch,
        sgd_batch: settings.sgd_batch,
        epochs,
    })
}
