//! Training, evaluation, sweeps and offline estimation driven by a [`RunConfig`].

use std::path::{Path, PathBuf};

use evalnorm_core::data::{synth_gaussians, Dataset, Split};
use evalnorm_core::estimator::{estimate_offline, EnSettings, OfflineConfig};
use evalnorm_core::model::{argmax_rows, ModelKind, ModelSpec};
use evalnorm_core::normalization::NormMode;
use evalnorm_core::train::{train as train_model, RunRecord};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig};
use crate::error::{write_file, Error, Result};
use crate::idx::read_idx;
use crate::report::{
    collect_activations, collect_layer, en_rows, record_rows, write_en_csv, write_record_csv, HistogramReport,
};

/// Training and evaluation splits described by `cfg`.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synth => Ok((
            synth_gaussians(cfg.classes, cfg.dims, cfg.per_class, cfg.data_seed, cfg.class_sep, Split::Train)?,
            synth_gaussians(
                cfg.classes,
                cfg.dims,
                cfg.eval_per_class,
                cfg.data_seed,
                cfg.class_sep,
                Split::Eval,
            )?,
        )),
        DatasetKind::Idx => {
            let flatten = cfg.model == ModelKind::Mlp;
            let load = |img: &str, lab: &str, split, limit| {
                if img.is_empty() || lab.is_empty() {
                    return Err(Error::Config("dataset idx needs all four IDX paths".into()));
                }
                read_idx(Path::new(img), Path::new(lab), cfg.classes, split, Some(limit), flatten)
            };
            Ok((
                load(&cfg.train_images, &cfg.train_labels, Split::Train, cfg.train_limit)?,
                load(&cfg.eval_images, &cfg.eval_labels, Split::Eval, cfg.eval_limit)?,
            ))
        }
    }
}

pub fn model_spec(cfg: &RunConfig, data: &Dataset) -> ModelSpec {
    ModelSpec {
        kind: cfg.model,
        input_shape: data.feature_shape().to_vec(),
        widths: cfg.widths.clone(),
        normalize: vec![true; cfg.widths.len()],
        num_classes: cfg.classes,
        seed: cfg.seed,
    }
}

/// A finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
}

/// Trains on the datasets described by `cfg`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (tr, ev) = load_datasets(cfg)?;
    train_on(cfg, &tr, &ev)
}

/// Trains on explicit datasets; deterministic for a fixed configuration.
pub fn train_on(cfg: &RunConfig, train_data: &Dataset, eval_data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = evalnorm_core::model::Model::build(&model_spec(cfg, train_data), cfg.norm_settings())?;
    let settings = cfg.train_settings();
    let record = train_model(&mut model, train_data, eval_data, &settings, &cfg.run_id)?;
    let steps = (train_data.len() / cfg.sgd_batch * cfg.epochs) as u64;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, cfg, steps),
        record,
    })
}

/// Paths written by [`write_run`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub checkpoint: PathBuf,
    pub records: PathBuf,
    pub en_params: PathBuf,
}

/// Writes `<run_id>.enck`, `<run_id>.records.csv` and `<run_id>.en.csv` into `dir`.
pub fn write_run(outcome: &TrainOutcome, dir: &Path) -> Result<Artifacts> {
    let id = &outcome.record.run_id;
    let a = Artifacts {
        checkpoint: dir.join(format!("{id}.enck")),
        records: dir.join(format!("{id}.records.csv")),
        en_params: dir.join(format!("{id}.en.csv")),
    };
    outcome.checkpoint.save(&a.checkpoint)?;
    write_file(&a.records, write_record_csv(&record_rows(std::slice::from_ref(&outcome.record))).as_bytes())?;
    let en: Vec<_> = outcome.checkpoint.en.iter().flatten().cloned().collect();
    write_file(&a.en_params, write_en_csv(&en_rows(id, &en)).as_bytes())?;
    Ok(a)
}

/// Mean and variance of one layer's pre-affine normalized activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub layers: Vec<LayerStats>,
}

/// Accuracy of `ckpt` on `data` under an evaluation mode, with per-layer
/// statistics of the normalized activations.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, mode: NormMode) -> Result<EvalResult> {
    if mode == NormMode::EvalEN && !ckpt.has_en_params() {
        return Err(Error::Config(
            "checkpoint has no EvalNorm parameters; train with en_enabled = true or run estimate-offline".into(),
        ));
    }
    let model = ckpt.to_model()?;
    let layers = model.norm_count();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); layers];
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(512) {
        let (x, y) = data.gather(part)?;
        let logits = model.forward_eval_with(&x, mode, |id, t| {
            let s = &mut sums[id];
            for &v in t.data() {
                s.0 += v;
                s.1 += v * v;
            }
            s.2 += t.numel();
        })?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        layers: sums
            .iter()
            .map(|&(s, sq, n)| {
                let mean = s / n as f64;
                LayerStats {
                    mean,
                    variance: (sq / n as f64 - mean * mean).max(0.0),
                }
            })
            .collect(),
    })
}

/// One run per microbatch size, all sharing `base`'s seed. Run ids are
/// `<run_id>-b<B>`.
pub fn sweep(base: &RunConfig, sizes: &[usize]) -> Result<Vec<TrainOutcome>> {
    let (tr, ev) = load_datasets(base)?;
    sweep_on(base, sizes, &tr, &ev)
}

pub fn sweep_on(base: &RunConfig, sizes: &[usize], tr: &Dataset, ev: &Dataset) -> Result<Vec<TrainOutcome>> {
    if sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one microbatch size".into()));
    }
    sizes
        .iter()
        .map(|&b| {
            let mut cfg = base.clone();
            cfg.microbatch = b;
            cfg.run_id = format!("{}-b{b}", base.run_id);
            train_on(&cfg, tr, ev)
        })
        .collect()
}

/// Fits EvalNorm parameters on a frozen checkpoint. The returned checkpoint
/// carries the new parameters and `cfg` as its configuration echo; `ckpt`
/// itself is not modified. Estimation starts from `cfg.en_init` (1/B when
/// `auto`) rather than any parameters already in the checkpoint.
pub fn estimate_offline_cmd(ckpt: &Checkpoint, data: &Dataset, cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = ckpt.to_model()?;
    let init = cfg.en_init.unwrap_or(1.0 / cfg.microbatch as f64);
    let est = estimate_offline(
        &model,
        data,
        &OfflineConfig {
            sgd_batch: cfg.sgd_batch,
            microbatch: cfg.microbatch,
            steps: cfg.offline_steps,
            en: EnSettings {
                init: Some(init),
                ..cfg.en_settings()
            },
            seed: cfg.seed,
        },
    )?;
    let mut out = ckpt.clone();
    out.en = est.params.into_iter().map(Some).collect();
    out.config = cfg.clone();
    Ok(out)
}

/// Histograms of one channel of one layer under TrainBN (microbatches of the
/// checkpoint's B), EvalEMA and EvalEN, with their distances to TrainBN.
pub fn histograms(ckpt: &Checkpoint, data: &Dataset, layer: usize, channel: usize) -> Result<HistogramReport> {
    if !ckpt.has_en_params() {
        return Err(Error::Config("checkpoint has no EvalNorm parameters".into()));
    }
    let model = ckpt.to_model()?;
    let s = collect_activations(&model, data, layer, channel, ckpt.config.microbatch, ckpt.config.seed)?;
    HistogramReport::from_samples(&s)
}

/// [`histograms`] for every channel of `layer`, from a single pass.
pub fn layer_histograms(ckpt: &Checkpoint, data: &Dataset, layer: usize) -> Result<Vec<HistogramReport>> {
    if !ckpt.has_en_params() {
        return Err(Error::Config("checkpoint has no EvalNorm parameters".into()));
    }
    let model = ckpt.to_model()?;
    collect_layer(&model, data, layer, ckpt.config.microbatch, ckpt.config.seed)?
        .iter()
        .map(HistogramReport::from_samples)
        .collect()
}
