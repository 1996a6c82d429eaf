//! CSV emitters, activation histograms and the train/eval discrepancy metric.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! an emitted file recovers every value exactly.

use std::fmt::Write as _;

use evalnorm_core::data::{batch_iterator, Dataset};
use evalnorm_core::estimator::EnParams;
use evalnorm_core::model::{Model, TrainPassOptions};
use evalnorm_core::normalization::NormMode;
use evalnorm_core::train::{EvalModeTag, RunRecord};
use evalnorm_core::{Tape, Tensor};

use crate::error::{Error, Result};

pub const RECORD_HEADER: &str = "run_id,B,G,mode,epoch,train_loss,eval_acc";
pub const EN_HEADER: &str = "run_id,layer_id,alpha_hat,beta_hat";
pub const HIST_HEADER: &str = "bin_lo,bin_hi,count_trainbn,count_ema,count_en";

/// One row of the record CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub run_id: String,
    pub microbatch: usize,
    pub sgd_batch: usize,
    pub mode: EvalModeTag,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
}

/// One row of the (α̂, β̂) table.
#[derive(Debug, Clone, PartialEq)]
pub struct EnRow {
    pub run_id: String,
    pub layer_id: usize,
    pub alpha_hat: f64,
    pub beta_hat: f64,
}

pub fn record_rows(records: &[RunRecord]) -> Vec<RecordRow> {
    let mut rows = Vec::new();
    for r in records {
        for e in &r.epochs {
            for &(mode, acc) in &e.eval {
                rows.push(RecordRow {
                    run_id: r.run_id.clone(),
                    microbatch: r.microbatch,
                    sgd_batch: r.sgd_batch,
                    mode,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    eval_acc: acc,
                });
            }
        }
    }
    rows
}

pub fn write_record_csv(rows: &[RecordRow]) -> String {
    let mut out = format!("{RECORD_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.run_id,
            r.microbatch,
            r.sgd_batch,
            r.mode.name(),
            r.epoch,
            r.train_loss,
            r.eval_acc
        );
    }
    out
}

pub fn en_rows(run_id: &str, params: &[EnParams]) -> Vec<EnRow> {
    params
        .iter()
        .map(|p| EnRow {
            run_id: run_id.into(),
            layer_id: p.layer_id,
            alpha_hat: p.alpha_hat,
            beta_hat: p.beta_hat,
        })
        .collect()
}

pub fn write_en_csv(rows: &[EnRow]) -> String {
    let mut out = format!("{EN_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.run_id, r.layer_id, r.alpha_hat, r.beta_hat);
    }
    out
}

fn csv_fields<'a>(text: &'a str, header: &str, what: &'static str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(Error::format(what, 1, format!("expected header {header}"))),
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(Error::format(what, i + 1, format!("{} fields, expected {width}", f.len())));
        }
        rows.push((i + 1, f));
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(v: &str, line: usize, what: &'static str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(what, line, format!("cannot parse {v:?}")))
}

pub fn parse_record_csv(text: &str) -> Result<Vec<RecordRow>> {
    const W: &str = "record csv";
    csv_fields(text, RECORD_HEADER, W)?
        .into_iter()
        .map(|(n, f)| {
            Ok(RecordRow {
                run_id: f[0].into(),
                microbatch: field(f[1], n, W)?,
                sgd_batch: field(f[2], n, W)?,
                mode: EvalModeTag::from_name(f[3])
                    .ok_or_else(|| Error::format(W, n, format!("unknown mode {:?}", f[3])))?,
                epoch: field(f[4], n, W)?,
                train_loss: field(f[5], n, W)?,
                eval_acc: field(f[6], n, W)?,
            })
        })
        .collect()
}

pub fn parse_en_csv(text: &str) -> Result<Vec<EnRow>> {
    const W: &str = "alpha/beta csv";
    csv_fields(text, EN_HEADER, W)?
        .into_iter()
        .map(|(n, f)| {
            Ok(EnRow {
                run_id: f[0].into(),
                layer_id: field(f[1], n, W)?,
                alpha_hat: field(f[2], n, W)?,
                beta_hat: field(f[3], n, W)?,
            })
        })
        .collect()
}

/// Final-epoch accuracy per run and mode, one run per line.
pub fn summary(rows: &[RecordRow]) -> String {
    let mut runs: Vec<(&str, usize, usize)> = Vec::new();
    for r in rows {
        if !runs.iter().any(|&(id, _, _)| id == r.run_id) {
            runs.push((&r.run_id, r.microbatch, r.sgd_batch));
        }
    }
    let mut out = format!("{:<16} {:>4} {:>4}", "run", "B", "G");
    for m in EvalModeTag::ALL {
        let _ = write!(out, " {:>13}", m.name());
    }
    out.push('\n');
    for (id, b, g) in runs {
        let last = rows.iter().filter(|r| r.run_id == id).map(|r| r.epoch).max().unwrap_or(0);
        let _ = write!(out, "{id:<16} {b:>4} {g:>4}");
        for m in EvalModeTag::ALL {
            match rows.iter().find(|r| r.run_id == id && r.epoch == last && r.mode == m) {
                Some(r) => {
                    let _ = write!(out, " {:>13.4}", r.eval_acc);
                }
                None => {
                    let _ = write!(out, " {:>13}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub const BINS: usize = 64;
pub const HIST_LO: f64 = -5.0;
pub const HIST_HI: f64 = 5.0;

/// Fixed-bin histogram over `[HIST_LO, HIST_HI)` with one underflow bin in
/// front and one overflow bin at the end (`BINS + 2` counts). NaN counts as
/// overflow so the counts always sum to the number of values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

fn bin_width() -> f64 {
    (HIST_HI - HIST_LO) / BINS as f64
}

impl Histogram {
    pub fn from_values(values: &[f64]) -> Histogram {
        let mut counts = vec![0u64; BINS + 2];
        let w = bin_width();
        for &v in values {
            let slot = if v < HIST_LO {
                0
            } else if v < HIST_HI {
                1 + (((v - HIST_LO) / w) as usize).min(BINS - 1)
            } else {
                BINS + 1
            };
            counts[slot] += 1;
        }
        Histogram { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(lo, hi)` of slot `i`; the overflow slots extend to ±∞.
    pub fn bounds(i: usize) -> (f64, f64) {
        let w = bin_width();
        match i {
            0 => (f64::NEG_INFINITY, HIST_LO),
            i if i == BINS + 1 => (HIST_HI, f64::INFINITY),
            i => (HIST_LO + (i - 1) as f64 * w, HIST_LO + i as f64 * w),
        }
    }
}

/// 1-Wasserstein distance between two histograms. Regular bins are treated as
/// point masses at their centres; the underflow and overflow masses sit at the
/// range edges.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64> {
    let (ta, tb) = (a.total(), b.total());
    if ta == 0 || tb == 0 || a.counts.len() != b.counts.len() {
        return Err(Error::Config("Wasserstein distance needs two non-empty histograms".into()));
    }
    let w = bin_width();
    let point = |i: usize| match i {
        0 => HIST_LO,
        i if i == BINS + 1 => HIST_HI,
        i => HIST_LO + (i as f64 - 0.5) * w,
    };
    let (mut ca, mut cb, mut dist) = (0u64, 0u64, 0.0);
    for i in 0..a.counts.len() - 1 {
        ca += a.counts[i];
        cb += b.counts[i];
        let gap = (ca as f64 / ta as f64 - cb as f64 / tb as f64).abs();
        dist += gap * (point(i + 1) - point(i));
    }
    Ok(dist)
}

/// Pre-affine normalized activations of one channel under the three regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSamples {
    pub trainbn: Vec<f64>,
    pub ema: Vec<f64>,
    pub en: Vec<f64>,
}

/// Appends channel `c` of `[N, C, ...]` to `out[c]` for every channel.
fn split_channels(t: &Tensor, out: &mut [Vec<f64>]) {
    let c = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    for sample in t.data().chunks(c * inner) {
        for (ch, dst) in out.iter_mut().enumerate() {
            dst.extend_from_slice(&sample[ch * inner..(ch + 1) * inner]);
        }
    }
}

/// Pre-affine normalized activations of every channel of normalization layer
/// `layer` over `data`. Training-mode values come from shuffled microbatches
/// of `microbatch` examples (order fixed by `seed`; a final partial
/// microbatch is dropped); the evaluation modes see the same examples.
pub fn collect_layer(
    model: &Model,
    data: &Dataset,
    layer: usize,
    microbatch: usize,
    seed: u64,
) -> Result<Vec<ActivationSamples>> {
    if layer >= model.norm_count() {
        return Err(Error::Config(format!(
            "layer {layer} out of range ({} normalization layers)",
            model.norm_count()
        )));
    }
    if model.en_params().is_none() {
        return Err(Error::Config("model has no EvalNorm parameters".into()));
    }
    let channels = model.norms()[layer].ema.channels();
    let mut trainbn = vec![Vec::new(); channels];
    let mut ema = vec![Vec::new(); channels];
    let mut en = vec![Vec::new(); channels];
    let group = microbatch * (256 / microbatch).max(1);
    let order: Vec<usize> = batch_iterator(data, microbatch, microbatch, seed, 0)?
        .flat_map(|b| b.indices)
        .collect();
    for part in order.chunks(group) {
        let (x, _) = data.gather(part)?;
        let mut tape = Tape::new();
        let pass = model.forward_train(&mut tape, &x, microbatch, &TrainPassOptions::default())?;
        split_channels(tape.value(pass.norms[layer].normalized), &mut trainbn);
        for (mode, sink) in [(NormMode::EvalEMA, &mut ema), (NormMode::EvalEN, &mut en)] {
            model.forward_eval_with(&x, mode, |id, t| {
                if id == layer {
                    split_channels(t, sink);
                }
            })?;
        }
    }
    Ok(trainbn
        .into_iter()
        .zip(ema)
        .zip(en)
        .map(|((trainbn, ema), en)| ActivationSamples { trainbn, ema, en })
        .collect())
}

/// One channel of [`collect_layer`].
pub fn collect_activations(
    model: &Model,
    data: &Dataset,
    layer: usize,
    channel: usize,
    microbatch: usize,
    seed: u64,
) -> Result<ActivationSamples> {
    if let Some(n) = model.norms().get(layer) {
        if channel >= n.ema.channels() {
            return Err(Error::Config(format!(
                "channel {channel} out of range ({} channels)",
                n.ema.channels()
            )));
        }
    }
    Ok(collect_layer(model, data, layer, microbatch, seed)?.swap_remove(channel))
}

/// Histograms of the three regimes and the distances of EMA and EN to TrainBN.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub trainbn: Histogram,
    pub ema: Histogram,
    pub en: Histogram,
    pub distance_ema: f64,
    pub distance_en: f64,
}

impl HistogramReport {
    pub fn from_samples(s: &ActivationSamples) -> Result<HistogramReport> {
        let trainbn = Histogram::from_values(&s.trainbn);
        let ema = Histogram::from_values(&s.ema);
        let en = Histogram::from_values(&s.en);
        Ok(HistogramReport {
            distance_ema: wasserstein1(&ema, &trainbn)?,
            distance_en: wasserstein1(&en, &trainbn)?,
            trainbn,
            ema,
            en,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HIST_HEADER}\n");
        for i in 0..BINS + 2 {
            let (lo, hi) = Histogram::bounds(i);
            let _ = writeln!(
                out,
                "{lo},{hi},{},{},{}",
                self.trainbn.counts[i], self.ema.counts[i], self.en.counts[i]
            );
        }
        out
    }
}
