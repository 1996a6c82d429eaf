//! Moment computation and every normalization variant.
//!
//! Tensors are laid out `[N, C, spatial...]` with the channel on axis 1; MLP
//! activations are `[N, C]` (spatial size 1). Variances are population
//! (biased) variances. With that convention the split of a batch into two
//! disjoint parts recombines exactly:
//!
//! ```text
//! mean = α·mean_a + (1-α)·mean_b
//! var  = α·var_a + (1-α)·var_b + α(1-α)·(mean_a - mean_b)²      α = |a| / (|a| + |b|)
//! ```
//!
//! Evaluation normalizes each sample on its own, so evaluation output for a
//! sample never depends on which other samples share its batch.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::estimator::EnParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-channel mean and population variance over `count` scalars per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

impl MomentPair {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, count: usize) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(config_err!(
                "moment pair with {} means and {} variances",
                mean.len(),
                variance.len()
            ));
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(v) = variance.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NumericDomain(alloc::format!("variance {v}")));
        }
        Ok(MomentPair {
            mean,
            variance,
            count,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Moments of the union of two disjoint sets, weighting by element count.
    pub fn merge(&self, other: &MomentPair) -> Result<MomentPair> {
        let alpha = self.count as f64 / (self.count + other.count) as f64;
        combine_moments(self, other, alpha)
    }
}

/// Exponential moving averages of training-time batch moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub decay: f64,
    pub update_count: u64,
}

impl EmaState {
    /// Neutral prior: mean 0, variance 1.
    pub fn new(channels: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(config_err!("EMA decay {} not in (0, 1)", decay));
        }
        Ok(EmaState {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            decay,
            update_count: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Overwrites the tracked moments (used to build oracle cases).
    pub fn with_moments(mut self, m: &MomentPair) -> Self {
        self.mean = m.mean.clone();
        self.variance = m.variance.clone();
        self
    }
}

/// Learned per-channel scale and shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub trainable: bool,
}

impl AffineParams {
    /// Identity transform: scale 1, shift 0.
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            trainable: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Which statistics normalize a layer's input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// Statistics of the normalization microbatch (training).
    TrainBN,
    /// EMA statistics.
    EvalEMA,
    /// Fixed mixing weight α = β of instance and EMA statistics.
    EvalSimple(f64),
    /// Per-layer estimated (α̂, β̂).
    EvalEN,
}

impl NormMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormMode::EvalSimple(a) if !(0.0..=1.0).contains(&a) => {
                Err(config_err!("simple mixing weight {} not in [0, 1]", a))
            }
            _ => Ok(()),
        }
    }
}

fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        s => Err(config_err!("normalization input needs [N, C, ...], got {:?}", s)),
    }
}

/// Welford accumulation of one channel over the selected samples.
fn channel_moments(data: &[f64], samples: core::ops::Range<usize>, c: usize, channels: usize, spatial: usize) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut k = 0.0;
    for n in samples {
        let start = (n * channels + c) * spatial;
        for &v in &data[start..start + spatial] {
            k += 1.0;
            let d = v - mean;
            mean += d / k;
            m2 += d * (v - mean);
        }
    }
    (mean, m2 / k)
}

fn moments_over(x: &Tensor, samples: core::ops::Range<usize>) -> Result<MomentPair> {
    let (_, c, s) = layout(x)?;
    if samples.is_empty() || s == 0 {
        return Err(Error::EmptyBatch);
    }
    let count = samples.len() * s;
    let (mean, variance) = (0..c)
        .map(|ch| channel_moments(x.data(), samples.clone(), ch, c, s))
        .unzip();
    MomentPair::new(mean, variance, count)
}

/// Per-channel moments over the batch axis and every spatial axis.
pub fn batch_moments(x: &Tensor) -> Result<MomentPair> {
    let (n, _, _) = layout(x)?;
    moments_over(x, 0..n)
}

/// Moments of a single sample `[1, C, ...]` over its spatial extent.
pub fn instance_moments(x_i: &Tensor) -> Result<MomentPair> {
    let (n, _, _) = layout(x_i)?;
    if n != 1 {
        return Err(config_err!("instance moments need a single sample, got N = {}", n));
    }
    moments_over(x_i, 0..1)
}

/// Instance moments of every sample of `x`.
pub fn per_sample_moments(x: &Tensor) -> Result<Vec<MomentPair>> {
    let (n, _, _) = layout(x)?;
    (0..n).map(|i| moments_over(x, i..i + 1)).collect()
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(config_err!("{} = {} not in [0, 1]", name, v))
    }
}

#[inline]
fn mixed_mean(own: f64, other: f64, alpha: f64) -> f64 {
    alpha * own + (1.0 - alpha) * other
}

#[inline]
fn mixed_var(own_mean: f64, own_var: f64, other_mean: f64, other_var: f64, beta: f64) -> f64 {
    let gap = own_mean - other_mean;
    beta * own_var + (1.0 - beta) * other_var + beta * (1.0 - beta) * gap * gap
}

/// α-weighted combination of two moment pairs, including the mean-gap term.
pub fn combine_moments(a: &MomentPair, b: &MomentPair, alpha: f64) -> Result<MomentPair> {
    check_unit("alpha", alpha)?;
    if a.channels() != b.channels() {
        return Err(config_err!(
            "combining {} channels with {}",
            a.channels(),
            b.channels()
        ));
    }
    let mut mean = Vec::with_capacity(a.channels());
    let mut variance = Vec::with_capacity(a.channels());
    for c in 0..a.channels() {
        mean.push(mixed_mean(a.mean[c], b.mean[c], alpha));
        variance.push(mixed_var(a.mean[c], a.variance[c], b.mean[c], b.variance[c], alpha));
    }
    MomentPair::new(mean, variance, a.count + b.count)
}

/// Evaluation moments of one sample: instance moments mixed with EMA moments
/// by `alpha_hat` (mean) and `beta_hat` (variance).
pub fn en_moments(inst: &MomentPair, state: &EmaState, alpha_hat: f64, beta_hat: f64) -> Result<MomentPair> {
    check_unit("alpha_hat", alpha_hat)?;
    check_unit("beta_hat", beta_hat)?;
    if inst.channels() != state.channels() {
        return Err(config_err!(
            "instance moments have {} channels, EMA has {}",
            inst.channels(),
            state.channels()
        ));
    }
    let mean = (0..inst.channels())
        .map(|c| mixed_mean(inst.mean[c], state.mean[c], alpha_hat))
        .collect();
    let variance = (0..inst.channels())
        .map(|c| mixed_var(inst.mean[c], inst.variance[c], state.mean[c], state.variance[c], beta_hat))
        .collect();
    MomentPair::new(mean, variance, inst.count)
}

/// One EMA step: `new = decay·old + (1-decay)·m` for mean and variance.
pub fn ema_update(state: &EmaState, m: &MomentPair) -> Result<EmaState> {
    if m.channels() != state.channels() {
        return Err(config_err!(
            "EMA has {} channels, moments have {}",
            state.channels(),
            m.channels()
        ));
    }
    let d = state.decay;
    let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
        old.iter().zip(new).map(|(&o, &n)| d * o + (1.0 - d) * n).collect()
    };
    Ok(EmaState {
        mean: blend(&state.mean, &m.mean),
        variance: blend(&state.variance, &m.variance),
        decay: d,
        update_count: state.update_count + 1,
    })
}

/// The fixed mixing weight α = 1/B² for normalization microbatch size B.
pub fn rule_of_thumb_alpha(batch: usize) -> f64 {
    let b = batch as f64;
    1.0 / (b * b)
}

/// Training-time batch normalization of a whole normalization microbatch.
#[derive(Debug, Clone)]
pub struct BnTrainOutput {
    /// `γ·x̂ + β`.
    pub output: Var,
    /// Pre-affine `x̂ = (x - μ_B) / sqrt(σ²_B + eps)`.
    pub normalized: Var,
    /// `μ_B` with shape `[1, C, 1, ...]`.
    pub mean: Var,
    /// `σ²_B` with shape `[1, C, 1, ...]`.
    pub variance: Var,
    /// Values of `μ_B`, `σ²_B` for the EMA update.
    pub moments: MomentPair,
}

/// Normalizes `x: [N, C, ...]` with its own batch moments, differentiable
/// through the moments. `gamma` and `beta` have shape `[C]`.
pub fn bn_train_forward(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<BnTrainOutput> {
    if !(eps > 0.0) {
        return Err(config_err!("eps must be positive, got {}", eps));
    }
    let shape = tape.value(x).shape().to_vec();
    let (n, c, s) = layout(tape.value(x))?;
    if n == 0 || s == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut axes = vec![0];
    axes.extend(2..shape.len());
    let mut channel_shape = vec![1; shape.len()];
    channel_shape[1] = c;

    let mean = tape.mean_axes(x, &axes, true)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered);
    let variance = tape.mean_axes(sq, &axes, true)?;
    let eps_v = tape.scalar(eps);
    let shifted = tape.add(variance, eps_v)?;
    let std = tape.sqrt(shifted)?;
    let normalized = tape.div(centered, std)?;
    let g = tape.reshape(gamma, &channel_shape)?;
    let b = tape.reshape(beta, &channel_shape)?;
    let scaled = tape.mul(normalized, g)?;
    let output = tape.add(scaled, b)?;

    let moments = MomentPair::new(
        tape.value(mean).data().to_vec(),
        tape.value(variance).data().to_vec(),
        n * s,
    )?;
    Ok(BnTrainOutput {
        output,
        normalized,
        mean,
        variance,
        moments,
    })
}

/// `(x - mean) / sqrt(var + eps)` for one sample's channel.
#[inline]
fn normalize_into(dst: &mut [f64], src: &[f64], mean: f64, var: f64, eps: f64) {
    let std = libm::sqrt(var + eps);
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v - mean) / std;
    }
}

/// Pre-affine evaluation normalization. `mix = None` uses EMA statistics;
/// `Some((α, β))` mixes each sample's instance moments with them.
pub fn eval_normalized(x: &Tensor, state: &EmaState, mix: Option<(f64, f64)>, eps: f64) -> Result<Tensor> {
    let (n, c, s) = layout(x)?;
    if c != state.channels() {
        return Err(config_err!("input has {} channels, EMA has {}", c, state.channels()));
    }
    if let Some((a, b)) = mix {
        check_unit("alpha_hat", a)?;
        check_unit("beta_hat", b)?;
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * s..(i * c + ch + 1) * s;
            let (mean, var) = match mix {
                None => (state.mean[ch], state.variance[ch]),
                Some((a, b)) => {
                    let (m_i, v_i) = channel_moments(src, i..i + 1, ch, c, s);
                    (
                        mixed_mean(m_i, state.mean[ch], a),
                        mixed_var(m_i, v_i, state.mean[ch], state.variance[ch], b),
                    )
                }
            };
            normalize_into(&mut out[range.clone()], &src[range], mean, var, eps);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Applies `scale·x + shift` per channel.
pub fn apply_affine(x: &Tensor, affine: &AffineParams) -> Result<Tensor> {
    let (n, c, s) = layout(x)?;
    if c != affine.channels() || affine.shift.len() != c {
        return Err(config_err!("input has {} channels, affine has {}", c, affine.channels()));
    }
    let mut out = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let (g, b) = (affine.scale[ch], affine.shift[ch]);
            for v in &mut out[(i * c + ch) * s..(i * c + ch + 1) * s] {
                *v = g * *v + b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `γ·(x - μ_E) / sqrt(σ²_E + eps) + β`.
pub fn eval_normalize_ema(x: &Tensor, state: &EmaState, affine: &AffineParams, eps: f64) -> Result<Tensor> {
    apply_affine(&eval_normalized(x, state, None, eps)?, affine)
}

/// Each sample normalized by its EvalNorm moments.
pub fn eval_normalize_en(
    x: &Tensor,
    state: &EmaState,
    en: &EnParams,
    affine: &AffineParams,
    eps: f64,
) -> Result<Tensor> {
    apply_affine(
        &eval_normalized(x, state, Some((en.alpha_hat, en.beta_hat)), eps)?,
        affine,
    )
}

/// Fixed mixing weight `α = β = alpha`.
pub fn eval_normalize_simple(
    x: &Tensor,
    state: &EmaState,
    alpha: f64,
    affine: &AffineParams,
    eps: f64,
) -> Result<Tensor> {
    apply_affine(&eval_normalized(x, state, Some((alpha, alpha)), eps)?, affine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn pair(mean: &[f64], var: &[f64], count: usize) -> MomentPair {
        MomentPair::new(mean.to_vec(), var.to_vec(), count).unwrap()
    }

    #[test]
    fn batch_moments_by_hand() {
        let m = batch_moments(&t(&[2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        assert_eq!(m.mean, vec![3.0, 5.0]);
        assert_eq!(m.variance, vec![4.0, 4.0]);
        assert_eq!(m.count, 2);
    }

    #[test]
    fn constant_input_has_zero_variance() {
        let m = batch_moments(&Tensor::full(&[5, 3, 2, 2], 0.7)).unwrap();
        assert!(m.variance.iter().all(|&v| v == 0.0));
        assert_eq!(m.count, 20);
    }

    #[test]
    fn empty_batch_rejected() {
        assert_eq!(batch_moments(&Tensor::zeros(&[0, 3])), Err(Error::EmptyBatch));
        assert!(matches!(batch_moments(&Tensor::zeros(&[4])), Err(Error::Config(_))));
    }

    #[test]
    fn instance_moments_single_sample() {
        let m = instance_moments(&t(&[1, 1, 2, 2], &[2.0; 4])).unwrap();
        assert_eq!(m.mean, vec![2.0]);
        assert_eq!(m.variance, vec![0.0]);
        assert!(instance_moments(&Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn instance_equals_batch_for_one_sample() {
        let x = t(&[1, 2, 3], &[0.5, -1.0, 2.0, 4.0, 4.5, -3.0]);
        assert_eq!(instance_moments(&x).unwrap(), batch_moments(&x).unwrap());
    }

    #[test]
    fn combine_endpoints_and_hand_case() {
        let a = pair(&[0.0, 1.5], &[1.0, 0.25], 3);
        let b = pair(&[2.0, -4.0], &[1.0, 9.0], 5);
        let one = combine_moments(&a, &b, 1.0).unwrap();
        assert_eq!((one.mean, one.variance), (a.mean.clone(), a.variance.clone()));
        let zero = combine_moments(&a, &b, 0.0).unwrap();
        assert_eq!((zero.mean, zero.variance), (b.mean.clone(), b.variance.clone()));
        let half = combine_moments(&pair(&[0.0], &[1.0], 1), &pair(&[2.0], &[1.0], 1), 0.5).unwrap();
        assert_eq!(half.mean, vec![1.0]);
        assert_eq!(half.variance, vec![2.0]);
    }

    #[test]
    fn combine_rejects_mismatch_and_range() {
        let a = pair(&[0.0], &[1.0], 1);
        let b = pair(&[0.0, 1.0], &[1.0, 1.0], 1);
        assert!(matches!(combine_moments(&a, &b, 0.5), Err(Error::Config(_))));
        assert!(combine_moments(&a, &a, 1.5).is_err());
    }

    #[test]
    fn ema_update_by_hand() {
        let s = EmaState {
            mean: vec![0.0],
            variance: vec![0.0],
            decay: 0.9,
            update_count: 0,
        };
        let next = ema_update(&s, &pair(&[1.0], &[1.0], 1)).unwrap();
        assert!((next.mean[0] - 0.1).abs() < 1e-15);
        assert!((next.variance[0] - 0.1).abs() < 1e-15);
        assert_eq!(next.update_count, 1);
    }

    #[test]
    fn ema_converges_geometrically() {
        let target = pair(&[3.0], &[2.0], 1);
        let mut s = EmaState::new(1, 0.99).unwrap();
        for _ in 0..1000 {
            s = ema_update(&s, &target).unwrap();
        }
        assert!((s.mean[0] - 3.0).abs() < 1e-4 * 3.0);
        assert!((s.variance[0] - 2.0).abs() < 1e-4 * 2.0);
    }

    #[test]
    fn ema_decay_validated() {
        assert!(EmaState::new(2, 1.0).is_err());
        assert!(EmaState::new(2, 0.0).is_err());
    }

    #[test]
    fn en_moments_endpoints() {
        let inst = pair(&[1.0, -2.0], &[0.5, 3.0], 4);
        let state = EmaState::new(2, 0.9).unwrap().with_moments(&pair(&[0.3, 0.1], &[2.0, 0.7], 1));
        let ema = en_moments(&inst, &state, 0.0, 0.0).unwrap();
        assert_eq!((ema.mean, ema.variance), (state.mean.clone(), state.variance.clone()));
        let own = en_moments(&inst, &state, 1.0, 1.0).unwrap();
        assert_eq!((own.mean, own.variance), (inst.mean.clone(), inst.variance.clone()));
        assert!(en_moments(&inst, &state, -0.1, 0.0).is_err());
        assert!(en_moments(&inst, &state, 0.0, 1.1).is_err());
    }

    #[test]
    fn rule_of_thumb_values() {
        assert_eq!(rule_of_thumb_alpha(1), 1.0);
        assert_eq!(rule_of_thumb_alpha(2), 0.25);
        assert_eq!(rule_of_thumb_alpha(8), 0.015625);
    }

    #[test]
    fn ema_identity_statistics() {
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 0.0, -0.5]);
        let state = EmaState::new(3, 0.9).unwrap();
        let y = eval_normalize_ema(&x, &state, &AffineParams::identity(3), 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn instance_normalization_centres_each_sample() {
        let x = t(&[2, 1, 4], &[1.0, 2.0, 3.0, 6.0, -1.0, 0.0, 0.5, 9.0]);
        let state = EmaState::new(1, 0.9).unwrap();
        let en = EnParams::new(0, 1.0, 1.0);
        let y = eval_normalize_en(&x, &state, &en, &AffineParams::identity(1), 1e-5).unwrap();
        for sample in y.data().chunks(4) {
            let mean: f64 = sample.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift_in_training() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[5.0, 5.0, 1.0, 3.0]));
        let g = tape.leaf(Tensor::vector(vec![2.0, 1.0]));
        let b = tape.leaf(Tensor::vector(vec![0.25, -1.0]));
        let out = bn_train_forward(&mut tape, x, g, b, 1e-5).unwrap();
        let y = tape.value(out.output).data();
        assert_eq!(&y[..2], &[0.25, 0.25]);
        assert!((y[2] + 2.0).abs() < 1e-4 && y[3].abs() < 1e-4);
    }

    #[test]
    fn simple_mode_range_checked() {
        assert!(NormMode::EvalSimple(1.5).validate().is_err());
        assert!(NormMode::EvalSimple(0.25).validate().is_ok());
    }
}
