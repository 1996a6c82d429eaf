//! Deterministic data sources and microbatch-aware batching.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::tensor::{numel_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Labelled examples with a common feature shape, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per = numel_of(&feature_shape);
        if per == 0 || features.len() != per * labels.len() {
            return Err(config_err!(
                "{} feature values for {} examples of shape {:?}",
                features.len(),
                labels.len(),
                feature_shape
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(config_err!("label {} with {} classes", bad, num_classes));
        }
        Ok(Dataset {
            features,
            feature_shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        let per = numel_of(&self.feature_shape);
        (&self.features[i * per..(i + 1) * per], self.labels[i])
    }

    /// Stacks the selected examples into `[n, feature_shape...]`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = numel_of(&self.feature_shape);
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(config_err!("example {} of {}", i, self.len()));
            }
            let (x, y) = self.example(i);
            data.extend_from_slice(x);
            labels.push(y);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` examples (all of them when `n >= len`).
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let per = numel_of(&self.feature_shape);
        Dataset::new(
            self.features[..n * per].to_vec(),
            self.feature_shape.clone(),
            self.labels[..n].to_vec(),
            self.num_classes,
            self.split,
        )
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Eval => 2,
    }
}

/// Class centroids: random unit directions scaled by `class_sep`.
pub fn gaussian_centroids(num_classes: usize, dims: usize, seed: u64, class_sep: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>()).max(f64::MIN_POSITIVE);
            dir.iter().map(|v| v / norm * class_sep).collect()
        })
        .collect()
}

/// Isotropic unit-variance Gaussian clusters around [`gaussian_centroids`].
///
/// Train and eval splits share centroids (fixed by `seed`) and draw noise from
/// separate streams. Classes are interleaved: example `i` has label `i % num_classes`.
pub fn synth_gaussians(
    num_classes: usize,
    dims: usize,
    per_class: usize,
    seed: u64,
    class_sep: f64,
    split: Split,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 {
        return Err(config_err!("synthetic data needs classes and dims >= 1"));
    }
    let centroids = gaussian_centroids(num_classes, dims, seed, class_sep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(split));
    let mut features = Vec::with_capacity(num_classes * per_class * dims);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (k, c) in centroids.iter().enumerate() {
            features.extend(c.iter().map(|&m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(k);
        }
    }
    Dataset::new(features, vec![dims], labels, num_classes, split)
}

/// One SGD batch of `G` example indices, partitioned into contiguous
/// normalization microbatches of size `B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub microbatch: usize,
}

impl Batch {
    pub fn microbatches(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.microbatch)
    }

    pub fn num_microbatches(&self) -> usize {
        self.indices.len() / self.microbatch
    }

    pub fn materialize(&self, data: &Dataset) -> Result<(Tensor, Vec<usize>)> {
        data.gather(&self.indices)
    }
}

/// Shuffled batches for one epoch; the final partial batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    sgd_batch: usize,
    microbatch: usize,
    next: usize,
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let end = self.next + self.sgd_batch;
        if end > self.order.len() {
            return None;
        }
        let indices = self.order[self.next..end].to_vec();
        self.next = end;
        Some(Batch {
            indices,
            microbatch: self.microbatch,
        })
    }
}

/// Batches of size `sgd_batch` for epoch `epoch`, order fixed by `(seed, epoch)`.
pub fn batch_iterator(
    data: &Dataset,
    sgd_batch: usize,
    microbatch: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter> {
    if sgd_batch == 0 || microbatch == 0 || !sgd_batch.is_multiple_of(microbatch) {
        return Err(config_err!(
            "normalization microbatch {} must divide SGD batch {}",
            microbatch,
            sgd_batch
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        order,
        sgd_batch,
        microbatch,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn small() -> Dataset {
        synth_gaussians(4, 3, 10, 5, 2.0, Split::Train).unwrap()
    }

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_gaussians(4, 16, 100, 9, 3.0, Split::Train).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, synth_gaussians(4, 16, 100, 9, 3.0, Split::Train).unwrap());
        let e = synth_gaussians(4, 16, 100, 9, 3.0, Split::Eval).unwrap();
        assert_ne!(a.features(), e.features());
    }

    #[test]
    fn microbatch_partition() {
        let d = small();
        let mut it = batch_iterator(&d, 8, 2, 0, 0).unwrap();
        let b = it.next().unwrap();
        assert_eq!(b.num_microbatches(), 4);
        assert!(b.microbatches().all(|m| m.len() == 2));
    }

    #[test]
    fn microbatch_must_divide() {
        assert!(batch_iterator(&small(), 8, 3, 0, 0).is_err());
        assert!(batch_iterator(&small(), 8, 0, 0, 0).is_err());
    }

    #[test]
    fn epoch_is_permutation_with_drop_last() {
        let d = small(); // 40 examples, G = 8 -> 5 full batches
        let seen: Vec<usize> = batch_iterator(&d, 8, 4, 3, 1)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(seen.len(), 40);
        assert_eq!(seen.iter().collect::<BTreeSet<_>>().len(), 40);
        let partial: Vec<usize> = batch_iterator(&d, 16, 4, 3, 1)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(partial.len(), 32);
    }

    #[test]
    fn order_fixed_by_seed_and_epoch() {
        let d = small();
        let a: Vec<_> = batch_iterator(&d, 8, 2, 7, 2).unwrap().collect();
        let b: Vec<_> = batch_iterator(&d, 8, 2, 7, 2).unwrap().collect();
        let c: Vec<_> = batch_iterator(&d, 8, 2, 7, 3).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_validation() {
        assert_eq!(
            Dataset::new(vec![], vec![2], vec![], 2, Split::Train),
            Err(Error::EmptyDataset)
        );
        assert!(Dataset::new(vec![0.0; 4], vec![2], vec![0, 3], 2, Split::Train).is_err());
        assert!(Dataset::new(vec![0.0; 3], vec![2], vec![0, 1], 2, Split::Train).is_err());
    }

    #[test]
    fn gather_stacks_examples() {
        let d = small();
        let (x, y) = d.gather(&[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3]);
        assert_eq!(&x.data()[..3], d.example(3).0);
        assert_eq!(y, vec![3 % 4, 0]);
    }
}
