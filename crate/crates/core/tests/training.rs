use std::collections::BTreeSet;

use evalnorm_core::data::{batch_iterator, gaussian_centroids, synth_gaussians, Split};
use evalnorm_core::estimator::{estimate_offline, EnSettings, OfflineConfig};
use evalnorm_core::model::{Model, ModelSpec, NormSettings};
use evalnorm_core::train::{train, EvalModeTag, TrainSettings};

#[test]
fn well_separated_classes_are_nearest_centroid_separable() {
    let data = synth_gaussians(4, 8, 250, 3, 10.0, Split::Eval).unwrap();
    let centroids = gaussian_centroids(4, 8, 3, 10.0);
    let hits = (0..data.len())
        .filter(|&i| {
            let (x, y) = data.example(i);
            let d = |c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..4).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap() == y
        })
        .count();
    assert!(hits as f64 / data.len() as f64 > 0.99);
}

#[test]
fn splits_share_centroids_but_not_samples() {
    let tr = synth_gaussians(3, 4, 10, 1, 2.0, Split::Train).unwrap();
    let ev = synth_gaussians(3, 4, 10, 1, 2.0, Split::Eval).unwrap();
    assert_ne!(tr.features(), ev.features());
    assert_eq!(tr.labels(), ev.labels());
}

#[test]
fn epochs_visit_each_index_at_most_once() {
    let data = synth_gaussians(2, 3, 50, 0, 1.0, Split::Train).unwrap();
    let mut orders = Vec::new();
    for epoch in 0..2 {
        let mut seen = BTreeSet::new();
        let mut order = Vec::new();
        for b in batch_iterator(&data, 16, 4, 7, epoch).unwrap() {
            assert_eq!(b.indices.len(), 16);
            assert_eq!(b.num_microbatches(), 4);
            assert!(b.microbatches().all(|m| m.len() == 4));
            for &i in &b.indices {
                assert!(seen.insert(i));
                order.push(i);
            }
        }
        assert_eq!(seen.len(), 96);
        orders.push(order);
    }
    assert_ne!(orders[0], orders[1]);
    assert!(batch_iterator(&data, 16, 3, 7, 0).is_err());
}

fn tiny(b: usize, seed: u64, en: bool) -> (Model, evalnorm_core::train::RunRecord) {
    let tr = synth_gaussians(3, 6, 40, 2, 3.0, Split::Train).unwrap();
    let ev = synth_gaussians(3, 6, 20, 2, 3.0, Split::Eval).unwrap();
    let mut model = Model::build(&ModelSpec::mlp(6, &[8, 8], 3, seed), NormSettings::default()).unwrap();
    let mut s = TrainSettings::new(b, seed);
    s.sgd_batch = 8;
    s.epochs = 2;
    s.en_enabled = en;
    let rec = train(&mut model, &tr, &ev, &s, "t").unwrap();
    (model, rec)
}

#[test]
fn training_is_deterministic() {
    let (m1, r1) = tiny(2, 4, true);
    let (m2, r2) = tiny(2, 4, true);
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_eq!(r1.epochs.len(), 2);
    assert_eq!(r1.epochs[1].en.len(), 2);
    assert_ne!(tiny(2, 5, true).0, m1);
}

#[test]
fn records_cover_every_mode_only_with_parameters() {
    let (_, on) = tiny(4, 0, true);
    let (_, off) = tiny(4, 0, false);
    assert!(on.final_accuracy(EvalModeTag::En).is_some());
    assert!(off.final_accuracy(EvalModeTag::En).is_none());
    assert!(off.final_accuracy(EvalModeTag::SimpleInvB2).is_some());
    assert!(off.epochs[0].aux_loss.is_empty());
}

#[test]
fn offline_estimation_leaves_the_model_alone_and_lowers_the_loss() {
    let (model, _) = tiny(2, 1, false);
    let before = model.clone();
    let data = synth_gaussians(3, 6, 40, 2, 3.0, Split::Train).unwrap();
    let run = |init| {
        estimate_offline(
            &model,
            &data,
            &OfflineConfig {
                sgd_batch: 8,
                microbatch: 2,
                steps: Some(200),
                en: EnSettings { init: Some(init), ..EnSettings::default() },
                seed: 0,
            },
        )
        .unwrap()
    };
    let est = run(0.0);
    assert_eq!(model, before);
    assert_eq!(est.params.len(), 2);
    assert_eq!(est.losses.len(), 200 * 2);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let first: Vec<f64> = est.losses.iter().filter(|l| l.step < 20).map(|l| l.loss).collect();
    let last: Vec<f64> = est.losses.iter().filter(|l| l.step >= 180).map(|l| l.loss).collect();
    assert!(mean(&last) < mean(&first));
    assert!(est.params.iter().all(|p| p.alpha_hat > 0.0 || p.beta_hat > 0.0));
}
