use evalnorm_core::estimator::{project_params, EnParams};
use evalnorm_core::normalization::{
    batch_moments, combine_moments, ema_update, en_moments, instance_moments, per_sample_moments,
    rule_of_thumb_alpha, EmaState, MomentPair,
};
use evalnorm_core::Tensor;
use proptest::prelude::*;

/// `[n, c, s]` batches with values in a shifted, scaled range.
fn batch() -> impl Strategy<Value = Tensor> {
    (1usize..9, 1usize..4, 1usize..5, -50.0f64..50.0, 0.01f64..10.0).prop_flat_map(|(n, c, s, off, sc)| {
        proptest::collection::vec(-1.0f64..1.0, n * c * s).prop_map(move |v| {
            Tensor::new(vec![n, c, s], v.into_iter().map(|x| off + sc * x).collect()).unwrap()
        })
    })
}

/// Per-channel mean and population variance, two-pass.
fn direct(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| x.data()[(i * c + ch) * s..(i * c + ch + 1) * s].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64)
        })
        .unzip()
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-9 * scale.max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn batch_moments_match_two_pass(x in batch()) {
        let m = batch_moments(&x).unwrap();
        let (dm, dv) = direct(&x);
        let mag = x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for c in 0..m.channels() {
            prop_assert!(close(m.mean[c], dm[c], mag));
            prop_assert!(close(m.variance[c], dv[c], mag * mag));
            prop_assert!(m.variance[c] >= 0.0);
        }
    }

    #[test]
    fn any_split_recombines_to_the_whole(x in batch(), cut in 0.0f64..1.0) {
        let n = x.shape()[0];
        prop_assume!(n >= 2);
        let k = 1 + ((n - 1) as f64 * cut) as usize;
        let head = batch_moments(&x.slice(0, 0, k).unwrap()).unwrap();
        let tail = batch_moments(&x.slice(0, k, n).unwrap()).unwrap();
        let whole = combine_moments(&head, &tail, k as f64 / n as f64).unwrap();
        let merged = head.merge(&tail).unwrap();
        let (dm, dv) = direct(&x);
        let mag = x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for c in 0..dm.len() {
            prop_assert!(close(whole.mean[c], dm[c], mag));
            prop_assert!(close(whole.variance[c], dv[c], mag * mag));
            prop_assert!(close(merged.variance[c], dv[c], mag * mag));
        }
        prop_assert_eq!(merged.count, n * x.shape()[2]);
    }

    #[test]
    fn combine_endpoints_pick_one_side(x in batch()) {
        let n = x.shape()[0];
        prop_assume!(n >= 2);
        let a = batch_moments(&x.slice(0, 0, 1).unwrap()).unwrap();
        let b = batch_moments(&x.slice(0, 1, n).unwrap()).unwrap();
        prop_assert_eq!(combine_moments(&a, &b, 1.0).unwrap().mean, a.mean.clone());
        prop_assert_eq!(combine_moments(&a, &b, 0.0).unwrap().variance, b.variance.clone());
    }

    #[test]
    fn per_sample_moments_are_instance_moments(x in batch()) {
        let all = per_sample_moments(&x).unwrap();
        prop_assert_eq!(all.len(), x.shape()[0]);
        for (i, m) in all.iter().enumerate() {
            let one = instance_moments(&x.slice(0, i, i + 1).unwrap()).unwrap();
            prop_assert_eq!(m, &one);
        }
    }

    #[test]
    fn en_moments_follow_the_scalar_formula(
        mi in -5.0f64..5.0, vi in 0.0f64..4.0, me in -5.0f64..5.0, ve in 0.0f64..4.0,
        a in 0.0f64..=1.0, b in 0.0f64..=1.0,
    ) {
        let inst = MomentPair::new(vec![mi], vec![vi], 1).unwrap();
        let state = EmaState { mean: vec![me], variance: vec![ve], decay: 0.99, update_count: 3 };
        let m = en_moments(&inst, &state, a, b).unwrap();
        let mean = a * mi + (1.0 - a) * me;
        let var = b * vi + (1.0 - b) * ve + b * (1.0 - b) * (mi - me) * (mi - me);
        prop_assert!((m.mean[0] - mean).abs() < 1e-12);
        prop_assert!((m.variance[0] - var).abs() < 1e-12);
    }

    #[test]
    fn ema_replay_matches_closed_form(
        m0 in -3.0f64..3.0, v0 in 0.1f64..3.0, m in -3.0f64..3.0, v in 0.1f64..3.0,
        d in 0.5f64..0.999, steps in 1usize..200,
    ) {
        let mut s = EmaState { mean: vec![m0], variance: vec![v0], decay: d, update_count: 0 };
        let target = MomentPair::new(vec![m], vec![v], 4).unwrap();
        for _ in 0..steps {
            s = ema_update(&s, &target).unwrap();
        }
        let keep = d.powi(steps as i32);
        prop_assert!((s.mean[0] - (keep * m0 + (1.0 - keep) * m)).abs() < 1e-10);
        prop_assert!((s.variance[0] - (keep * v0 + (1.0 - keep) * v)).abs() < 1e-10);
        prop_assert_eq!(s.update_count, steps as u64);
    }

    #[test]
    fn projection_clamps_and_is_idempotent(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = project_params(&EnParams::new(2, a, b));
        prop_assert!((0.0..=1.0).contains(&p.alpha_hat) && (0.0..=1.0).contains(&p.beta_hat));
        prop_assert_eq!(project_params(&p), p.clone());
        if (0.0..=1.0).contains(&a) {
            prop_assert_eq!(p.alpha_hat, a);
        }
        prop_assert_eq!(p.layer_id, 2);
    }
}

#[test]
fn fresh_ema_is_standard() {
    let s = EmaState::new(3, 0.99).unwrap();
    assert_eq!(s.mean, vec![0.0; 3]);
    assert_eq!(s.variance, vec![1.0; 3]);
    assert_eq!(s.update_count, 0);
}

#[test]
fn instance_moments_need_one_sample() {
    let x = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(instance_moments(&x).is_err());
    let m = instance_moments(&x.slice(0, 1, 2).unwrap()).unwrap();
    assert_eq!((m.mean[0], m.variance[0]), (3.5, 0.25));
}

#[test]
fn mixing_weights_outside_unit_interval_are_rejected() {
    let a = MomentPair::new(vec![0.0], vec![1.0], 1).unwrap();
    assert!(combine_moments(&a, &a, 1.5).is_err());
    assert!(combine_moments(&a, &a, f64::NAN).is_err());
    let s = EmaState::new(1, 0.99).unwrap();
    assert!(en_moments(&a, &s, -0.1, 0.5).is_err());
}

#[test]
fn rule_of_thumb_is_inverse_square() {
    assert_eq!(rule_of_thumb_alpha(2), 0.25);
    assert_eq!(rule_of_thumb_alpha(8), 1.0 / 64.0);
}
