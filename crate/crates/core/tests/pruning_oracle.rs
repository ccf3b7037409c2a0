mod common;

use common::{model_with_ties, oracle_prune, prunable_values, pruned_set};
use proptest::prelude::*;
use prunekit::pruning::{build_mask_threshold, prune_once};
use prunekit::schedules::trajectory;
use prunekit::{
    build_mask, iteration_prune_fraction, magnitude_threshold, sparsity, sparsity_at, PruneConfig,
    PruneScope, RateBasis, ScheduleKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn build_mask_matches_full_sort_on_1000_collections() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let levels = [2, 3, 5, 17, 1000][trial % 5];
        let model = model_with_ties(&mut rng, levels);
        let fraction = match trial % 7 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let scope = if trial % 2 == 0 {
            PruneScope::Global
        } else {
            PruneScope::PerLayer
        };
        let mask = build_mask(&model, fraction, scope, None).unwrap();
        let expected = oracle_prune(&prunable_values(&model), fraction, scope);
        assert_eq!(
            pruned_set(&mask),
            expected,
            "trial {trial}, fraction {fraction}, {scope:?}"
        );
    }
}

#[test]
fn threshold_is_kth_smallest_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fraction = rng.random_range(0.0..=1.0);
        let k = (fraction * n as f64).floor() as usize;
        let mut mags: Vec<f64> = w.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let expected = if k == 0 { 0.0 } else { mags[k - 1] };
        assert_eq!(magnitude_threshold(&[&w], fraction).unwrap(), expected);
    }
}

#[test]
fn repeated_pruning_extends_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..100 {
        let model = model_with_ties(&mut rng, 9);
        let scope = if trial % 2 == 0 {
            PruneScope::Global
        } else {
            PruneScope::PerLayer
        };
        let first = build_mask(&model, 0.3, scope, None).unwrap();
        let second = build_mask(&model, 0.4, scope, Some(&first)).unwrap();
        assert!(second.contains_pruning_of(&first));
        assert!(sparsity(&second) >= sparsity(&first));
        // survivors of the first round lose floor(0.4 · surviving) more
        let surviving = first.total_count() - first.pruned_count();
        if scope == PruneScope::Global {
            let extra = second.pruned_count() - first.pruned_count();
            assert_eq!(extra, (0.4 * surviving as f64).floor() as u64);
        }
    }
}

#[test]
fn per_layer_prunes_every_matrix_equally() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = model_with_ties(&mut rng, 1000);
    // make one matrix much larger in magnitude than the rest
    for v in model.prunable_parameters_mut()[0].1.data_mut() {
        *v *= 100.0;
    }
    let per_layer = build_mask(&model, 0.5, PruneScope::PerLayer, None).unwrap();
    for e in per_layer.entries() {
        assert_eq!(e.pruned_count(), (e.keep.len() / 2) as u64, "{}", e.name);
    }
    let global = build_mask(&model, 0.5, PruneScope::Global, None).unwrap();
    assert_eq!(global.entries()[0].pruned_count(), 0);
}

#[test]
fn threshold_override_prunes_strictly_below() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = model_with_ties(&mut rng, 4);
    let mask = build_mask_threshold(&model, 0.5, None).unwrap();
    for ((_, t), e) in model.prunable_parameters().iter().zip(mask.entries()) {
        for (v, k) in t.data().iter().zip(&e.keep) {
            assert_eq!(*k, v.abs() >= 0.5);
        }
    }
    let cfg = PruneConfig {
        threshold_override: Some(0.5),
        rate: 0.99,
        ..PruneConfig::default()
    };
    assert_eq!(prune_once(&model, &cfg, None).unwrap(), mask);
}

#[test]
fn rate_bases_differ_on_the_second_event() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = model_with_ties(&mut rng, 1000);
    let n = prunable_values(&model).iter().map(Vec::len).sum::<usize>() as f64;
    let remaining = PruneConfig {
        rate: 0.5,
        ..PruneConfig::default()
    };
    let original = PruneConfig {
        rate_basis: RateBasis::OfOriginal,
        ..remaining.clone()
    };
    let first = prune_once(&model, &remaining, None).unwrap();
    assert_eq!(first, prune_once(&model, &original, None).unwrap());
    let a = prune_once(&model, &remaining, Some(&first)).unwrap();
    let b = prune_once(&model, &original, Some(&first)).unwrap();
    assert_eq!(
        a.pruned_count() as f64,
        (n * 0.5).floor() + ((n - (n * 0.5).floor()) * 0.5).floor()
    );
    assert_eq!(b.pruned_count(), b.total_count());
}

const KINDS: [ScheduleKind; 4] = [
    ScheduleKind::OneShot,
    ScheduleKind::Constant,
    ScheduleKind::Linear,
    ScheduleKind::Exponential { alpha: 3.0 },
];

/// Replays a schedule on an integer weight count the way the loop does:
/// each step prunes floor(fraction · surviving) of the survivors.
fn replay(kind: ScheduleKind, total: usize, s0: f64, sf: f64, n: u64) -> Vec<f64> {
    let mut pruned = 0u64;
    let mut achieved = Vec::new();
    for t in 0..=total {
        let target = sparsity_at(kind, t, total, s0, sf).unwrap();
        let current = pruned as f64 / n as f64;
        if target > current {
            let f = iteration_prune_fraction(current, target).unwrap();
            pruned += (f * (n - pruned) as f64).floor() as u64;
        }
        achieved.push(pruned as f64 / n as f64);
    }
    achieved
}

proptest! {
    #[test]
    fn schedules_compose_to_target(
        kind_idx in 0usize..4,
        total in 1usize..12,
        s0 in 0.0f64..0.6,
        span in 0.0f64..0.4,
        n in 10u64..200_000,
    ) {
        let kind = KINDS[kind_idx];
        let sf = s0 + span;
        let achieved = replay(kind, total, s0, sf, n);
        let final_s = *achieved.last().unwrap();
        prop_assert!((final_s - sf).abs() <= 2.0 * total as f64 / n as f64,
            "{kind:?} T={total} n={n}: {final_s} vs {sf}");
        let targets = trajectory(kind, total, s0, sf).unwrap();
        for (a, t) in achieved.iter().zip(&targets) {
            prop_assert!((a - t).abs() <= 2.0 / n as f64 + 1e-12, "{a} vs {t}");
        }
        prop_assert!(targets.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn exact_fraction_composition(s0 in 0.0f64..0.9, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s1 = s0 + (1.0 - s0) * a * 0.5;
        let s2 = s1 + (1.0 - s1) * b * 0.5;
        let f1 = iteration_prune_fraction(s0, s1).unwrap();
        let f2 = iteration_prune_fraction(s1, s2).unwrap();
        let composed = 1.0 - (1.0 - s0) * (1.0 - f1) * (1.0 - f2);
        prop_assert!((composed - s2).abs() < 1e-12);
    }
}
