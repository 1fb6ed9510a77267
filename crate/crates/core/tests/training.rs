//! Short training runs on a small world.

use mask_adapter::adapter::{init_params, AdapterParams};
use mask_adapter::pipeline::{loss_gradient, train_mixed, train_warmup, MatcherKind, TrainConfig};
use mask_adapter::synthworld::{rng_stream, CategoryBank, WorldConfig};
use mask_adapter::Error;

fn setup() -> (WorldConfig, CategoryBank, AdapterParams) {
    let world = WorldConfig {
        height: 32,
        width: 32,
        regions: 6,
        ..WorldConfig::default()
    };
    let bank = world.make_bank().unwrap();
    let params = init_params(world.channels, 4, &mut rng_stream(0, 0)).unwrap();
    (world, bank, params)
}

fn short(base: TrainConfig, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: 4,
        batch_scenes: 2,
        learning_rate: lr,
        ..base
    }
}

// cross-entropy of `params` on a fixed set of seen-category scenes
fn held_out_ce(world: &WorldConfig, bank: &CategoryBank, params: &AdapterParams) -> f64 {
    let seen = bank.subset(&bank.seen_indices());
    let cfg = TrainConfig::warmup();
    (0..4)
        .map(|i| {
            let scene = world.scene(&seen, 77, i).unwrap();
            let (r, _) = loss_gradient(
                &cfg,
                params,
                &seen,
                &scene.features,
                &scene.gt_masks,
                &scene.gt_labels,
                &Default::default(),
            )
            .unwrap();
            r.ce_term
        })
        .sum::<f64>()
        / 4.0
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (world, bank, params) = setup();
    let (after, log) = train_warmup(&short(TrainConfig::warmup(), 1, 0.0), &world, &bank, params.clone()).unwrap();
    assert_eq!(after, params);
    assert_eq!(log.steps.len(), 4);
}

#[test]
fn warmup_reduces_cross_entropy() {
    let (world, bank, params) = setup();
    let before = held_out_ce(&world, &bank, &params);
    let (after, _) = train_warmup(&short(TrainConfig::warmup(), 1, 0.05), &world, &bank, params).unwrap();
    let trained = held_out_ce(&world, &bank, &after);
    assert!(trained < before, "ce {before} -> {trained}");
}

#[test]
fn exact_copies_have_no_consistency_loss() {
    let (world, bank, params) = setup();
    let cfg = TrainConfig {
        perturb_iou_targets: vec![1.0],
        mix_ratio: 1.0,
        ..short(TrainConfig::mixed(), 1, 0.05)
    };
    let (_, log) = train_mixed(&cfg, &world, &bank, params).unwrap();
    let first = &log.steps[0];
    assert!(first.n_matches > 0);
    assert!(first.loss.cos_term.abs() < 1e-12, "cos {}", first.loss.cos_term);
}

#[test]
fn hungarian_matching_trains() {
    let (world, bank, params) = setup();
    let cfg = TrainConfig {
        matcher: MatcherKind::Hungarian,
        ..short(TrainConfig::mixed(), 1, 0.05)
    };
    let (after, log) = train_mixed(&cfg, &world, &bank, params).unwrap();
    assert!(after.all_finite());
    assert!(log.steps.iter().all(|s| s.loss.total.is_finite() && s.n_matches > 0));
    assert!(log.to_csv().starts_with("step,lr,total,ce,cos,n_matches"));
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let (world, bank, params) = setup();
    let r = train_warmup(&short(TrainConfig::warmup(), 2, 1e300), &world, &bank, params);
    assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
}
