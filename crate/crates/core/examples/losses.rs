//! Cross-entropy and consistency terms for one scene, and the gradient of
//! the weighted sum with respect to the adapter.

use mask_adapter::adapter::init_params;
use mask_adapter::masks::BinaryMaskBatch;
use mask_adapter::matching::{iou_matcher, MatchPair, MatchSet};
use mask_adapter::pipeline::{loss_gradient, predicted_masks, TrainConfig};
use mask_adapter::synthworld::{rng_stream, WorldConfig};

fn main() -> mask_adapter::Result<()> {
    let world = WorldConfig::default();
    let bank = world.make_bank()?;
    let train_bank = bank.subset(&bank.seen_indices());
    let scene = world.scene(&train_bank, 5, 0)?;
    let params = init_params(world.channels, 16, &mut rng_stream(0, 0))?;

    let (pred, _) = predicted_masks(&scene.gt_masks, &[0.8], 1.0, &mut rng_stream(5, 1));
    let matches = iou_matcher(&scene.gt_masks, &pred, 0.7)?;

    // ground-truth masks first, then every matched prediction
    let mut masks: BinaryMaskBatch = scene.gt_masks.clone();
    let mut targets = scene.gt_labels.clone();
    let mut pairs = Vec::new();
    for m in matches.pairs() {
        pairs.push(MatchPair {
            gt: m.gt,
            pred: masks.len(),
            iou: m.iou,
        });
        masks.push(pred.get(m.pred).clone())?;
        targets.push(scene.gt_labels[m.gt]);
    }

    let cfg = TrainConfig::mixed();
    let (report, grads) = loss_gradient(
        &cfg,
        &params,
        &train_bank,
        &scene.features,
        &masks,
        &targets,
        &MatchSet::new(pairs),
    )?;
    println!(
        "ce {:.4}  cos {:.6}  total {:.4} = {} x ce + {} x cos",
        report.ce_term, report.cos_term, report.total, report.lambda_ce, report.lambda_cos
    );
    let norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("{} matched pairs, gradient norm {norm:.4}", report.per_pair_cos.len());
    Ok(())
}
