//! IoU-threshold matching against one-to-one Hungarian matching of
//! perturbed predictions.

use mask_adapter::matching::{hungarian_matcher, iou_matcher, DEFAULT_IOU_THRESHOLD};
use mask_adapter::pipeline::predicted_masks;
use mask_adapter::synthworld::{rng_stream, WorldConfig};

fn main() -> mask_adapter::Result<()> {
    let world = WorldConfig {
        regions: 4,
        ..WorldConfig::default()
    };
    let bank = world.make_bank()?;
    let scene = world.scene(&bank, 11, 0)?;
    let (pred, source) = predicted_masks(&scene.gt_masks, &[0.6, 0.7, 0.8, 0.9], 1.0, &mut rng_stream(11, 1));
    println!(
        "{} ground-truth masks, {} predictions (sources {source:?})",
        scene.gt_masks.len(),
        pred.len()
    );

    let many = iou_matcher(&scene.gt_masks, &pred, DEFAULT_IOU_THRESHOLD)?;
    println!("IoU >= {DEFAULT_IOU_THRESHOLD}: {} pairs", many.len());
    print!("{}", many.to_csv());

    let one = hungarian_matcher(&scene.gt_masks, &pred)?;
    println!("Hungarian: {} pairs, total cost {:.4}", one.len(), one.total_cost());
    print!("{}", one.to_csv());
    Ok(())
}
