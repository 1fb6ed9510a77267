//! Mask pooling against mask cropping on one synthetic scene, with ground
//! truth and perturbed masks.

use mask_adapter::extractors::{classify, mask_crop_embed, mask_pool, DEFAULT_LOGIT_SCALE};
use mask_adapter::masks::downsample_masks;
use mask_adapter::pipeline::predicted_masks;
use mask_adapter::synthworld::{rng_stream, WorldConfig, FEATURE_STRIDE};

fn main() -> mask_adapter::Result<()> {
    let world = WorldConfig::default();
    let bank = world.make_bank()?;
    let scene = world.scene(&bank, 7, 0)?;
    println!(
        "scene {}x{}, {} regions, features {}x{}x{}",
        scene.height,
        scene.width,
        scene.gt_masks.len(),
        scene.features.channels(),
        scene.features.height(),
        scene.features.width()
    );

    let (pert, source) = predicted_masks(&scene.gt_masks, &[0.7], 1.0, &mut rng_stream(7, 1));
    let labels: Vec<usize> = source.iter().map(|&s| scene.gt_labels[s]).collect();

    for (name, masks, labels) in [("gt", &scene.gt_masks, &scene.gt_labels), ("perturbed", &pert, &labels)] {
        let pooled = mask_pool(&downsample_masks(masks, FEATURE_STRIDE)?, &scene.features)?;
        let cropped = mask_crop_embed(masks, &scene.features, FEATURE_STRIDE)?;
        for (ex, e) in [("pool", pooled), ("crop", cropped)] {
            let pred = classify(&e, &bank, DEFAULT_LOGIT_SCALE)?.argmax();
            let right = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
            println!("{name:>9} masks, {ex}: {right}/{} correct", labels.len());
        }
    }
    Ok(())
}
