//! One adapter forward pass: activation maps, their statistics, the
//! aggregated embeddings and a checkpoint round trip.

use mask_adapter::adapter::{adapter_forward, decode_checkpoint, encode_checkpoint, init_params, Stage};
use mask_adapter::extractors::{aggregate, classify, DEFAULT_LOGIT_SCALE};
use mask_adapter::synthworld::{rng_stream, WorldConfig};

fn main() -> mask_adapter::Result<()> {
    let world = WorldConfig::default();
    let bank = world.make_bank()?;
    let scene = world.scene(&bank, 3, 0)?;
    let params = init_params(world.channels, 16, &mut rng_stream(0, 0))?;
    println!(
        "adapter with C={} K={}: {} parameters",
        params.channels,
        params.maps,
        params.num_params()
    );

    let (acts, _) = adapter_forward(&params, &scene.gt_masks, &scene.features, false)?;
    for n in 0..acts.masks().min(3) {
        let s = acts.slice(n, 0);
        let peak = s.iter().copied().fold(0.0, f64::max);
        println!(
            "mask {n}: map 0 sums to {:.6}, peak {peak:.4} (uniform would be {:.4})",
            s.iter().sum::<f64>(),
            1.0 / s.len() as f64
        );
    }

    let embeds = aggregate(&acts, &scene.features)?;
    let pred = classify(&embeds, &bank, DEFAULT_LOGIT_SCALE)?.argmax();
    println!("untrained predictions {pred:?}, labels {:?}", scene.gt_labels);

    let bytes = encode_checkpoint(&params, 0, Stage::Init)?;
    let (back, header) = decode_checkpoint(&bytes, "memory".as_ref())?;
    assert_eq!(back, params);
    println!("checkpoint: {} bytes, format {}", bytes.len(), header.format);
    Ok(())
}
