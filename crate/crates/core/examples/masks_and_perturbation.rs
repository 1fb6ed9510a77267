//! Binary masks, IoU, controlled perturbation and the two mask file formats.
//!
//! `cargo run --example masks_and_perturbation [OUT_DIR]`

use std::path::PathBuf;

use mask_adapter::masks::{downsample_masks, iou, perturb_mask, BinaryMask, BinaryMaskBatch};
use mask_adapter::synthworld::rng_stream;

fn main() -> mask_adapter::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("masks_demo"));
    std::fs::create_dir_all(&out)?;

    // a disk of radius 8 on a 32x32 grid
    let disk = BinaryMask::from_fn(32, 32, |y, x| {
        let (dy, dx) = (y as f64 - 15.5, x as f64 - 15.5);
        dy * dy + dx * dx <= 64.0
    });
    println!("disk area {}", disk.area());

    let mut rng = rng_stream(0, 0);
    let mut batch = BinaryMaskBatch::new(32, 32, vec![disk.clone()])?;
    for target in [0.9, 0.8, 0.7] {
        let p = perturb_mask(&disk, target, &mut rng)?;
        println!("target {target:.1}: IoU {:.3}, area {}", iou(&disk, &p)?, p.area());
        batch.push(p)?;
    }

    let soft = downsample_masks(&batch, 4)?;
    for n in 0..soft.len() {
        let mass: f64 = soft.row(n).iter().sum();
        println!(
            "mask {n}: soft mass x16 = {:.0} (pixel area {})",
            mass * 16.0,
            batch.get(n).area()
        );
    }

    batch.save_pgm_dir(&out, "mask")?;
    batch.save_packed(&out.join("masks.bits"), &out.join("masks.json"))?;
    let back = BinaryMaskBatch::load_packed(&out.join("masks.bits"), &out.join("masks.json"))?;
    assert_eq!(back, batch);
    println!("wrote {} masks to {}", batch.len(), out.display());
    Ok(())
}
