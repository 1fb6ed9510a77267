//! mIoU and mask accuracy of every extractor, alone and fused with the
//! in-vocabulary branch by the seen/unseen geometric ensemble.
//!
//! `cargo run --release --example evaluation [CHECKPOINT]`
//!
//! Without a checkpoint the adapter row uses untrained parameters.

use mask_adapter::adapter::{init_params, load_checkpoint};
use mask_adapter::pipeline::{eval_scenes, evaluate, EnsembleConfig, EvalSettings, ExtractorKind};
use mask_adapter::synthworld::{rng_stream, WorldConfig};

fn main() -> mask_adapter::Result<()> {
    let world = WorldConfig::default();
    let bank = world.make_bank()?;
    let params = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?.0,
        None => init_params(world.channels, 16, &mut rng_stream(0, 0))?,
    };
    let scenes = eval_scenes(&world, &bank, 1000, 20)?;
    let settings = EvalSettings::default();
    let ensemble = EnsembleConfig::new(0.7, 0.9, bank.seen_flags().to_vec())?;

    println!("extractor  acc    acc_pert  mIoU   mIoU_s mIoU_u | ens mIoU  mIoU_s mIoU_u");
    for kind in ExtractorKind::ALL {
        let r = evaluate(&scenes, Some(&params), &bank, kind, None, &settings)?;
        let e = evaluate(&scenes, Some(&params), &bank, kind, Some(&ensemble), &settings)?;
        println!(
            "{:<9} {:.4} {:.4}    {:.4} {:.4} {:.4} | {:.4}    {:.4} {:.4}",
            kind.name(),
            r.mask_acc,
            r.mask_acc_perturbed,
            r.miou,
            r.miou_seen,
            r.miou_unseen,
            e.miou,
            e.miou_seen,
            e.miou_unseen
        );
    }
    Ok(())
}
