//! Ground-truth warmup followed by mixed-mask training, printing the loss
//! curve and writing both checkpoints.
//!
//! `cargo run --release --example training [WARMUP_EPOCHS] [MIXED_EPOCHS] [OUT_DIR]`

use std::path::PathBuf;

use mask_adapter::adapter::{init_params, save_checkpoint, Stage};
use mask_adapter::pipeline::{train_mixed, train_warmup, TrainConfig, TrainLog};
use mask_adapter::synthworld::{rng_stream, WorldConfig};

fn summarize(name: &str, log: &TrainLog) {
    let every = (log.steps.len() / 5).max(1);
    for s in log.steps.iter().step_by(every).chain(log.steps.last()) {
        println!(
            "{name} step {:>4} lr {:.4} total {:.4} ce {:.4} cos {:.4} matches {}",
            s.step, s.lr, s.loss.total, s.loss.ce_term, s.loss.cos_term, s.n_matches
        );
    }
}

fn main() -> mask_adapter::Result<()> {
    let mut args = std::env::args().skip(1);
    let warmup_epochs = args.next().map_or(4, |s| s.parse().expect("epochs"));
    let mixed_epochs = args.next().map_or(2, |s| s.parse().expect("epochs"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let world = WorldConfig::default();
    let bank = world.make_bank()?;
    let params = init_params(world.channels, 16, &mut rng_stream(0, 0))?;

    let warm = TrainConfig {
        epochs: warmup_epochs,
        ..TrainConfig::warmup()
    };
    let (params, log) = train_warmup(&warm, &world, &bank, params)?;
    summarize("warmup", &log);
    save_checkpoint(&out.join("warmup.ckpt"), &params, 0, Stage::Warmup)?;

    let mixed = TrainConfig {
        epochs: mixed_epochs,
        ..TrainConfig::mixed()
    };
    let (params, log) = train_mixed(&mixed, &world, &bank, params)?;
    summarize("mixed", &log);
    save_checkpoint(&out.join("mixed.ckpt"), &params, 0, Stage::Mixed)?;
    println!("checkpoints in {}", out.display());
    Ok(())
}
