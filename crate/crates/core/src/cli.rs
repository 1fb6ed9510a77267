//! Command-line front end: `train`, `eval` and `visualize`.
//!
//! Exit codes are 0 on success, 2 for usage, config or input errors and 3
//! when training diverges.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{adapter_forward, init_params, load_checkpoint, AdapterParams, Stage};
use crate::error::{Error, Result};
use crate::masks::BinaryMaskBatch;
use crate::pgm::GrayImage;
use crate::pipeline::{
    eval_scenes, evaluate, train_mixed, train_warmup, EnsembleConfig, EvalReport, EvalSettings, ExtractorKind,
    MatcherKind, TrainConfig, TrainStage,
};
use crate::synthworld::{rng_stream, WorldConfig, FEATURE_STRIDE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MASKADAPTER_THREADS";

/// The configuration shipped with the crate for a first run.
pub const QUICKSTART_CONFIG: &str = include_str!("../quickstart.json");

#[derive(Debug, Parser)]
#[command(
    name = "maskadapter",
    version,
    about = "Train and evaluate a mask adapter on a synthetic world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Warmup,
    Mixed,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractorArg {
    Pool,
    Crop,
    Adapter,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run ground-truth warmup and/or mixed-mask training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate mask classification and segmentation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        extractor: ExtractorArg,
        /// `alpha=A beta=B`
        #[arg(long, num_args = 1..=2, value_name = "KEY=VALUE")]
        ensemble: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the activation maps of every mask of one scene as PGM images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        /// World settings; the defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Evaluation part of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub scenes: usize,
    pub scene_seed: u64,
    pub settings: EvalSettings,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            scenes: 50,
            scene_seed: 1000,
            settings: EvalSettings::default(),
        }
    }
}

/// One ablation arm. Unset fields keep the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    #[serde(default)]
    pub maps: Option<usize>,
    #[serde(default)]
    pub lambda_cos: Option<f64>,
    #[serde(default)]
    pub iou_threshold: Option<f64>,
    #[serde(default)]
    pub matcher: Option<MatcherKind>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub maps: usize,
    pub seed: u64,
    pub warmup: TrainConfig,
    pub mixed: TrainConfig,
    pub eval: EvalSection,
    pub sweep: Vec<SweepEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            maps: 16,
            seed: 0,
            warmup: TrainConfig::warmup(),
            mixed: TrainConfig::mixed(),
            eval: EvalSection::default(),
            sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; messages carry the line of the offending key
    /// where one can be found.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(locate(text, path, &msg)),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup.stage != TrainStage::Warmup {
            return Err(Error::Config("warmup.stage must be \"warmup\"".into()));
        }
        if self.mixed.stage != TrainStage::Mixed {
            return Err(Error::Config("mixed.stage must be \"mixed\"".into()));
        }
        self.warmup.validate()?;
        self.mixed.validate()?;
        if self.maps == 0 {
            return Err(Error::Config("maps must be at least 1".into()));
        }
        if self.eval.scenes == 0 {
            return Err(Error::Config("scenes must be at least 1".into()));
        }
        let w = &self.world;
        if w.height % FEATURE_STRIDE != 0 || w.width % FEATURE_STRIDE != 0 || w.height == 0 || w.width == 0 {
            return Err(Error::Config(format!(
                "height and width must be positive multiples of {FEATURE_STRIDE}"
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.sweep {
            if s.name.is_empty() || s.name.contains(['/', '\\']) || s.name.starts_with('.') {
                return Err(Error::Config(format!(
                    "name {:?} is not a valid directory name",
                    s.name
                )));
            }
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("name {:?} appears twice in the sweep", s.name)));
            }
            let (w, m) = self.for_entry(s);
            w.validate()?;
            m.validate()?;
        }
        Ok(())
    }

    /// Warmup and mixed configs of one sweep arm.
    fn for_entry(&self, s: &SweepEntry) -> (TrainConfig, TrainConfig) {
        let mut warmup = self.warmup.clone();
        let mut mixed = self.mixed.clone();
        for c in [&mut warmup, &mut mixed] {
            if let Some(v) = s.lambda_cos {
                c.lambda_cos = v;
            }
            if let Some(v) = s.iou_threshold {
                c.iou_threshold = v;
            }
            if let Some(v) = s.matcher {
                c.matcher = v;
            }
        }
        (warmup, mixed)
    }
}

// Prefixes a validation message with the line of the first key it names.
fn locate(text: &str, path: &Path, msg: &str) -> String {
    let key: String = msg
        .chars()
        .skip_while(|c| !c.is_ascii_alphanumeric())
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '_' || *c == '.')
        .collect();
    let key = key.rsplit('.').next().unwrap_or("");
    let needle = format!("\"{key}\"");
    match text.lines().position(|l| l.contains(&needle)) {
        Some(i) if !key.is_empty() => format!("{}:{}: {msg}", path.display(), i + 1),
        _ => format!("{}: {msg}", path.display()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation and every file it wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub output_dir: String,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    fn new(command: &str, config_path: Option<&Path>, seed: u64, out: &Path) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            output_dir: out.display().to_string(),
            artifacts: Vec::new(),
        }
    }

    /// Writes `bytes` to `out/rel` and records its hash.
    fn write(&mut self, out: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.artifacts.push(Artifact {
            path: rel.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn finish(mut self, out: &Path) -> Result<Self> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }
}

fn checkpoint_bytes(params: &AdapterParams, seed: u64, stage: Stage) -> Result<Vec<u8>> {
    crate::adapter::encode_checkpoint(params, seed, stage)
}

fn train_one(
    cfg: &RunConfig,
    warmup: &TrainConfig,
    mixed: &TrainConfig,
    maps: usize,
    seed: u64,
    stage: StageArg,
    out: &Path,
    prefix: &str,
    manifest: &mut RunManifest,
) -> Result<()> {
    let bank = cfg.world.make_bank()?;
    let resume = out.join(format!("{prefix}warmup.ckpt"));
    let mut params = if stage == StageArg::Mixed && resume.exists() {
        let (p, _) = load_checkpoint(&resume)?;
        if p.channels != cfg.world.channels || p.maps != maps {
            return Err(Error::Config(format!(
                "{} has C={} K={}, config wants C={} K={maps}",
                resume.display(),
                p.channels,
                p.maps,
                cfg.world.channels
            )));
        }
        p
    } else {
        init_params(cfg.world.channels, maps, &mut rng_stream(seed, 0))?
    };
    if stage != StageArg::Mixed {
        let tc = TrainConfig { seed, ..warmup.clone() };
        let (p, log) = train_warmup(&tc, &cfg.world, &bank, params)?;
        params = p;
        manifest.write(
            out,
            &format!("{prefix}warmup.ckpt"),
            &checkpoint_bytes(&params, seed, Stage::Warmup)?,
        )?;
        manifest.write(out, &format!("{prefix}warmup_log.csv"), log.to_csv().as_bytes())?;
    }
    if stage != StageArg::Warmup {
        let tc = TrainConfig { seed, ..mixed.clone() };
        let (p, log) = train_mixed(&tc, &cfg.world, &bank, params)?;
        params = p;
        manifest.write(
            out,
            &format!("{prefix}mixed.ckpt"),
            &checkpoint_bytes(&params, seed, Stage::Mixed)?,
        )?;
        manifest.write(out, &format!("{prefix}mixed_log.csv"), log.to_csv().as_bytes())?;
    }
    Ok(())
}

/// Trains the configured stages (and every sweep arm) into `out`.
pub fn cmd_train(config_path: &Path, out: &Path, stage: StageArg, seed: Option<u64>) -> Result<RunManifest> {
    let cfg = RunConfig::load(config_path)?;
    let seed = seed.unwrap_or(cfg.seed);
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("train", Some(config_path), seed, out);
    if cfg.sweep.is_empty() {
        train_one(
            &cfg,
            &cfg.warmup,
            &cfg.mixed,
            cfg.maps,
            seed,
            stage,
            out,
            "",
            &mut manifest,
        )?;
    } else {
        for s in &cfg.sweep {
            let (w, m) = cfg.for_entry(s);
            let prefix = format!("{}/", s.name);
            train_one(
                &cfg,
                &w,
                &m,
                s.maps.unwrap_or(cfg.maps),
                seed,
                stage,
                out,
                &prefix,
                &mut manifest,
            )?;
        }
    }
    manifest.finish(out)
}

/// Parses `alpha=A beta=B` (either order).
pub fn parse_ensemble(args: &[String]) -> Result<(f64, f64)> {
    let (mut alpha, mut beta) = (None, None);
    for a in args.iter().flat_map(|s| s.split_whitespace()) {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--ensemble expects key=value, got {a:?}")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("--ensemble value {v:?} is not a number")))?;
        match k {
            "alpha" => alpha = Some(v),
            "beta" => beta = Some(v),
            _ => return Err(Error::Config(format!("--ensemble key {k:?} is not alpha or beta"))),
        }
    }
    match (alpha, beta) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Config("--ensemble needs both alpha=A and beta=B".into())),
    }
}

/// Evaluates the requested extractors and writes one report per extractor
/// (plus an ensemble report when requested) and, for `all`, a comparison
/// table.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    extractor: ExtractorArg,
    ensemble: Option<(f64, f64)>,
    out: &Path,
) -> Result<RunManifest> {
    let cfg = RunConfig::load(config_path)?;
    let (params, header) =
        load_checkpoint(checkpoint).map_err(|e| Error::Config(format!("{}: {e}", checkpoint.display())))?;
    if params.channels != cfg.world.channels {
        return Err(Error::Config(format!(
            "checkpoint has {} channels, world has {}",
            params.channels, cfg.world.channels
        )));
    }
    let bank = cfg.world.make_bank()?;
    let ens = ensemble
        .map(|(a, b)| EnsembleConfig::new(a, b, bank.seen_flags().to_vec()))
        .transpose()
        .map_err(|e| Error::Config(e.to_string()))?;
    let scenes = eval_scenes(&cfg.world, &bank, cfg.eval.scene_seed, cfg.eval.scenes)?;
    let kinds: Vec<ExtractorKind> = match extractor {
        ExtractorArg::Pool => vec![ExtractorKind::Pool],
        ExtractorArg::Crop => vec![ExtractorKind::Crop],
        ExtractorArg::Adapter => vec![ExtractorKind::Adapter],
        ExtractorArg::All => ExtractorKind::ALL.to_vec(),
    };
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("eval", Some(config_path), header.seed, out);
    let mut rows: Vec<(EvalReport, Option<EvalReport>)> = Vec::new();
    for kind in kinds {
        let r = evaluate(&scenes, Some(&params), &bank, kind, None, &cfg.eval.settings)?;
        manifest.write(out, &format!("report_{}.json", kind.name()), r.to_json()?.as_bytes())?;
        let e = match &ens {
            Some(c) => {
                let r = evaluate(&scenes, Some(&params), &bank, kind, Some(c), &cfg.eval.settings)?;
                manifest.write(
                    out,
                    &format!("report_{}_ensemble.json", kind.name()),
                    r.to_json()?.as_bytes(),
                )?;
                Some(r)
            }
            None => None,
        };
        rows.push((r, e));
    }
    if extractor == ExtractorArg::All {
        manifest.write(out, "comparison.csv", comparison_csv(&rows).as_bytes())?;
    }
    manifest.finish(out)
}

fn comparison_csv(rows: &[(EvalReport, Option<EvalReport>)]) -> String {
    let with_ens = rows.iter().any(|(_, e)| e.is_some());
    let mut s = String::from("extractor,mask_acc,miou,miou_s,miou_u");
    if with_ens {
        s.push_str(",miou_ensemble,miou_s_ensemble,miou_u_ensemble");
    }
    s.push('\n');
    for (r, e) in rows {
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.extractor.name(),
            r.mask_acc,
            r.miou,
            r.miou_seen,
            r.miou_unseen
        );
        if let Some(e) = e {
            let _ = write!(s, ",{:.6},{:.6},{:.6}", e.miou, e.miou_seen, e.miou_unseen);
        }
        s.push('\n');
    }
    s
}

fn min_max_image(values: &[f64], h: usize, w: usize, scale: usize) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut pixels = vec![0u8; h * scale * w * scale];
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = values[(y / scale) * w + x / scale];
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            pixels[y * w * scale + x] = (t * 255.0).round() as u8;
        }
    }
    GrayImage::new(w * scale, h * scale, pixels).expect("sized above")
}

/// Activation maps (min-max scaled, upsampled to image size) and a mask
/// overlay for every ground-truth mask of one scene.
pub fn cmd_visualize(
    checkpoint: &Path,
    scene_seed: u64,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<RunManifest> {
    let cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (params, _) =
        load_checkpoint(checkpoint).map_err(|e| Error::Config(format!("{}: {e}", checkpoint.display())))?;
    if params.channels != cfg.world.channels {
        return Err(Error::Config(format!(
            "checkpoint has {} channels, world has {}",
            params.channels, cfg.world.channels
        )));
    }
    let bank = cfg.world.make_bank()?;
    let scene = cfg.world.scene(&bank, scene_seed, 0)?;
    let (acts, _) = adapter_forward(&params, &scene.gt_masks, &scene.features, false)?;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("visualize", config_path, scene_seed, out);
    let (h, w) = (acts.height(), acts.width());
    for n in 0..acts.masks() {
        for k in 0..acts.maps() {
            let img = min_max_image(acts.slice(n, k), h, w, FEATURE_STRIDE);
            manifest.write(out, &format!("mask{n:02}_map{k:02}.pgm"), &img.encode())?;
        }
        let overlay = overlay_image(&scene.gt_masks, n, acts.mask_maps(n), acts.maps(), h, w);
        manifest.write(out, &format!("mask{n:02}_overlay.pgm"), &overlay.encode())?;
    }
    manifest.finish(out)
}

// Mask pixels at full brightness over the mean activation map at half range.
fn overlay_image(masks: &BinaryMaskBatch, n: usize, maps: &[f64], k: usize, h: usize, w: usize) -> GrayImage {
    let plane = h * w;
    let mean: Vec<f64> = (0..plane)
        .map(|p| (0..k).map(|j| maps[j * plane + p]).sum::<f64>() / k as f64)
        .collect();
    let base = min_max_image(&mean, h, w, FEATURE_STRIDE);
    let mask = masks.get(n);
    let pixels = base
        .pixels
        .iter()
        .zip(mask.data())
        .map(|(&v, &on)| if on { 255 } else { v / 2 })
        .collect();
    GrayImage::new(base.width, base.height, pixels).expect("same size")
}

/// Maps a pipeline error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        // a pool that already exists (a second call in one process) is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run_command(cli: Cli) -> Result<RunManifest> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            out,
            stage,
            seed,
        } => cmd_train(&config, &out, stage, seed),
        Command::Eval {
            checkpoint,
            config,
            extractor,
            ensemble,
            out,
        } => {
            let ens = ensemble.as_deref().map(parse_ensemble).transpose()?;
            cmd_eval(&checkpoint, &config, extractor, ens, &out)
        }
        Command::Visualize {
            checkpoint,
            scene_seed,
            config,
            out,
        } => cmd_visualize(&checkpoint, scene_seed, config.as_deref(), &out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run_command(cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quickstart_parses() {
        let cfg = RunConfig::parse(QUICKSTART_CONFIG, Path::new("quickstart.json")).unwrap();
        assert_eq!(cfg.maps, 16);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "{\n  \"maps\": 4,\n  \"lamda_cos\": 5\n}";
        let e = RunConfig::parse(text, Path::new("c.json")).unwrap_err().to_string();
        assert!(e.contains("c.json:3:"), "{e}");
    }

    #[test]
    fn validation_error_reports_line() {
        let text =
            "{\n  \"warmup\": {\n    \"stage\": \"warmup\",\n    \"epochs\": 1,\n    \"learning_rate\": -1\n  }\n}";
        let e = RunConfig::parse(text, Path::new("c.json")).unwrap_err().to_string();
        assert!(e.contains("c.json:5:"), "{e}");
    }

    #[test]
    fn ensemble_flag() {
        let args = vec!["alpha=0.7".to_string(), "beta=0.9".to_string()];
        assert_eq!(parse_ensemble(&args).unwrap(), (0.7, 0.9));
        assert_eq!(parse_ensemble(&["beta=0.9 alpha=0.7".to_string()]).unwrap(), (0.7, 0.9));
        assert!(parse_ensemble(&["alpha=0.7".to_string()]).is_err());
        assert!(parse_ensemble(&["gamma=1".to_string(), "beta=0".to_string()]).is_err());
    }
}
