//! Ground-truth warmup and mixed-mask training.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{MatcherKind, TrainConfig, TrainStage};
use crate::adapter::{adapter_backward, adapter_forward, AdapterParams};
use crate::error::{Error, Result};
use crate::extractors::{
    aggregate_backward, aggregate_unchecked, cosine_logits, l2_normalize, normalize_backward, EmbeddingBatch,
};
use crate::losses::{ce_loss, cos_consistency_loss, total_loss, LossReport};
use crate::masks::{perturb_mask, BinaryMaskBatch};
use crate::matching::{hungarian_matcher, iou_matcher, MatchPair, MatchSet};
use crate::synthworld::{rng_stream, CategoryBank, FeatureMap, Scene, WorldConfig};

/// Stream tags keep scene and perturbation randomness of the two stages apart.
const WARMUP_STREAM: u64 = 1 << 48;
const MIXED_STREAM: u64 = 2 << 48;
const PERTURB_SALT: u64 = 0x5eed_9e37_79b9_7f4a;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub n_matches: usize,
}

/// Per-step training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// CSV with columns `step,lr,total,ce,cos,n_matches`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,total,ce,cos,n_matches\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{}",
                s.step, s.lr, s.loss.total, s.loss.ce_term, s.loss.cos_term, s.n_matches
            );
        }
        out
    }
}

/// Masks fed to the adapter for one scene, with their supervision.
struct SceneBatch {
    masks: BinaryMaskBatch,
    targets: Vec<usize>,
    /// consistency pairs as (gt row, pred row) within `masks`
    pairs: MatchSet,
    n_matches: usize,
}

/// Perturbed copies of every ground-truth mask, one per IoU target, kept
/// with probability `mix_ratio`. Returns the masks and the index of the
/// ground-truth mask each one came from.
pub fn predicted_masks<R: Rng + ?Sized>(
    gt: &BinaryMaskBatch,
    targets: &[f64],
    mix_ratio: f64,
    rng: &mut R,
) -> (BinaryMaskBatch, Vec<usize>) {
    let mut out = BinaryMaskBatch::empty(gt.height(), gt.width());
    let mut source = Vec::new();
    for (i, m) in gt.iter().enumerate() {
        for &t in targets {
            let keep = mix_ratio >= 1.0 || rng.random_bool(mix_ratio);
            // a mask too small to land in the band is dropped, like a
            // generator that simply misses the object
            if let (true, Ok(p)) = (keep, perturb_mask(m, t, rng)) {
                out.push(p).expect("same resolution");
                source.push(i);
            }
        }
    }
    (out, source)
}

fn scene_batch(cfg: &TrainConfig, scene: &Scene, perturb_seed: u64, stream: u64) -> Result<SceneBatch> {
    let gt = &scene.gt_masks;
    let mut masks = gt.clone();
    let mut targets = scene.gt_labels.clone();
    if cfg.stage == TrainStage::Warmup || cfg.mix_ratio == 0.0 {
        return Ok(SceneBatch {
            masks,
            targets,
            pairs: MatchSet::default(),
            n_matches: 0,
        });
    }
    let mut rng = rng_stream(perturb_seed, stream);
    let (pred, _) = predicted_masks(gt, &cfg.perturb_iou_targets, cfg.mix_ratio, &mut rng);
    let matches = match cfg.matcher {
        MatcherKind::Iou => iou_matcher(gt, &pred, cfg.iou_threshold)?,
        MatcherKind::Hungarian => hungarian_matcher(gt, &pred)?,
    };
    // a prediction matched to several ground truths is supervised by its
    // best match only
    let mut best: Vec<Option<MatchPair>> = vec![None; pred.len()];
    for p in matches.pairs() {
        if best[p.pred].is_none_or(|b| p.iou > b.iou) {
            best[p.pred] = Some(*p);
        }
    }
    let mut pairs = Vec::new();
    for p in best.into_iter().flatten() {
        let row = masks.len();
        masks.push(pred.get(p.pred).clone())?;
        targets.push(scene.gt_labels[p.gt]);
        pairs.push(MatchPair {
            gt: p.gt,
            pred: row,
            iou: p.iou,
        });
    }
    Ok(SceneBatch {
        masks,
        targets,
        pairs: MatchSet::new(pairs),
        n_matches: matches.len(),
    })
}

/// Result of one forward/backward pass over a batch of scenes.
struct BatchGradient {
    grads: AdapterParams,
    report: LossReport,
    n_matches: usize,
}

/// Loss terms of one scene and the parameter gradient of
/// `ce_weight·ce + cos_weight·cos`.
struct SceneGradient {
    ce: f64,
    cos: f64,
    per_pair: Vec<f64>,
    grads: AdapterParams,
}

#[allow(clippy::too_many_arguments)]
fn scene_gradient(
    params: &AdapterParams,
    protos: &[&[f64]],
    logit_scale: f64,
    features: &FeatureMap,
    masks: &BinaryMaskBatch,
    targets: &[usize],
    pairs: &MatchSet,
    ce_weight: f64,
    cos_weight: f64,
) -> Result<SceneGradient> {
    let c = params.channels;
    let n = masks.len();
    let (acts, tape) = adapter_forward(params, masks, features, true)?;
    let mut unit = aggregate_unchecked(&acts, features);
    let mut norms = Vec::with_capacity(n);
    for row in unit.chunks_mut(c) {
        norms.push(l2_normalize(row).ok_or_else(|| Error::NonFinite {
            stage: "embedding normalization".into(),
        })?);
    }
    let embeds = EmbeddingBatch::new(n, c, unit.clone(), true)?;

    let logits = cosine_logits(&embeds, protos, logit_scale);
    let (ce, d_logits) = ce_loss(&logits, targets)?;
    let mut d_embed = vec![0.0; n * c];
    for r in 0..n {
        for (l, p) in protos.iter().enumerate() {
            let g = ce_weight * logit_scale * d_logits[r * protos.len() + l];
            for ch in 0..c {
                d_embed[r * c + ch] += g * p[ch];
            }
        }
    }

    let (cos, per_pair) = if pairs.is_empty() {
        (0.0, Vec::new())
    } else {
        let cos = cos_consistency_loss(&embeds, &embeds, pairs)?;
        for (d, (a, b)) in d_embed.iter_mut().zip(cos.grad_gt.iter().zip(&cos.grad_pred)) {
            *d += cos_weight * (a + b);
        }
        (cos.value, cos.per_pair)
    };

    let mut d_raw = Vec::with_capacity(d_embed.len());
    for (r, g) in d_embed.chunks(c).enumerate() {
        d_raw.extend(normalize_backward(&unit[r * c..(r + 1) * c], norms[r], g));
    }
    let (d_acts, _) = aggregate_backward(&acts, features, &d_raw)?;
    let g = adapter_backward(&tape.expect("tape requested"), &d_acts)?;
    Ok(SceneGradient {
        ce,
        cos,
        per_pair,
        grads: g.params,
    })
}

/// Training objective of one scene's masks and its gradient with respect to
/// the adapter parameters.
///
/// `targets` index rows of `bank`; `pairs` index rows of `masks` and carry
/// the consistency term. This is the per-scene quantity the training loop
/// averages over a batch.
pub fn loss_gradient(
    cfg: &TrainConfig,
    params: &AdapterParams,
    bank: &CategoryBank,
    features: &FeatureMap,
    masks: &BinaryMaskBatch,
    targets: &[usize],
    pairs: &MatchSet,
) -> Result<(LossReport, AdapterParams)> {
    let protos: Vec<&[f64]> = (0..bank.len()).map(|i| bank.prototype(i)).collect();
    let sg = scene_gradient(
        params,
        &protos,
        cfg.logit_scale,
        features,
        masks,
        targets,
        pairs,
        cfg.lambda_ce,
        cfg.lambda_cos,
    )?;
    let report = total_loss(sg.ce, sg.cos, cfg.lambda_ce, cfg.lambda_cos)?.with_pairs(sg.per_pair);
    Ok((report, sg.grads))
}

/// Loss and parameter gradient of one batch. Classification is against the
/// prototypes of `train_bank` (labels index into it).
fn batch_gradient(
    cfg: &TrainConfig,
    params: &AdapterParams,
    train_bank: &CategoryBank,
    scenes: &[SceneBatch],
    features: &[&Scene],
) -> Result<BatchGradient> {
    let protos: Vec<&[f64]> = (0..train_bank.len()).map(|i| train_bank.prototype(i)).collect();
    let n_ce: usize = scenes.iter().map(|s| s.masks.len()).sum();
    let n_pairs: usize = scenes.iter().map(|s| s.pairs.len()).sum();
    let mut grads = params.zeros_like();
    let mut ce_total = 0.0;
    let mut cos_total = 0.0;
    let mut per_pair = Vec::new();
    let mut n_matches = 0;

    for (sb, scene) in scenes.iter().zip(features) {
        n_matches += sb.n_matches;
        // both terms are means over the whole batch: weight each scene's
        // means by its share of masks and of pairs
        let ce_share = sb.masks.len() as f64 / n_ce as f64;
        let pair_share = if n_pairs == 0 {
            0.0
        } else {
            sb.pairs.len() as f64 / n_pairs as f64
        };
        let sg = scene_gradient(
            params,
            &protos,
            cfg.logit_scale,
            &scene.features,
            &sb.masks,
            &sb.targets,
            &sb.pairs,
            cfg.lambda_ce * ce_share,
            cfg.lambda_cos * pair_share,
        )?;
        ce_total += sg.ce * ce_share;
        cos_total += sg.cos * pair_share;
        per_pair.extend(sg.per_pair);
        grads.add_scaled(&sg.grads, 1.0);
    }

    let report = total_loss(ce_total, cos_total, cfg.lambda_ce, cfg.lambda_cos)?.with_pairs(per_pair);
    Ok(BatchGradient {
        grads,
        report,
        n_matches,
    })
}

/// Gradient step followed by decoupled weight decay on kernels.
fn apply_update(params: &mut AdapterParams, grads: &AdapterParams, lr: f64, weight_decay: f64) {
    if lr == 0.0 {
        return;
    }
    for (index, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        let decay = if AdapterParams::decays(index) {
            lr * weight_decay
        } else {
            0.0
        };
        for (x, d) in p.iter_mut().zip(g) {
            *x -= lr * d + decay * *x;
        }
    }
}

fn run_stage(
    cfg: &TrainConfig,
    world: &WorldConfig,
    bank: &CategoryBank,
    mut params: AdapterParams,
) -> Result<(AdapterParams, TrainLog)> {
    cfg.validate()?;
    if params.channels != bank.channels() {
        return Err(Error::Shape(format!(
            "adapter has {} channels, bank {}",
            params.channels,
            bank.channels()
        )));
    }
    let seen = bank.seen_indices();
    if seen.is_empty() {
        return Err(Error::InvalidArgument("no seen categories to train on".into()));
    }
    // training images only contain seen categories, labelled within the seen vocabulary
    let train_bank = bank.subset(&seen);
    let stream_base = match cfg.stage {
        TrainStage::Warmup => WARMUP_STREAM,
        TrainStage::Mixed => MIXED_STREAM,
    };
    let mut log = TrainLog::default();
    for step in 0..cfg.total_steps() {
        let lr = cfg.lr_at(step);
        let mut scenes = Vec::with_capacity(cfg.batch_scenes);
        for b in 0..cfg.batch_scenes {
            let index = stream_base + (step * cfg.batch_scenes + b) as u64;
            scenes.push((world.scene(&train_bank, cfg.seed, index)?, index));
        }
        let batches = scenes
            .iter()
            .map(|(s, index)| scene_batch(cfg, s, cfg.seed ^ PERTURB_SALT, *index))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Scene> = scenes.iter().map(|(s, _)| s).collect();
        // after an update, an overflow inside the forward pass is divergence too
        let bg = match batch_gradient(cfg, &params, &train_bank, &batches, &refs) {
            Err(Error::NonFinite { .. }) if step > 0 => return Err(Error::Diverged { step, loss: f64::NAN }),
            r => r?,
        };
        if !bg.report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: bg.report.total,
            });
        }
        apply_update(&mut params, &bg.grads, lr, cfg.weight_decay);
        if !params.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        log.steps.push(StepLog {
            step,
            lr,
            loss: bg.report,
            n_matches: bg.n_matches,
        });
    }
    Ok((params, log))
}

/// Trains on ground-truth masks of seen-category scenes with the
/// cross-entropy term only.
pub fn train_warmup(
    cfg: &TrainConfig,
    world: &WorldConfig,
    bank: &CategoryBank,
    params: AdapterParams,
) -> Result<(AdapterParams, TrainLog)> {
    if cfg.stage != TrainStage::Warmup {
        return Err(Error::Config("train_warmup needs stage = warmup".into()));
    }
    run_stage(cfg, world, bank, params)
}

/// Trains on ground-truth masks mixed with matched perturbed masks, adding
/// the consistency term on matched pairs.
pub fn train_mixed(
    cfg: &TrainConfig,
    world: &WorldConfig,
    bank: &CategoryBank,
    params: AdapterParams,
) -> Result<(AdapterParams, TrainLog)> {
    if cfg.stage != TrainStage::Mixed {
        return Err(Error::Config("train_mixed needs stage = mixed".into()));
    }
    run_stage(cfg, world, bank, params)
}
