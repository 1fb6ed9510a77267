//! Mask classification accuracy and semantic-segmentation mIoU.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EnsembleConfig;
use super::ensemble::geometric_ensemble;
use super::inference::{semantic_inference, VOID_LABEL};
use super::train::predicted_masks;
use crate::adapter::{adapter_forward, AdapterParams};
use crate::error::{Error, Result};
use crate::extractors::{aggregate, classify, mask_crop_embed, mask_pool, EmbeddingBatch, ScoreMatrix};
use crate::masks::{downsample_masks, BinaryMaskBatch};
use crate::synthworld::{rng_stream, CategoryBank, Scene, WorldConfig, FEATURE_STRIDE};

const EVAL_STREAM: u64 = 3 << 48;
const PERTURB_STREAM: u64 = 4 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Pool,
    Crop,
    Adapter,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 3] = [ExtractorKind::Pool, ExtractorKind::Crop, ExtractorKind::Adapter];

    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Pool => "pool",
            ExtractorKind::Crop => "crop",
            ExtractorKind::Adapter => "adapter",
        }
    }
}

/// Which masks the semantic maps are assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentationMasks {
    Gt,
    Perturbed,
}

/// Source of the in-vocabulary probabilities fused by the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InVocabSource {
    Pool,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub perturb_iou_targets: Vec<f64>,
    pub perturb_seed: u64,
    pub logit_scale: f64,
    pub segmentation: SegmentationMasks,
    pub in_vocab: InVocabSource,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            perturb_iou_targets: vec![0.7, 0.8, 0.9],
            perturb_seed: 0,
            logit_scale: crate::extractors::DEFAULT_LOGIT_SCALE,
            segmentation: SegmentationMasks::Perturbed,
            in_vocab: InVocabSource::Pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor: ExtractorKind,
    pub ensemble: bool,
    pub miou: f64,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    /// `None` for a class that appears neither in the ground truth nor in
    /// the prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Accuracy on ground-truth masks.
    pub mask_acc: f64,
    /// Accuracy on perturbed masks, each judged against its source label.
    pub mask_acc_perturbed: f64,
    /// Mean cosine between a ground-truth embedding and those of its
    /// perturbed copies.
    pub mean_pair_cosine: f64,
    pub scenes: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// `count` evaluation scenes over the full vocabulary.
pub fn eval_scenes(world: &WorldConfig, bank: &CategoryBank, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| world.scene(bank, seed, EVAL_STREAM + i))
        .collect()
}

/// Embeds `masks` with the chosen extractor.
pub fn extract(
    kind: ExtractorKind,
    params: Option<&AdapterParams>,
    masks: &BinaryMaskBatch,
    scene: &Scene,
) -> Result<EmbeddingBatch> {
    match kind {
        ExtractorKind::Pool => mask_pool(&downsample_masks(masks, FEATURE_STRIDE)?, &scene.features),
        ExtractorKind::Crop => mask_crop_embed(masks, &scene.features, FEATURE_STRIDE),
        ExtractorKind::Adapter => {
            let params =
                params.ok_or_else(|| Error::InvalidArgument("the adapter extractor needs parameters".into()))?;
            let (acts, _) = adapter_forward(params, masks, &scene.features, false)?;
            aggregate(&acts, &scene.features)
        }
    }
}

fn one_hot(labels: &[usize], classes: usize) -> ScoreMatrix {
    let mut v = vec![0.0; labels.len() * classes];
    for (n, &l) in labels.iter().enumerate() {
        v[n * classes + l] = 1.0;
    }
    ScoreMatrix {
        rows: labels.len(),
        cols: classes,
        values: v,
    }
}

/// Statistics of one scene, merged in scene order.
struct SceneStats {
    confusion: Vec<u64>,
    gt_correct: usize,
    gt_total: usize,
    pert_correct: usize,
    pert_total: usize,
    cos_sum: f64,
    cos_count: usize,
}

fn count_correct(scores: &ScoreMatrix, labels: &[usize]) -> usize {
    scores.argmax().iter().zip(labels).filter(|(a, b)| a == b).count()
}

#[allow(clippy::too_many_arguments)]
fn eval_scene(
    index: usize,
    scene: &Scene,
    params: Option<&AdapterParams>,
    bank: &CategoryBank,
    kind: ExtractorKind,
    ensemble: Option<&EnsembleConfig>,
    settings: &EvalSettings,
) -> Result<SceneStats> {
    let l = bank.len();
    let gt = &scene.gt_masks;
    let mut rng = rng_stream(settings.perturb_seed, PERTURB_STREAM + index as u64);
    let (pert, source) = predicted_masks(gt, &settings.perturb_iou_targets, 1.0, &mut rng);
    let pert_labels: Vec<usize> = source.iter().map(|&s| scene.gt_labels[s]).collect();

    let e_gt = extract(kind, params, gt, scene)?;
    let y_gt = classify(&e_gt, bank, settings.logit_scale)?;
    let (e_pert, y_pert) = if pert.is_empty() {
        (None, ScoreMatrix::new(0, l, Vec::new())?)
    } else {
        let e = extract(kind, params, &pert, scene)?;
        let y = classify(&e, bank, settings.logit_scale)?;
        (Some(e), y)
    };

    let mut cos_sum = 0.0;
    if let Some(e) = &e_pert {
        for (j, &s) in source.iter().enumerate() {
            cos_sum += e_gt.row(s).iter().zip(e.row(j)).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    let (seg_masks, seg_scores, seg_labels) = match settings.segmentation {
        SegmentationMasks::Gt => (gt, y_gt.clone(), scene.gt_labels.clone()),
        SegmentationMasks::Perturbed => (&pert, y_pert.clone(), pert_labels.clone()),
    };
    let seg_scores = match ensemble {
        None => seg_scores,
        Some(cfg) => {
            let y_in = match settings.in_vocab {
                InVocabSource::OneHot => one_hot(&seg_labels, l),
                InVocabSource::Pool if seg_masks.is_empty() => ScoreMatrix::new(0, l, Vec::new())?,
                InVocabSource::Pool => classify(
                    &extract(ExtractorKind::Pool, None, seg_masks, scene)?,
                    bank,
                    settings.logit_scale,
                )?,
            };
            geometric_ensemble(&y_in, &seg_scores, cfg)?
        }
    };
    let pred_map = semantic_inference(seg_masks, &seg_scores)?;
    let mut confusion = vec![0u64; l * l];
    for (&g, &p) in scene.label_map.iter().zip(&pred_map) {
        if p != VOID_LABEL {
            confusion[g * l + p] += 1;
        }
    }

    Ok(SceneStats {
        confusion,
        gt_correct: count_correct(&y_gt, &scene.gt_labels),
        gt_total: gt.len(),
        pert_correct: count_correct(&y_pert, &pert_labels),
        pert_total: pert.len(),
        cos_sum,
        cos_count: pert.len(),
    })
}

/// Per-class IoU from a confusion matrix (`rows = ground truth`).
pub fn class_ious(confusion: &[u64], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let tp = confusion[c * classes + c];
            let gt: u64 = confusion[c * classes..(c + 1) * classes].iter().sum();
            let pred: u64 = (0..classes).map(|r| confusion[r * classes + c]).sum();
            let union = gt + pred - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

fn mean_over(ious: &[Option<f64>], present: &[bool], keep: impl Fn(usize) -> bool) -> (f64, usize) {
    let vals: Vec<f64> = ious
        .iter()
        .enumerate()
        .filter(|&(c, _)| present[c] && keep(c))
        .map(|(_, v)| v.unwrap_or(0.0))
        .collect();
    if vals.is_empty() {
        (0.0, 0)
    } else {
        (vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
    }
}

/// Evaluates one extractor, optionally fused with the in-vocabulary branch.
pub fn evaluate(
    scenes: &[Scene],
    params: Option<&AdapterParams>,
    bank: &CategoryBank,
    extractor: ExtractorKind,
    ensemble: Option<&EnsembleConfig>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one scene".into()));
    }
    if extractor == ExtractorKind::Adapter && params.is_none() {
        return Err(Error::InvalidArgument("the adapter extractor needs parameters".into()));
    }
    let l = bank.len();
    let stats = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| eval_scene(i, s, params, bank, extractor, ensemble, settings))
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![0u64; l * l];
    let (mut gc, mut gt, mut pc, mut pt, mut cs, mut cn) = (0, 0, 0, 0, 0.0, 0);
    for s in &stats {
        confusion.iter_mut().zip(&s.confusion).for_each(|(a, b)| *a += b);
        gc += s.gt_correct;
        gt += s.gt_total;
        pc += s.pert_correct;
        pt += s.pert_total;
        cs += s.cos_sum;
        cn += s.cos_count;
    }
    let ious = class_ious(&confusion, l);
    // a class counts as present when it has ground-truth pixels that were
    // not all voided
    let present: Vec<bool> = (0..l)
        .map(|c| confusion[c * l..(c + 1) * l].iter().sum::<u64>() > 0)
        .collect();
    let (miou, n_all) = mean_over(&ious, &present, |_| true);
    let (miou_seen, n_seen) = mean_over(&ious, &present, |c| bank.is_seen(c));
    let (miou_unseen, n_unseen) = mean_over(&ious, &present, |c| !bank.is_seen(c));
    debug_assert_eq!(n_all, n_seen + n_unseen);
    if n_all > 0 {
        let weighted = (miou_seen * n_seen as f64 + miou_unseen * n_unseen as f64) / n_all as f64;
        assert!(
            (weighted - miou).abs() <= 1e-12,
            "count-weighted mIoU identity violated"
        );
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        extractor,
        ensemble: ensemble.is_some(),
        miou,
        miou_seen,
        miou_unseen,
        per_class_iou: ious,
        mask_acc: ratio(gc, gt),
        mask_acc_perturbed: ratio(pc, pt),
        mean_pair_cosine: if cn == 0 { 0.0 } else { cs / cn as f64 },
        scenes: scenes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_pool_is_perfect() {
        let world = WorldConfig {
            noise_sigma: 0.0,
            ..WorldConfig::default()
        };
        let bank = world.make_bank().unwrap();
        let scenes = eval_scenes(&world, &bank, 1, 4).unwrap();
        let settings = EvalSettings {
            segmentation: SegmentationMasks::Gt,
            ..EvalSettings::default()
        };
        let r = evaluate(&scenes, None, &bank, ExtractorKind::Pool, None, &settings).unwrap();
        assert_eq!(r.mask_acc, 1.0);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn adapter_without_params_fails() {
        let world = WorldConfig::default();
        let bank = world.make_bank().unwrap();
        let scenes = eval_scenes(&world, &bank, 0, 1).unwrap();
        let r = evaluate(
            &scenes,
            None,
            &bank,
            ExtractorKind::Adapter,
            None,
            &EvalSettings::default(),
        );
        assert!(r.is_err());
        assert!(evaluate(&[], None, &bank, ExtractorKind::Pool, None, &EvalSettings::default()).is_err());
    }

    #[test]
    fn one_hot_ensemble_at_zero_weight_is_exact() {
        let world = WorldConfig::default();
        let bank = world.make_bank().unwrap();
        let scenes = eval_scenes(&world, &bank, 2, 2).unwrap();
        let settings = EvalSettings {
            segmentation: SegmentationMasks::Gt,
            in_vocab: InVocabSource::OneHot,
            ..EvalSettings::default()
        };
        let cfg = EnsembleConfig::new(0.0, 0.0, bank.seen_flags().to_vec()).unwrap();
        let r = evaluate(&scenes, None, &bank, ExtractorKind::Crop, Some(&cfg), &settings).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.per_class_iou.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn confusion_matches_pixel_loop() {
        let world = WorldConfig::default();
        let bank = world.make_bank().unwrap();
        let scenes = eval_scenes(&world, &bank, 3, 3).unwrap();
        let settings = EvalSettings::default();
        let l = bank.len();
        for (i, scene) in scenes.iter().enumerate() {
            let stats = eval_scene(i, scene, None, &bank, ExtractorKind::Crop, None, &settings).unwrap();
            let mut rng = rng_stream(settings.perturb_seed, PERTURB_STREAM + i as u64);
            let (pert, _) = predicted_masks(&scene.gt_masks, &settings.perturb_iou_targets, 1.0, &mut rng);
            let e = extract(ExtractorKind::Crop, None, &pert, scene).unwrap();
            let y = classify(&e, &bank, settings.logit_scale).unwrap();
            let mut want = vec![0u64; l * l];
            for yy in 0..scene.height {
                for xx in 0..scene.width {
                    let cover: Vec<usize> = (0..pert.len()).filter(|&n| pert.get(n).get(yy, xx)).collect();
                    if cover.is_empty() {
                        continue;
                    }
                    let mut best = (0, f64::NEG_INFINITY);
                    for c in 0..l {
                        let s: f64 = cover.iter().map(|&n| y.row(n)[c]).sum();
                        if s > best.1 {
                            best = (c, s);
                        }
                    }
                    want[scene.label_map[yy * scene.width + xx] * l + best.0] += 1;
                }
            }
            assert_eq!(stats.confusion, want);
        }
    }
}
