//! A synthetic world standing in for CLIP features and annotated images.
//!
//! Each category owns a unit-norm prototype vector (the "text embedding").
//! A scene partitions the image into Voronoi regions on the 4×4 block grid,
//! gives each region a distinct category, and emits a feature map whose
//! columns are the region prototype plus isotropic Gaussian noise.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::masks::{BinaryMask, BinaryMaskBatch};
use crate::pgm::GrayImage;

/// Spatial stride between image pixels and feature cells.
pub const FEATURE_STRIDE: usize = 4;

/// Deterministic RNG for a `(seed, stream)` pair. Distinct streams of the
/// same seed are independent.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Category prototypes playing the role of text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryBank {
    names: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    seen: Vec<bool>,
}

impl CategoryBank {
    pub fn new(names: Vec<String>, prototypes: Vec<Vec<f64>>, seen: Vec<bool>) -> Result<Self> {
        if names.len() != prototypes.len() || seen.len() != prototypes.len() {
            return shape_err("names, prototypes and seen flags differ in length");
        }
        let Some(first) = prototypes.first() else {
            return Err(Error::InvalidArgument("empty category bank".into()));
        };
        let c = first.len();
        for (i, p) in prototypes.iter().enumerate() {
            if p.len() != c {
                return shape_err(format!("prototype {i} has {} channels, expected {c}", p.len()));
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("prototype {i} has norm {norm}")));
            }
        }
        Ok(Self {
            names,
            prototypes,
            seen,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        &self.prototypes[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }

    pub fn is_seen(&self, i: usize) -> bool {
        self.seen[i]
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.seen[i]).collect()
    }

    /// Restricts the bank to `indices`, keeping their order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            prototypes: indices.iter().map(|&i| self.prototypes[i].clone()).collect(),
            seen: indices.iter().map(|&i| self.seen[i]).collect(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::new(raw.names, raw.prototypes, raw.seen)
    }
}

/// Samples `categories` isotropic unit prototypes in `channels` dimensions and
/// flags `round(categories · seen_fraction)` of them, chosen at random, as seen.
pub fn make_category_bank<R: Rng + ?Sized>(
    categories: usize,
    channels: usize,
    seen_fraction: f64,
    rng: &mut R,
) -> Result<CategoryBank> {
    if categories < 2 || channels < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 categories and 4 channels, got {categories} and {channels}"
        )));
    }
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "seen fraction {seen_fraction} outside (0, 1)"
        )));
    }
    let n_seen = (categories as f64 * seen_fraction).round() as usize;
    if n_seen == 0 || n_seen == categories {
        return Err(Error::InvalidArgument(format!(
            "{categories} categories at seen fraction {seen_fraction} leaves an empty split"
        )));
    }
    let prototypes = (0..categories)
        .map(|_| loop {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..categories).collect();
    order.shuffle(rng);
    let mut seen = vec![false; categories];
    for &i in &order[..n_seen] {
        seen[i] = true;
    }
    let names = (0..categories).map(|i| format!("category_{i:02}")).collect();
    CategoryBank::new(names, prototypes, seen)
}

/// A `C×h×w` feature grid stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return shape_err("feature map dimensions must be positive");
        }
        if data.len() != channels * height * width {
            return shape_err(format!(
                "feature data has {} values, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "feature map construction".into(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The `C`-vector at spatial cell `p = y·w + x`.
    pub fn column(&self, p: usize) -> Vec<f64> {
        let plane = self.plane();
        (0..self.channels).map(|c| self.data[c * plane + p]).collect()
    }

    pub fn save_raw(&self, data_path: &Path, json_path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(data_path, bytes)?;
        let shape = FeatureShape {
            c: self.channels,
            h: self.height,
            w: self.width,
        };
        fs::write(json_path, serde_json::to_string(&shape)?)?;
        Ok(())
    }

    pub fn load_raw(data_path: &Path, json_path: &Path) -> Result<Self> {
        let shape: FeatureShape = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        let bytes = fs::read(data_path)?;
        if bytes.len() != 4 * shape.c * shape.h * shape.w {
            return Err(Error::Format {
                path: data_path.to_path_buf(),
                reason: "feature payload does not match its shape sidecar".into(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(shape.c, shape.h, shape.w, data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureShape {
    c: usize,
    h: usize,
    w: usize,
}

/// One annotated synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Row-major category index per pixel.
    pub label_map: Vec<usize>,
    pub gt_masks: BinaryMaskBatch,
    pub gt_labels: Vec<usize>,
    pub features: FeatureMap,
}

impl Scene {
    /// Checks the partition and labelling invariants.
    pub fn validate(&self) -> Result<()> {
        let mut cover = vec![0u8; self.height * self.width];
        if self.gt_masks.len() != self.gt_labels.len() {
            return shape_err("one label per ground-truth mask");
        }
        for (m, &label) in self.gt_masks.iter().zip(&self.gt_labels) {
            for (p, &on) in m.data().iter().enumerate() {
                if on {
                    cover[p] += 1;
                    if self.label_map[p] != label {
                        return Err(Error::InvalidArgument(format!(
                            "pixel {p} labelled {} inside a mask of category {label}",
                            self.label_map[p]
                        )));
                    }
                }
            }
        }
        if cover.iter().any(|&c| c != 1) {
            return Err(Error::InvalidArgument(
                "ground-truth masks do not partition the image".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a scene of `regions` Voronoi cells, each a distinct random
/// category from `bank`.
///
/// Voronoi sites are distinct feature cells and every feature cell takes the
/// category of its nearest site (ties go to the lower site index), so region
/// boundaries are aligned with the 4×4 pixel blocks and each block's majority
/// label is its only label. Feature noise is drawn per cell, channel by channel.
pub fn generate_scene<R: Rng + ?Sized>(
    bank: &CategoryBank,
    height: usize,
    width: usize,
    regions: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Scene> {
    if height == 0 || width == 0 || height % FEATURE_STRIDE != 0 || width % FEATURE_STRIDE != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene size {height}x{width} must be a positive multiple of {FEATURE_STRIDE}"
        )));
    }
    if regions == 0 || regions > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "{regions} regions requested from {} categories",
            bank.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma}")));
    }
    let (fh, fw) = (height / FEATURE_STRIDE, width / FEATURE_STRIDE);
    if regions > fh * fw {
        return Err(Error::InvalidArgument(format!(
            "{regions} regions do not fit on a {fh}x{fw} grid"
        )));
    }
    let sites: Vec<(f64, f64)> = sample(rng, fh * fw, regions)
        .into_iter()
        .map(|i| ((i / fw) as f64, (i % fw) as f64))
        .collect();
    let categories: Vec<usize> = sample(rng, bank.len(), regions).into_vec();

    let cell_region: Vec<usize> = (0..fh * fw)
        .map(|p| {
            let (y, x) = ((p / fw) as f64, (p % fw) as f64);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (r, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y - sy).powi(2) + (x - sx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            best
        })
        .collect();

    let label_map: Vec<usize> = (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            categories[cell_region[(y / FEATURE_STRIDE) * fw + x / FEATURE_STRIDE]]
        })
        .collect();

    let mut masks = Vec::with_capacity(regions);
    let mut labels = Vec::with_capacity(regions);
    for &cat in &categories {
        let data: Vec<bool> = label_map.iter().map(|&l| l == cat).collect();
        masks.push(BinaryMask::new(height, width, data)?);
        labels.push(cat);
    }

    let c = bank.channels();
    let plane = fh * fw;
    let mut data = vec![0.0; c * plane];
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    for p in 0..plane {
        let proto = bank.prototype(categories[cell_region[p]]);
        for ch in 0..c {
            let eps = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data[ch * plane + p] = proto[ch] + eps;
        }
    }

    Ok(Scene {
        height,
        width,
        label_map,
        gt_masks: BinaryMaskBatch::new(height, width, masks)?,
        gt_labels: labels,
        features: FeatureMap::new(c, fh, fw, data)?,
    })
}

/// Stand-in for encoding a masked image crop: averages feature columns over
/// the tight bounding box of the crop mask, with every column outside the
/// mask replaced by zeros, then L2-normalizes.
///
/// A cell counts as inside when any of its pixels is covered: the crop keeps
/// image content, not mask weights.
pub fn toy_image_encoder(features: &FeatureMap, crop_mask: &[f64]) -> Result<Vec<f64>> {
    let (h, w) = (features.height, features.width);
    if crop_mask.len() != h * w {
        return shape_err(format!("crop mask has {} cells, features are {h}x{w}", crop_mask.len()));
    }
    let inside: Vec<usize> = (0..h * w).filter(|&p| crop_mask[p] > 0.0).collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask { index: 0 });
    }
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for &p in &inside {
        let (y, x) = (p / w, p % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let box_cells = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    let plane = h * w;
    let mut v = vec![0.0; features.channels];
    for &p in &inside {
        for (c, acc) in v.iter_mut().enumerate() {
            *acc += features.data[c * plane + p];
        }
    }
    for acc in &mut v {
        *acc /= box_cells;
    }
    crate::extractors::l2_normalize(&mut v)
        .ok_or_else(|| Error::InvalidArgument("crop encodes to a zero vector".into()))?;
    Ok(v)
}

/// Size and noise parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub categories: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seen_fraction: f64,
    pub noise_sigma: f64,
    pub regions: usize,
    pub bank_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            channels: 16,
            height: 64,
            width: 64,
            seen_fraction: 2.0 / 3.0,
            noise_sigma: 0.5,
            regions: 12,
            bank_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn make_bank(&self) -> Result<CategoryBank> {
        make_category_bank(
            self.categories,
            self.channels,
            self.seen_fraction,
            &mut rng_stream(self.bank_seed, 0),
        )
    }

    /// Scene `index` of the stream identified by `seed`. Scenes are drawn
    /// from `bank`, which may be a subset of the full vocabulary.
    pub fn scene(&self, bank: &CategoryBank, seed: u64, index: u64) -> Result<Scene> {
        let regions = self.regions.min(bank.len());
        generate_scene(
            bank,
            self.height,
            self.width,
            regions,
            self.noise_sigma,
            &mut rng_stream(seed, index),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    height: usize,
    width: usize,
    gt_labels: Vec<usize>,
}

/// Writes a scene (and the bank its labels index) into `dir`.
pub fn save_scene_dir(scene: &Scene, bank: &CategoryBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    scene
        .features
        .save_raw(&dir.join("features.f32"), &dir.join("features.json"))?;
    if bank.len() > 256 {
        return Err(Error::InvalidArgument("label maps hold at most 256 categories".into()));
    }
    let labels = scene.label_map.iter().map(|&l| l as u8).collect();
    GrayImage::new(scene.width, scene.height, labels)?.save(&dir.join("label_map.pgm"))?;
    scene
        .gt_masks
        .save_packed(&dir.join("masks.bits"), &dir.join("masks.json"))?;
    let meta = SceneMeta {
        height: scene.height,
        width: scene.width,
        gt_labels: scene.gt_labels.clone(),
    };
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
    bank.save_json(&dir.join("bank.json"))
}

pub fn load_scene_dir(dir: &Path) -> Result<(Scene, CategoryBank)> {
    let features = FeatureMap::load_raw(&dir.join("features.f32"), &dir.join("features.json"))?;
    let label_img = GrayImage::load(&dir.join("label_map.pgm"))?;
    let gt_masks = BinaryMaskBatch::load_packed(&dir.join("masks.bits"), &dir.join("masks.json"))?;
    let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
    let bank = CategoryBank::load_json(&dir.join("bank.json"))?;
    if label_img.width != meta.width || label_img.height != meta.height {
        return Err(Error::Format {
            path: dir.join("label_map.pgm"),
            reason: "label map size differs from scene metadata".into(),
        });
    }
    let scene = Scene {
        height: meta.height,
        width: meta.width,
        label_map: label_img.pixels.iter().map(|&l| l as usize).collect(),
        gt_masks,
        gt_labels: meta.gt_labels,
        features,
    };
    scene.validate()?;
    Ok((scene, bank))
}
