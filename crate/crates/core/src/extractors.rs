//! Mask embedding extraction: cropping, pooling and activation-map
//! aggregation, plus cosine classification against a category bank.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::masks::{downsample_masks, BinaryMaskBatch, SoftMaskBatch};
use crate::synthworld::{toy_image_encoder, CategoryBank, FeatureMap};

/// Default inverse temperature for cosine classification.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

const NORM_TOL: f64 = 1e-6;
const SLICE_SUM_TOL: f64 = 1e-4;

/// Normalizes `v` in place and returns its original norm, or `None` for a
/// zero or non-finite vector.
pub fn l2_normalize(v: &mut [f64]) -> Option<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Some(norm)
}

/// Gradient of `v ↦ v/‖v‖` applied to `upstream`, given the normalized
/// vector and the original norm.
pub fn normalize_backward(unit: &[f64], norm: f64, upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(upstream).map(|(u, g)| u * g).sum();
    unit.iter().zip(upstream).map(|(u, g)| (g - u * dot) / norm).collect()
}

/// `N` embeddings of dimension `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    channels: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(rows: usize, channels: usize, data: Vec<f64>, normalized: bool) -> Result<Self> {
        if data.len() != rows * channels {
            return shape_err(format!(
                "{} values for {rows} embeddings of width {channels}",
                data.len()
            ));
        }
        let batch = Self {
            rows,
            channels,
            data,
            normalized,
        };
        if normalized && !batch.rows_unit_norm() {
            return Err(Error::NotNormalized);
        }
        Ok(batch)
    }

    fn rows_unit_norm(&self) -> bool {
        (0..self.rows).all(|n| {
            let norm = self.row(n).iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm - 1.0).abs() <= NORM_TOL
        })
    }

    /// L2-normalizes every row; fails on a zero row.
    pub fn normalized(mut self) -> Result<Self> {
        let c = self.channels;
        for n in 0..self.rows {
            l2_normalize(&mut self.data[n * c..(n + 1) * c])
                .ok_or_else(|| Error::InvalidArgument(format!("embedding {n} is zero and cannot be normalized")))?;
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// CSV with one row per embedding, full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in 0..self.rows {
            let row: Vec<String> = self.row(n).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str, normalized: bool) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut channels = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", lineno + 1)))?;
            match channels {
                None => channels = Some(vals.len()),
                Some(c) if c != vals.len() => {
                    return shape_err(format!("line {} has {} columns, expected {c}", lineno + 1, vals.len()))
                }
                _ => {}
            }
            data.extend(vals);
            rows += 1;
        }
        Self::new(rows, channels.unwrap_or(0), data, normalized)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// `N×K` spatially normalized activation maps over an `h×w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    masks: usize,
    maps: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ActivationStack {
    /// Builds a stack, checking nonnegativity and unit slice sums.
    pub fn new(masks: usize, maps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if maps == 0 || height == 0 || width == 0 {
            return shape_err("activation stack dimensions must be positive");
        }
        if data.len() != masks * maps * height * width {
            return shape_err(format!(
                "{} values for a {masks}x{maps}x{height}x{width} stack",
                data.len()
            ));
        }
        let stack = Self {
            masks,
            maps,
            height,
            width,
            data,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub(crate) fn from_parts_unchecked(masks: usize, maps: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        Self {
            masks,
            maps,
            height,
            width,
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        for (s, slice) in self.data.chunks(plane).enumerate() {
            if slice.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidActivations(format!(
                    "slice ({}, {}) has a negative or NaN entry",
                    s / self.maps,
                    s % self.maps
                )));
            }
            let sum: f64 = slice.iter().sum();
            if (sum - 1.0).abs() > SLICE_SUM_TOL {
                return Err(Error::InvalidActivations(format!(
                    "slice ({}, {}) sums to {sum}",
                    s / self.maps,
                    s % self.maps
                )));
            }
        }
        Ok(())
    }

    pub fn masks(&self) -> usize {
        self.masks
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, n: usize, k: usize) -> &[f64] {
        let plane = self.height * self.width;
        let start = (n * self.maps + k) * plane;
        &self.data[start..start + plane]
    }

    /// All `K` maps of mask `n`, contiguous.
    pub fn mask_maps(&self, n: usize) -> &[f64] {
        let len = self.maps * self.height * self.width;
        &self.data[n * len..(n + 1) * len]
    }
}

/// Area-normalized pooled vectors before L2 normalization, `N×C` row-major.
pub fn mask_pool_vectors(masks: &SoftMaskBatch, features: &FeatureMap) -> Result<Vec<f64>> {
    if masks.height() != features.height() || masks.width() != features.width() {
        return shape_err(format!(
            "masks are {}x{}, features {}x{}",
            masks.height(),
            masks.width(),
            features.height(),
            features.width()
        ));
    }
    let c = features.channels();
    let plane = features.plane();
    let f = features.data();
    let mut out = Vec::with_capacity(masks.len() * c);
    for n in 0..masks.len() {
        let m = masks.row(n);
        let mass: f64 = m.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::EmptyMask { index: n });
        }
        for ch in 0..c {
            let col = &f[ch * plane..(ch + 1) * plane];
            let dot: f64 = m.iter().zip(col).map(|(a, b)| a * b).sum();
            out.push(dot / mass);
        }
    }
    Ok(out)
}

/// Mask pooling: the mass-weighted mean feature under each soft mask,
/// L2-normalized.
pub fn mask_pool(masks: &SoftMaskBatch, features: &FeatureMap) -> Result<EmbeddingBatch> {
    let data = mask_pool_vectors(masks, features)?;
    EmbeddingBatch::new(masks.len(), features.channels(), data, false)?.normalized()
}

/// Mask cropping: every mask is downsampled to feature resolution and passed
/// through [`toy_image_encoder`].
pub fn mask_crop_embed(masks: &BinaryMaskBatch, features: &FeatureMap, stride: usize) -> Result<EmbeddingBatch> {
    for (i, m) in masks.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyMask { index: i });
        }
    }
    let soft = downsample_masks(masks, stride)?;
    if soft.height() != features.height() || soft.width() != features.width() {
        return shape_err("downsampled masks do not match feature resolution");
    }
    let mut data = Vec::with_capacity(masks.len() * features.channels());
    for n in 0..soft.len() {
        data.extend(toy_image_encoder(features, soft.row(n))?);
    }
    EmbeddingBatch::new(masks.len(), features.channels(), data, true)
}

fn check_aggregate_shapes(acts: &ActivationStack, features: &FeatureMap) -> Result<()> {
    if acts.height != features.height() || acts.width != features.width() {
        return shape_err(format!(
            "activation maps are {}x{}, features {}x{}",
            acts.height,
            acts.width,
            features.height(),
            features.width()
        ));
    }
    Ok(())
}

/// `(1/K) Σ_k Ā_k · Fᵀ` per mask, before L2 normalization.
pub fn aggregate_vectors(acts: &ActivationStack, features: &FeatureMap) -> Result<Vec<f64>> {
    check_aggregate_shapes(acts, features)?;
    acts.validate()?;
    Ok(aggregate_unchecked(acts, features))
}

pub(crate) fn aggregate_unchecked(acts: &ActivationStack, features: &FeatureMap) -> Vec<f64> {
    let c = features.channels();
    let plane = features.plane();
    let f = features.data();
    let inv_k = 1.0 / acts.maps as f64;
    let mut out = vec![0.0; acts.masks * c];
    for n in 0..acts.masks {
        // sum the K maps first: Σ_k Ā_k·Fᵀ = (Σ_k Ā_k)·Fᵀ
        let mut weights = vec![0.0; plane];
        for k in 0..acts.maps {
            for (w, a) in weights.iter_mut().zip(acts.slice(n, k)) {
                *w += a;
            }
        }
        for ch in 0..c {
            let col = &f[ch * plane..(ch + 1) * plane];
            let dot: f64 = weights.iter().zip(col).map(|(a, b)| a * b).sum();
            out[n * c + ch] = dot * inv_k;
        }
    }
    out
}

/// Activation-map aggregation into L2-normalized embeddings.
pub fn aggregate(acts: &ActivationStack, features: &FeatureMap) -> Result<EmbeddingBatch> {
    let data = aggregate_vectors(acts, features)?;
    EmbeddingBatch::new(acts.masks, features.channels(), data, false)?.normalized()
}

/// Reverse mode of [`aggregate_vectors`]: given `∂L/∂v` (`N×C`), returns
/// `∂L/∂Ā` (stack layout) and `∂L/∂F` (`C×h×w`).
pub fn aggregate_backward(
    acts: &ActivationStack,
    features: &FeatureMap,
    grad_vectors: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aggregate_shapes(acts, features)?;
    let c = features.channels();
    if grad_vectors.len() != acts.masks * c {
        return shape_err("vector gradient does not match N x C");
    }
    let plane = features.plane();
    let f = features.data();
    let inv_k = 1.0 / acts.maps as f64;
    let mut d_acts = vec![0.0; acts.data.len()];
    let mut d_feat = vec![0.0; f.len()];
    for n in 0..acts.masks {
        let g = &grad_vectors[n * c..(n + 1) * c];
        // ∂v_c/∂Ā_k(p) = F(c,p)/K, identical for every k
        let mut dw = vec![0.0; plane];
        for (ch, &gc) in g.iter().enumerate() {
            let col = &f[ch * plane..(ch + 1) * plane];
            for (d, fv) in dw.iter_mut().zip(col) {
                *d += gc * fv * inv_k;
            }
        }
        let mut weights = vec![0.0; plane];
        for k in 0..acts.maps {
            let start = (n * acts.maps + k) * plane;
            d_acts[start..start + plane].copy_from_slice(&dw);
            for (w, a) in weights.iter_mut().zip(acts.slice(n, k)) {
                *w += a;
            }
        }
        for (ch, &gc) in g.iter().enumerate() {
            let dcol = &mut d_feat[ch * plane..(ch + 1) * plane];
            for (d, w) in dcol.iter_mut().zip(&weights) {
                *d += gc * w * inv_k;
            }
        }
    }
    Ok((d_acts, d_feat))
}

/// `N×L` row-major matrix, one row per mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return shape_err(format!("{} values for a {rows}x{cols} matrix", values.len()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.cols..(n + 1) * self.cols]
    }

    /// Column index of each row's maximum; ties go to the smaller index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows).map(|n| argmax(self.row(n))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scaled cosine logits of normalized embeddings against `prototypes` rows.
pub fn cosine_logits(embeds: &EmbeddingBatch, prototypes: &[&[f64]], logit_scale: f64) -> ScoreMatrix {
    let l = prototypes.len();
    let mut values = Vec::with_capacity(embeds.rows * l);
    for n in 0..embeds.rows {
        let e = embeds.row(n);
        for p in prototypes {
            values.push(logit_scale * e.iter().zip(p.iter()).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    ScoreMatrix {
        rows: embeds.rows,
        cols: l,
        values,
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities `softmax(scale · e · Pᵀ)` over every category in `bank`.
pub fn classify(embeds: &EmbeddingBatch, bank: &CategoryBank, logit_scale: f64) -> Result<ScoreMatrix> {
    if !embeds.normalized || !embeds.rows_unit_norm() {
        return Err(Error::NotNormalized);
    }
    if !(logit_scale >= 0.0 && logit_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("logit scale {logit_scale}")));
    }
    if embeds.channels != bank.channels() {
        return shape_err(format!(
            "embeddings have {} channels, prototypes {}",
            embeds.channels,
            bank.channels()
        ));
    }
    let protos: Vec<&[f64]> = (0..bank.len()).map(|i| bank.prototype(i)).collect();
    let logits = cosine_logits(embeds, &protos, logit_scale);
    let mut values = Vec::with_capacity(logits.values.len());
    for n in 0..logits.rows {
        values.extend(softmax(logits.row(n)));
    }
    Ok(ScoreMatrix {
        rows: logits.rows,
        cols: logits.cols,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::BinaryMask;

    fn features_2x2(cols: [[f64; 3]; 4]) -> FeatureMap {
        let mut data = vec![0.0; 12];
        for (p, col) in cols.iter().enumerate() {
            for c in 0..3 {
                data[c * 4 + p] = col[c];
            }
        }
        FeatureMap::new(3, 2, 2, data).unwrap()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pool_uniform_and_one_hot() {
        let v = [1.0, 2.0, 2.0];
        let f = features_2x2([v; 4]);
        let masks = SoftMaskBatch::new(2, 2, vec![0.3, 1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let e = mask_pool(&masks, &f).unwrap();
        assert!(close(e.row(0), &unit(&v), 1e-12));
        let cols = [[1.0, 0.0, 0.0], [0.0, 3.0, 4.0], [2.0, 2.0, 1.0], [0.0, 0.0, -1.0]];
        let f = features_2x2(cols);
        assert!(close(mask_pool(&masks, &f).unwrap().row(1), &unit(&cols[2]), 1e-12));
    }

    #[test]
    fn pool_two_column_average() {
        let (a, b) = ([1.0, 0.0, 2.0], [3.0, 2.0, 0.0]);
        let f = features_2x2([a, b, [9.0, 9.0, 9.0], [-5.0, 1.0, 1.0]]);
        let masks = SoftMaskBatch::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let e = mask_pool(&masks, &f).unwrap();
        // (a+b)/2 = (2, 1, 1)
        assert!(close(e.row(0), &unit(&[2.0, 1.0, 1.0]), 1e-12));
    }

    #[test]
    fn pool_reports_empty_mask_index() {
        let f = features_2x2([[1.0, 0.0, 0.0]; 4]);
        let masks = SoftMaskBatch::new(2, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(mask_pool(&masks, &f), Err(Error::EmptyMask { index: 1 })));
    }

    #[test]
    fn crop_full_image_equals_pool() {
        let f = features_2x2([[1.0, 0.0, 2.0], [3.0, 2.0, 0.0], [0.5, 0.1, 0.2], [-1.0, 1.0, 1.0]]);
        let masks = BinaryMaskBatch::new(8, 8, vec![BinaryMask::full(8, 8)]).unwrap();
        let crop = mask_crop_embed(&masks, &f, 4).unwrap();
        let pool = mask_pool(&downsample_masks(&masks, 4).unwrap(), &f).unwrap();
        assert!(close(crop.row(0), pool.row(0), 1e-12));
    }

    #[test]
    fn crop_single_cell() {
        let cols = [[1.0, 0.0, 2.0], [3.0, 2.0, 0.0], [0.5, 0.1, 0.2], [-1.0, 1.0, 1.0]];
        let f = features_2x2(cols);
        let masks = BinaryMaskBatch::new(8, 8, vec![BinaryMask::from_fn(8, 8, |y, x| y >= 4 && x >= 4)]).unwrap();
        let crop = mask_crop_embed(&masks, &f, 4).unwrap();
        assert!(close(crop.row(0), &unit(&cols[3]), 1e-12));
    }

    #[test]
    fn crop_l_shape_differs_from_pool() {
        // 4x4 features from 16x16 masks; L-shape partly covers cells
        let mut data = vec![0.0; 3 * 16];
        for p in 0..16 {
            data[p] = 1.0 + p as f64;
            data[16 + p] = (p as f64 * 0.7).sin();
            data[32 + p] = 0.5 - (p % 3) as f64;
        }
        let f = FeatureMap::new(3, 4, 4, data).unwrap();
        let mask = BinaryMask::from_fn(16, 16, |y, x| (y < 12 && x < 2) || (y >= 10 && y < 12 && x < 9));
        let masks = BinaryMaskBatch::new(16, 16, vec![mask]).unwrap();
        let crop = mask_crop_embed(&masks, &f, 4).unwrap();
        let soft = downsample_masks(&masks, 4).unwrap();
        let pool = mask_pool(&soft, &f).unwrap();

        // loop oracle: bounding box of covered cells, uncovered columns zero
        let m = soft.row(0);
        let mut sum = [0.0; 3];
        let mut cells = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let inside_box = y <= 2 && x <= 2;
                if inside_box {
                    cells += 1.0;
                    if m[y * 4 + x] > 0.0 {
                        for (c, s) in sum.iter_mut().enumerate() {
                            *s += f.get(c, y, x);
                        }
                    }
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / cells).collect();
        assert!(close(crop.row(0), &unit(&mean), 1e-12));
        assert!(!close(crop.row(0), pool.row(0), 1e-3));
    }

    #[test]
    fn aggregate_k1_reduces_to_pool() {
        let f = features_2x2([[1.0, 0.0, 2.0], [3.0, 2.0, 0.0], [0.5, 0.1, 0.2], [-1.0, 1.0, 1.0]]);
        let m = [0.25, 1.0, 0.0, 0.5];
        let mass: f64 = m.iter().sum();
        let soft = SoftMaskBatch::new(2, 2, m.to_vec()).unwrap();
        let acts = ActivationStack::new(1, 1, 2, 2, m.iter().map(|v| v / mass).collect()).unwrap();
        let a = aggregate_vectors(&acts, &f).unwrap();
        let p = mask_pool_vectors(&soft, &f).unwrap();
        assert!(close(&a, &p, 1e-12));
    }

    #[test]
    fn aggregate_identical_maps_match_single() {
        let f = features_2x2([[1.0, 0.0, 2.0], [3.0, 2.0, 0.0], [0.5, 0.1, 0.2], [-1.0, 1.0, 1.0]]);
        let map = [0.1, 0.2, 0.3, 0.4];
        let one = ActivationStack::new(1, 1, 2, 2, map.to_vec()).unwrap();
        let three = ActivationStack::new(1, 3, 2, 2, map.repeat(3)).unwrap();
        assert!(close(
            &aggregate_vectors(&one, &f).unwrap(),
            &aggregate_vectors(&three, &f).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn aggregate_k2_hand_computation() {
        // features: a=(1,0,2) b=(3,2,0) c=(0.5,0.1,0.2) d=(-1,1,1)
        let f = features_2x2([[1.0, 0.0, 2.0], [3.0, 2.0, 0.0], [0.5, 0.1, 0.2], [-1.0, 1.0, 1.0]]);
        let maps = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.25, 0.25, 0.5];
        let acts = ActivationStack::new(1, 2, 2, 2, maps).unwrap();
        let v = aggregate_vectors(&acts, &f).unwrap();
        // map1 -> 0.5a+0.5b = (2, 1, 1)
        // map2 -> 0.25b+0.25c+0.5d = (0.75+0.125-0.5, 0.5+0.025+0.5, 0+0.05+0.5) = (0.375, 1.025, 0.55)
        // mean -> (1.1875, 1.0125, 0.775)
        assert!(close(&v, &[1.1875, 1.0125, 0.775], 1e-12));
    }

    #[test]
    fn aggregate_rejects_bad_stack() {
        let f = features_2x2([[1.0, 0.0, 0.0]; 4]);
        let bad = ActivationStack::from_parts_unchecked(1, 1, 2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        assert!(aggregate(&bad, &f).is_err());
        let neg = ActivationStack::from_parts_unchecked(1, 1, 2, 2, vec![1.5, -0.5, 0.0, 0.0]);
        assert!(aggregate(&neg, &f).is_err());
        assert!(ActivationStack::new(1, 1, 2, 2, vec![1.5, -0.5, 0.0, 0.0]).is_err());
    }

    fn bank(protos: Vec<Vec<f64>>) -> CategoryBank {
        let n = protos.len();
        CategoryBank::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            protos,
            (0..n).map(|i| i % 2 == 0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn classify_contracts() {
        let b = bank(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let e = EmbeddingBatch::new(1, 4, vec![0.0, 1.0, 0.0, 0.0], true).unwrap();
        let p = classify(&e, &b, 1e4).unwrap();
        assert!(p.row(0)[1] >= 0.999);
        let p = classify(&e, &b, 0.0).unwrap();
        assert!(p.row(0).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        let b2 = bank(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e = EmbeddingBatch::new(1, 4, vec![s, s, 0.0, 0.0], true).unwrap();
        let p = classify(&e, &b2, 100.0).unwrap();
        assert!((p.row(0)[0] - 0.5).abs() < 1e-6 && (p.row(0)[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn classify_rejects_unnormalized() {
        let b = bank(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let e = EmbeddingBatch::new(1, 4, vec![2.0, 0.0, 0.0, 0.0], false).unwrap();
        assert!(matches!(classify(&e, &b, 100.0), Err(Error::NotNormalized)));
        assert!(EmbeddingBatch::new(1, 4, vec![2.0, 0.0, 0.0, 0.0], true).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let e = EmbeddingBatch::new(2, 3, vec![0.1, 1.0 / 3.0, -2.5e-17, 7.0, 1e300, -0.0], false).unwrap();
        let back = EmbeddingBatch::from_csv(&e.to_csv(), false).unwrap();
        assert_eq!(
            e.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let v = [0.3, -1.2, 0.7];
        let g = [0.5, 0.1, -0.4];
        let mut u = v.to_vec();
        let norm = l2_normalize(&mut u).unwrap();
        let analytic = normalize_backward(&u, norm, &g);
        let f = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().zip(&g).map(|(x, gi)| x / n * gi).sum::<f64>()
        };
        for i in 0..3 {
            let (mut p, mut m) = (v.to_vec(), v.to_vec());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }
}
