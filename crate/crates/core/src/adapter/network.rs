use rayon::prelude::*;

use super::layers::{
    channel_norm, channel_norm_backward, conv2d, conv2d_backward, depthwise_conv, depthwise_conv_backward,
    gelu_with_grad, pointwise, pointwise_backward, spatial_softmax, spatial_softmax_backward, ConvGeom,
};
use super::params::{AdapterParams, BlockParams, DW_KERNEL, EXPANSION, PATCH_KERNEL};
use crate::error::{shape_err, Error, Result};
use crate::extractors::ActivationStack;
use crate::masks::BinaryMaskBatch;
use crate::synthworld::{FeatureMap, FEATURE_STRIDE};

pub const NORM_EPS: f64 = 1e-6;

/// Cached activations of one ConvNeXt block.
#[derive(Debug, Clone)]
struct BlockTape {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    normed: Vec<f64>,
    /// GELU derivative at the expansion output
    hidden_grad: Vec<f64>,
    hidden: Vec<f64>,
}

/// Cached activations for one mask.
#[derive(Debug, Clone)]
struct MaskTape {
    patch1_grad: Vec<f64>,
    patch1: Vec<f64>,
    blocks: Vec<BlockTape>,
    trunk: Vec<f64>,
    probs: Vec<f64>,
}

/// Everything needed to replay the forward pass and run reverse mode.
#[derive(Debug, Clone)]
pub struct AdapterTape {
    params: AdapterParams,
    masks: BinaryMaskBatch,
    features: FeatureMap,
    per_mask: Vec<MaskTape>,
}

impl AdapterTape {
    pub fn params(&self) -> &AdapterParams {
        &self.params
    }

    pub fn masks(&self) -> &BinaryMaskBatch {
        &self.masks
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// Replays the forward pass from the recorded inputs.
    pub fn replay(&self) -> Result<ActivationStack> {
        adapter_forward(&self.params, &self.masks, &self.features, false).map(|(a, _)| a)
    }
}

/// Gradients returned by [`adapter_backward`].
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub params: AdapterParams,
    /// `C×h×w`, flowing through the fusion add only.
    pub features: Vec<f64>,
}

struct Dims {
    c: usize,
    half: usize,
    hid: usize,
    k: usize,
    img_h: usize,
    img_w: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn patch1(&self) -> ConvGeom {
        ConvGeom {
            in_h: self.img_h,
            in_w: self.img_w,
            kernel: PATCH_KERNEL,
            stride: 2,
            pad: 1,
        }
    }

    fn patch2(&self) -> ConvGeom {
        ConvGeom {
            in_h: self.img_h / 2,
            in_w: self.img_w / 2,
            kernel: PATCH_KERNEL,
            stride: 2,
            pad: 1,
        }
    }

    fn dw(&self) -> ConvGeom {
        ConvGeom {
            in_h: self.h,
            in_w: self.w,
            kernel: DW_KERNEL,
            stride: 1,
            pad: DW_KERNEL / 2,
        }
    }
}

fn dims(params: &AdapterParams, masks: &BinaryMaskBatch, features: &FeatureMap) -> Result<Dims> {
    if features.channels() != params.channels {
        return shape_err(format!(
            "features have {} channels, adapter expects {}",
            features.channels(),
            params.channels
        ));
    }
    if masks.height() != FEATURE_STRIDE * features.height() || masks.width() != FEATURE_STRIDE * features.width() {
        return shape_err(format!(
            "masks are {}x{}, expected {FEATURE_STRIDE}x the {}x{} feature grid",
            masks.height(),
            masks.width(),
            features.height(),
            features.width()
        ));
    }
    Ok(Dims {
        c: params.channels,
        half: params.channels / 2,
        hid: EXPANSION * params.channels,
        k: params.maps,
        img_h: masks.height(),
        img_w: masks.width(),
        h: features.height(),
        w: features.width(),
    })
}

fn finite(stage: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

fn block_forward(b: &BlockParams, x: Vec<f64>, d: &Dims, index: usize) -> Result<(Vec<f64>, BlockTape)> {
    let plane = d.plane();
    let mixed = depthwise_conv(&x, d.c, &b.dw_weight, &b.dw_bias, d.dw());
    let (normed, xhat, inv_std) = channel_norm(&mixed, d.c, plane, &b.norm_scale, &b.norm_shift, NORM_EPS);
    let hidden_pre = pointwise(&normed, d.c, &b.expand_weight, &b.expand_bias, d.hid, plane);
    let (hidden, hidden_grad): (Vec<f64>, Vec<f64>) = hidden_pre.iter().map(|&v| gelu_with_grad(v)).unzip();
    let proj = pointwise(&hidden, d.hid, &b.project_weight, &b.project_bias, d.c, plane);
    let out: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    finite(&format!("block {index}"), &out)?;
    Ok((
        out,
        BlockTape {
            input: x,
            xhat,
            inv_std,
            normed,
            hidden_grad,
            hidden,
        },
    ))
}

fn forward_one(p: &AdapterParams, mask: &[bool], features: &FeatureMap, d: &Dims) -> Result<MaskTape> {
    let input: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let patch1_pre = conv2d(&input, 1, &p.patch1_weight, &p.patch1_bias, d.half, d.patch1());
    let (patch1, patch1_grad): (Vec<f64>, Vec<f64>) = patch1_pre.iter().map(|&v| gelu_with_grad(v)).unzip();
    finite("mask patchify (first conv)", &patch1)?;
    let mask_feat = conv2d(&patch1, d.half, &p.patch2_weight, &p.patch2_bias, d.c, d.patch2());
    finite("mask patchify (second conv)", &mask_feat)?;

    let mut x: Vec<f64> = mask_feat.iter().zip(features.data()).map(|(a, b)| a + b).collect();
    finite("feature fusion", &x)?;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for (i, b) in p.blocks.iter().enumerate() {
        let (out, tape) = block_forward(b, x, d, i)?;
        blocks.push(tape);
        x = out;
    }
    let logits = pointwise(&x, d.c, &p.predictor_weight, &p.predictor_bias, d.k, d.plane());
    finite("predictor", &logits)?;
    let probs = spatial_softmax(&logits, d.plane());
    finite("spatial softmax", &probs)?;
    Ok(MaskTape {
        patch1_grad,
        patch1,
        blocks,
        trunk: x,
        probs,
    })
}

/// Runs the adapter on every mask independently.
///
/// Per mask: two stride-2 3×3 convs (GELU between) patchify the mask to the
/// feature grid, the result is added to the features, passed through the
/// ConvNeXt blocks and a 1×1 predictor, and each of the `K` output maps is
/// softmax-normalized over space.
pub fn adapter_forward(
    params: &AdapterParams,
    masks: &BinaryMaskBatch,
    features: &FeatureMap,
    want_tape: bool,
) -> Result<(ActivationStack, Option<AdapterTape>)> {
    let d = dims(params, masks, features)?;
    let per_mask: Vec<MaskTape> = masks
        .masks()
        .par_iter()
        .map(|m| forward_one(params, m.data(), features, &d))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(masks.len() * d.k * d.plane());
    for t in &per_mask {
        data.extend_from_slice(&t.probs);
    }
    let stack = ActivationStack::from_parts_unchecked(masks.len(), d.k, d.h, d.w, data);
    let tape = want_tape.then(|| AdapterTape {
        params: params.clone(),
        masks: masks.clone(),
        features: features.clone(),
        per_mask,
    });
    Ok((stack, tape))
}

fn backward_one(
    p: &AdapterParams,
    mask: &[bool],
    t: &MaskTape,
    d: &Dims,
    upstream: &[f64],
) -> (AdapterParams, Vec<f64>) {
    let plane = d.plane();
    let mut g = p.zeros_like();

    let d_logits = spatial_softmax_backward(&t.probs, plane, upstream);
    let mut dx = pointwise_backward(
        &t.trunk,
        d.c,
        &p.predictor_weight,
        d.k,
        plane,
        &d_logits,
        &mut g.predictor_weight,
        &mut g.predictor_bias,
    );

    for (bi, (b, bt)) in p.blocks.iter().zip(&t.blocks).enumerate().rev() {
        let gb = &mut g.blocks[bi];
        let d_hidden = pointwise_backward(
            &bt.hidden,
            d.hid,
            &b.project_weight,
            d.c,
            plane,
            &dx,
            &mut gb.project_weight,
            &mut gb.project_bias,
        );
        let d_pre: Vec<f64> = d_hidden.iter().zip(&bt.hidden_grad).map(|(g, dg)| g * dg).collect();
        let d_normed = pointwise_backward(
            &bt.normed,
            d.c,
            &b.expand_weight,
            d.hid,
            plane,
            &d_pre,
            &mut gb.expand_weight,
            &mut gb.expand_bias,
        );
        let d_mixed = channel_norm_backward(
            &bt.xhat,
            &bt.inv_std,
            d.c,
            plane,
            &b.norm_scale,
            &d_normed,
            &mut gb.norm_scale,
            &mut gb.norm_shift,
        );
        let d_in = depthwise_conv_backward(
            &bt.input,
            d.c,
            &b.dw_weight,
            d.dw(),
            &d_mixed,
            &mut gb.dw_weight,
            &mut gb.dw_bias,
        );
        // residual branch
        for (a, b) in dx.iter_mut().zip(&d_in) {
            *a += b;
        }
    }

    // dx is now the gradient of the fused input; it reaches the features
    // directly and the mask branch through the second patchify conv
    let d_features = dx.clone();
    let d_patch1 = conv2d_backward(
        &t.patch1,
        d.half,
        &p.patch2_weight,
        d.c,
        d.patch2(),
        &dx,
        &mut g.patch2_weight,
        &mut g.patch2_bias,
        true,
    )
    .expect("input gradient requested");
    let d_pre: Vec<f64> = d_patch1.iter().zip(&t.patch1_grad).map(|(g, dg)| g * dg).collect();
    let input: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    conv2d_backward(
        &input,
        1,
        &p.patch1_weight,
        d.half,
        d.patch1(),
        &d_pre,
        &mut g.patch1_weight,
        &mut g.patch1_bias,
        false,
    );
    (g, d_features)
}

/// Exact reverse-mode gradients of `⟨upstream, adapter_forward(...)⟩` with
/// respect to the parameters and the features.
pub fn adapter_backward(tape: &AdapterTape, upstream: &[f64]) -> Result<AdapterGrads> {
    let d = dims(&tape.params, &tape.masks, &tape.features)?;
    let per = d.k * d.plane();
    if upstream.len() != tape.per_mask.len() * per {
        return shape_err(format!(
            "upstream gradient has {} values, activation stack has {}",
            upstream.len(),
            tape.per_mask.len() * per
        ));
    }
    let partials: Vec<(AdapterParams, Vec<f64>)> = tape
        .per_mask
        .par_iter()
        .enumerate()
        .map(|(n, t)| {
            backward_one(
                &tape.params,
                tape.masks.get(n).data(),
                t,
                &d,
                &upstream[n * per..(n + 1) * per],
            )
        })
        .collect();
    // reduce in mask order so the result does not depend on scheduling
    let mut grads = tape.params.zeros_like();
    let mut d_features = vec![0.0; tape.features.data().len()];
    for (g, df) in &partials {
        grads.add_scaled(g, 1.0);
        for (a, b) in d_features.iter_mut().zip(df) {
            *a += b;
        }
    }
    Ok(AdapterGrads {
        params: grads,
        features: d_features,
    })
}
