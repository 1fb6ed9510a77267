use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ConvNeXt blocks between fusion and the predictor.
pub const NUM_BLOCKS: usize = 3;
pub const DW_KERNEL: usize = 7;
pub const PATCH_KERNEL: usize = 3;
/// Hidden width multiplier of the block MLP.
pub const EXPANSION: usize = 4;

/// Parameters of one ConvNeXt block acting on `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `C×7×7`
    pub dw_weight: Vec<f64>,
    pub dw_bias: Vec<f64>,
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    /// `4C×C`
    pub expand_weight: Vec<f64>,
    pub expand_bias: Vec<f64>,
    /// `C×4C`
    pub project_weight: Vec<f64>,
    pub project_bias: Vec<f64>,
}

/// All trainable tensors of the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub channels: usize,
    pub maps: usize,
    /// `C/2 × 1 × 3 × 3`
    pub patch1_weight: Vec<f64>,
    pub patch1_bias: Vec<f64>,
    /// `C × C/2 × 3 × 3`
    pub patch2_weight: Vec<f64>,
    pub patch2_bias: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    /// `K×C`
    pub predictor_weight: Vec<f64>,
    pub predictor_bias: Vec<f64>,
}

/// Name and shape of one parameter tensor, in checkpoint order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn spec(name: impl Into<String>, shape: &[usize]) -> TensorSpec {
    TensorSpec {
        name: name.into(),
        shape: shape.to_vec(),
    }
}

/// Declared tensor layout for `C` channels and `K` maps.
pub fn layout(channels: usize, maps: usize) -> Vec<TensorSpec> {
    let (c, half, hid, k) = (channels, channels / 2, EXPANSION * channels, maps);
    let mut out = vec![
        spec("patch1.weight", &[half, 1, PATCH_KERNEL, PATCH_KERNEL]),
        spec("patch1.bias", &[half]),
        spec("patch2.weight", &[c, half, PATCH_KERNEL, PATCH_KERNEL]),
        spec("patch2.bias", &[c]),
    ];
    for b in 0..NUM_BLOCKS {
        out.extend([
            spec(format!("block{b}.dw.weight"), &[c, DW_KERNEL, DW_KERNEL]),
            spec(format!("block{b}.dw.bias"), &[c]),
            spec(format!("block{b}.norm.scale"), &[c]),
            spec(format!("block{b}.norm.shift"), &[c]),
            spec(format!("block{b}.expand.weight"), &[hid, c]),
            spec(format!("block{b}.expand.bias"), &[hid]),
            spec(format!("block{b}.project.weight"), &[c, hid]),
            spec(format!("block{b}.project.bias"), &[c]),
        ]);
    }
    out.extend([spec("predictor.weight", &[k, c]), spec("predictor.bias", &[k])]);
    out
}

fn check_dims(channels: usize, maps: usize) -> Result<()> {
    if channels < 8 || channels % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "adapter channels must be even and at least 8, got {channels}"
        )));
    }
    if maps == 0 {
        return Err(Error::InvalidArgument("adapter needs at least one map".into()));
    }
    Ok(())
}

impl AdapterParams {
    /// All-zero parameters with the declared shapes (used for gradients).
    pub fn zeros(channels: usize, maps: usize) -> Result<Self> {
        check_dims(channels, maps)?;
        let tensors = layout(channels, maps).iter().map(|s| vec![0.0; s.numel()]).collect();
        Ok(Self::from_tensors(channels, maps, tensors))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.maps).expect("valid dims")
    }

    fn from_tensors(channels: usize, maps: usize, tensors: Vec<Vec<f64>>) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count matches layout");
        let patch1_weight = next();
        let patch1_bias = next();
        let patch2_weight = next();
        let patch2_bias = next();
        let blocks = (0..NUM_BLOCKS)
            .map(|_| BlockParams {
                dw_weight: next(),
                dw_bias: next(),
                norm_scale: next(),
                norm_shift: next(),
                expand_weight: next(),
                expand_bias: next(),
                project_weight: next(),
                project_bias: next(),
            })
            .collect();
        let predictor_weight = next();
        let predictor_bias = next();
        Self {
            channels,
            maps,
            patch1_weight,
            patch1_bias,
            patch2_weight,
            patch2_bias,
            blocks,
            predictor_weight,
            predictor_bias,
        }
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![
            &self.patch1_weight,
            &self.patch1_bias,
            &self.patch2_weight,
            &self.patch2_bias,
        ];
        for b in &self.blocks {
            out.extend([
                &b.dw_weight,
                &b.dw_bias,
                &b.norm_scale,
                &b.norm_shift,
                &b.expand_weight,
                &b.expand_bias,
                &b.project_weight,
                &b.project_bias,
            ]);
        }
        out.extend([&self.predictor_weight, &self.predictor_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![
            &mut self.patch1_weight,
            &mut self.patch1_bias,
            &mut self.patch2_weight,
            &mut self.patch2_bias,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.dw_weight,
                &mut b.dw_bias,
                &mut b.norm_scale,
                &mut b.norm_shift,
                &mut b.expand_weight,
                &mut b.expand_bias,
                &mut b.project_weight,
                &mut b.project_bias,
            ]);
        }
        out.extend([&mut self.predictor_weight, &mut self.predictor_bias]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenation of all tensors in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    /// Overwrites every tensor from a flat vector in checkpoint order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Whether the tensor at checkpoint position `index` is subject to weight decay.
    pub fn decays(index: usize) -> bool {
        // decay kernels only: skip biases and normalization affine terms
        let names = layout(8, 1);
        let name = &names[index].name;
        name.ends_with(".weight")
    }
}

/// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)` for
/// kernels; zero biases; unit normalization scale and zero shift.
pub fn init_params<R: Rng + ?Sized>(channels: usize, maps: usize, rng: &mut R) -> Result<AdapterParams> {
    check_dims(channels, maps)?;
    let specs = layout(channels, maps);
    let tensors = specs
        .iter()
        .map(|s| {
            let n = s.numel();
            if s.name.ends_with("norm.scale") {
                vec![1.0; n]
            } else if s.name.ends_with(".weight") {
                let fan_in: usize = s.shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            }
        })
        .collect();
    Ok(AdapterParams::from_tensors(channels, maps, tensors))
}

/// Training stage recorded in a checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Warmup,
    Mixed,
}

/// JSON header line of a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub channels: usize,
    pub maps: usize,
    pub seed: u64,
    pub stage: Stage,
    pub tensors: Vec<TensorSpec>,
}

const CHECKPOINT_FORMAT: &str = "mask-adapter-params/1";

/// Serializes to a JSON header line followed by little-endian `f64` data in
/// header order.
pub fn encode_checkpoint(params: &AdapterParams, seed: u64, stage: Stage) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        channels: params.channels,
        maps: params.maps,
        seed,
        stage,
        tensors: layout(params.channels, params.maps),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for t in params.tensors() {
        for v in t {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(AdapterParams, CheckpointHeader)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    check_dims(header.channels, header.maps)?;
    let expected = layout(header.channels, header.maps);
    if header.tensors != expected {
        return Err(bad("tensor table does not match the adapter layout".into()));
    }
    let payload = &bytes[nl + 1..];
    let total: usize = expected.iter().map(|s| s.numel()).sum();
    if payload.len() != 8 * total {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            8 * total
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = AdapterParams::zeros(header.channels, header.maps)?;
    params.assign_flat(&flat)?;
    Ok((params, header))
}

pub fn save_checkpoint(path: &Path, params: &AdapterParams, seed: u64, stage: Stage) -> Result<()> {
    fs::write(path, encode_checkpoint(params, seed, stage)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AdapterParams, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::rng_stream;

    #[test]
    fn init_is_deterministic() {
        let a = init_params(16, 16, &mut rng_stream(0, 0)).unwrap();
        let b = init_params(16, 16, &mut rng_stream(0, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_contracts() {
        let p = init_params(16, 1, &mut rng_stream(0, 0)).unwrap();
        assert_eq!(p.predictor_weight.len(), 16);
        assert_eq!(p.predictor_bias.len(), 1);
        let p = init_params(8, 16, &mut rng_stream(0, 0)).unwrap();
        assert_eq!(p.patch1_weight.len(), 4 * 9);
        assert_eq!(p.patch2_weight.len(), 8 * 4 * 9);
        assert_eq!(p.blocks.len(), 3);
        assert!(p.blocks.iter().all(|b| b.norm_scale.iter().all(|&s| s == 1.0)));
        assert!(p.blocks.iter().all(|b| b.expand_bias.iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_params(9, 4, &mut rng_stream(0, 0)).is_err());
        assert!(init_params(6, 4, &mut rng_stream(0, 0)).is_err());
        assert!(init_params(8, 0, &mut rng_stream(0, 0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_params(8, 2, &mut rng_stream(5, 0)).unwrap();
        let bytes = encode_checkpoint(&p, 5, Stage::Warmup).unwrap();
        let (q, header) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(header.stage, Stage::Warmup);
        assert_eq!(header.seed, 5);
        let a: Vec<u64> = p.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = q.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode_checkpoint(&q, 5, Stage::Warmup).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let p = init_params(8, 2, &mut rng_stream(5, 0)).unwrap();
        let bytes = encode_checkpoint(&p, 5, Stage::Init).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8], Path::new("mem")).is_err());
    }
}
