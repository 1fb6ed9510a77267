//! Finite-difference checks of every hand-written reverse mode.

use mask_adapter::adapter::{adapter_backward, adapter_forward, init_params, AdapterParams};
use mask_adapter::masks::{BinaryMask, BinaryMaskBatch};
use mask_adapter::synthworld::{rng_stream, FeatureMap};
use rand::Rng;

const STEP: f64 = 1e-4;

fn random_instance(seed: u64, c: usize, k: usize) -> (AdapterParams, BinaryMaskBatch, FeatureMap, Vec<f64>) {
    let mut rng = rng_stream(seed, 7);
    let mut params = init_params(c, k, &mut rng).unwrap();
    // move normalization and biases off their trivial init so every path is exercised
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let (h, w) = (8, 8);
    let masks: Vec<BinaryMask> = (0..2)
        .map(|_| {
            let bits = (0..4 * h * 4 * w).map(|_| rng.random_bool(0.4)).collect();
            BinaryMask::new(4 * h, 4 * w, bits).unwrap()
        })
        .collect();
    let masks = BinaryMaskBatch::new(4 * h, 4 * w, masks).unwrap();
    let feats = FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let upstream = (0..2 * k * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    (params, masks, feats, upstream)
}

fn objective(params: &AdapterParams, masks: &BinaryMaskBatch, feats: &FeatureMap, upstream: &[f64]) -> f64 {
    let (acts, _) = adapter_forward(params, masks, feats, false).unwrap();
    // scale up so differences of probabilities over 64 cells are well resolved
    acts.data().iter().zip(upstream).map(|(a, g)| a * g).sum::<f64>()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[test]
fn adapter_parameter_and_feature_gradients_match_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let (params, masks, feats, upstream) = random_instance(seed, 8, 2);
        let (_, tape) = adapter_forward(&params, &masks, &feats, true).unwrap();
        let grads = adapter_backward(&tape.unwrap(), &upstream).unwrap();
        let flat = params.flatten();
        let analytic = grads.params.flatten();
        let mut probe = params.clone();
        // every 7th parameter keeps the test quick while touching all tensors
        for i in (0..flat.len()).step_by(7) {
            let mut plus = flat.clone();
            plus[i] += STEP;
            probe.assign_flat(&plus).unwrap();
            let fp = objective(&probe, &masks, &feats, &upstream);
            let mut minus = flat.clone();
            minus[i] -= STEP;
            probe.assign_flat(&minus).unwrap();
            let fm = objective(&probe, &masks, &feats, &upstream);
            let numeric = (fp - fm) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            worst = worst.max(e);
            assert!(
                e <= 1e-4,
                "seed {seed} param {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
        for i in (0..feats.data().len()).step_by(5) {
            let mut plus = feats.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = feats.clone();
            minus.data_mut()[i] -= STEP;
            let numeric = (objective(&params, &masks, &plus, &upstream)
                - objective(&params, &masks, &minus, &upstream))
                / (2.0 * STEP);
            let e = rel_err(grads.features[i], numeric);
            assert!(
                e <= 1e-4,
                "seed {seed} feature {i}: analytic {} numeric {numeric}",
                grads.features[i]
            );
        }
    }
    eprintln!("worst relative error {worst:e}");
}
