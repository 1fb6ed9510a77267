use super::config::EnsembleConfig;
use crate::error::{shape_err, Error, Result};
use crate::extractors::ScoreMatrix;

/// Per-class weighted geometric mean `y_in^(1−w)·y_out^w`, with `w = α` on
/// seen columns and `w = β` on unseen ones. Rows are renormalized to sum to
/// one, which leaves the argmax unchanged.
pub fn geometric_ensemble(y_in: &ScoreMatrix, y_out: &ScoreMatrix, cfg: &EnsembleConfig) -> Result<ScoreMatrix> {
    if y_in.rows != y_out.rows || y_in.cols != y_out.cols {
        return shape_err(format!(
            "ensemble inputs are {}x{} and {}x{}",
            y_in.rows, y_in.cols, y_out.rows, y_out.cols
        ));
    }
    if cfg.seen_flags.len() != y_in.cols {
        return shape_err(format!("{} seen flags for {} classes", cfg.seen_flags.len(), y_in.cols));
    }
    if y_in.values.iter().chain(&y_out.values).any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "ensemble inputs must be nonnegative probabilities".into(),
        ));
    }
    let mut values = Vec::with_capacity(y_in.values.len());
    for r in 0..y_in.rows {
        let start = values.len();
        for (c, (&a, &b)) in y_in.row(r).iter().zip(y_out.row(r)).enumerate() {
            let w = if cfg.seen_flags[c] { cfg.alpha } else { cfg.beta };
            values.push(weighted_geomean(a, b, w));
        }
        let row = &mut values[start..];
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    ScoreMatrix::new(y_in.rows, y_in.cols, values)
}

// 0^0 is taken as 1, so w = 0 returns y_in exactly and w = 1 returns y_out.
fn weighted_geomean(a: f64, b: f64, w: f64) -> f64 {
    let pa = if w == 1.0 { 1.0 } else { a.powf(1.0 - w) };
    let pb = if w == 0.0 { 1.0 } else { b.powf(w) };
    pa * pb
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: usize, cols: usize, v: &[f64]) -> ScoreMatrix {
        ScoreMatrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_row() {
        let y_in = probs(1, 3, &[0.5, 0.3, 0.2]);
        let y_out = probs(1, 3, &[0.1, 0.6, 0.3]);
        let cfg = EnsembleConfig::new(0.7, 0.9, vec![true, true, false]).unwrap();
        let out = geometric_ensemble(&y_in, &y_out, &cfg).unwrap();
        let raw = [
            0.5f64.powf(0.3) * 0.1f64.powf(0.7),
            0.3f64.powf(0.3) * 0.6f64.powf(0.7),
            0.2f64.powf(0.1) * 0.3f64.powf(0.9),
        ];
        let s: f64 = raw.iter().sum();
        for (o, r) in out.values.iter().zip(raw) {
            assert!((o - r / s).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints_reduce_to_inputs() {
        let y_in = probs(2, 2, &[0.8, 0.2, 0.0, 1.0]);
        let y_out = probs(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let zero = EnsembleConfig::new(0.0, 0.0, vec![true, false]).unwrap();
        assert_eq!(geometric_ensemble(&y_in, &y_out, &zero).unwrap().values, y_in.values);
        let one = EnsembleConfig::new(1.0, 1.0, vec![true, false]).unwrap();
        assert_eq!(geometric_ensemble(&y_in, &y_out, &one).unwrap().values, y_out.values);
    }

    #[test]
    fn rejects_negative_and_mismatched() {
        let cfg = EnsembleConfig::new(0.5, 0.5, vec![true, false]).unwrap();
        let ok = probs(1, 2, &[0.5, 0.5]);
        assert!(geometric_ensemble(&probs(1, 2, &[-0.1, 1.1]), &ok, &cfg).is_err());
        assert!(geometric_ensemble(&ok, &probs(1, 3, &[0.2; 3]), &cfg).is_err());
        assert!(EnsembleConfig::new(1.5, 0.5, vec![]).is_err());
    }
}
