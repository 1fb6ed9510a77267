//! Classification cross-entropy, the mask-consistency cosine loss and their
//! weighted combination.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::extractors::{softmax, EmbeddingBatch, ScoreMatrix};
use crate::matching::MatchSet;

pub const DEFAULT_LAMBDA_CE: f64 = 2.0;
pub const DEFAULT_LAMBDA_COS: f64 = 5.0;

/// Mean cross-entropy over rows of `logits`. Returns the loss and its
/// gradient with respect to the logits, `(softmax − onehot)/N`.
pub fn ce_loss(logits: &ScoreMatrix, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    if logits.rows == 0 {
        return Err(Error::InvalidArgument("cross-entropy of an empty batch".into()));
    }
    if targets.len() != logits.rows {
        return shape_err(format!("{} targets for {} rows", targets.len(), logits.rows));
    }
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.values.len());
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {} classes",
                logits.cols
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let p = softmax(row);
        grad.extend(
            p.iter()
                .enumerate()
                .map(|(j, &pj)| (pj - if j == t { 1.0 } else { 0.0 }) / n),
        );
    }
    Ok((loss / n, grad))
}

/// Value and gradients of the consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineLoss {
    pub value: f64,
    /// `1 − cos` for each matched pair, in match order.
    pub per_pair: Vec<f64>,
    /// `rows×C`, same layout as the ground-truth embeddings.
    pub grad_gt: Vec<f64>,
    pub grad_pred: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of `1 − cos(e_gt[i], e_pred[j])` over matched pairs `(i, j)`.
///
/// Inputs are differentiated as plain vectors, so the gradients are exact
/// whether or not the rows are normalized. An empty match set gives zero
/// loss and zero gradients.
pub fn cos_consistency_loss(e_gt: &EmbeddingBatch, e_pred: &EmbeddingBatch, matches: &MatchSet) -> Result<CosineLoss> {
    if e_gt.channels() != e_pred.channels() {
        return shape_err("embedding widths differ");
    }
    let c = e_gt.channels();
    let mut grad_gt = vec![0.0; e_gt.rows() * c];
    let mut grad_pred = vec![0.0; e_pred.rows() * c];
    if matches.is_empty() {
        return Ok(CosineLoss {
            value: 0.0,
            per_pair: Vec::new(),
            grad_gt,
            grad_pred,
        });
    }
    let scale = 1.0 / matches.len() as f64;
    let mut per_pair = Vec::with_capacity(matches.len());
    for m in matches.pairs() {
        if m.gt >= e_gt.rows() || m.pred >= e_pred.rows() {
            return Err(Error::InvalidArgument(format!(
                "match ({}, {}) out of range",
                m.gt, m.pred
            )));
        }
        let a = e_gt.row(m.gt);
        let b = e_pred.row(m.pred);
        let na = dot(a, a).sqrt();
        let nb = dot(b, b).sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument("cosine of a zero embedding".into()));
        }
        let cos = dot(a, b) / (na * nb);
        per_pair.push(1.0 - cos);
        // d(1 − cos)/da = −(b/(|a||b|) − cos·a/|a|²)
        for ch in 0..c {
            grad_gt[m.gt * c + ch] -= scale * (b[ch] / (na * nb) - cos * a[ch] / (na * na));
            grad_pred[m.pred * c + ch] -= scale * (a[ch] / (na * nb) - cos * b[ch] / (nb * nb));
        }
    }
    let value = per_pair.iter().sum::<f64>() * scale;
    Ok(CosineLoss {
        value,
        per_pair,
        grad_gt,
        grad_pred,
    })
}

/// Weighted training objective and its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_term: f64,
    pub cos_term: f64,
    pub lambda_ce: f64,
    pub lambda_cos: f64,
    pub per_pair_cos: Vec<f64>,
}

/// `λ_ce·ce + λ_cos·cos`.
pub fn total_loss(ce: f64, cos: f64, lambda_ce: f64, lambda_cos: f64) -> Result<LossReport> {
    if !(lambda_ce >= 0.0 && lambda_cos >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be nonnegative, got {lambda_ce} and {lambda_cos}"
        )));
    }
    Ok(LossReport {
        total: lambda_ce * ce + lambda_cos * cos,
        ce_term: ce,
        cos_term: cos,
        lambda_ce,
        lambda_cos,
        per_pair_cos: Vec::new(),
    })
}

impl LossReport {
    pub fn with_pairs(mut self, per_pair: Vec<f64>) -> Self {
        self.per_pair_cos = per_pair;
        self
    }

    /// Appends `step,total,ce,cos` to a CSV file, writing a header first if
    /// the file is new.
    pub fn append_csv(&self, path: &Path, step: usize) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "step,total,ce,cos")?;
        }
        writeln!(f, "{step},{:?},{:?},{:?}", self.total, self.ce_term, self.cos_term)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{MatchPair, MatchSet};

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], tol: f64) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= tol * fd.abs().max(grad[i].abs()).max(1e-3),
                "component {i}: fd {fd} analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn ce_peaked_and_uniform() {
        let logits = ScoreMatrix::new(1, 3, vec![0.0, 1e4, 0.0]).unwrap();
        assert!(ce_loss(&logits, &[1]).unwrap().0 < 1e-3);
        let logits = ScoreMatrix::new(2, 5, vec![0.7; 10]).unwrap();
        let (l, _) = ce_loss(&logits, &[0, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_finite_differences() {
        let x = vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let targets = [2, 0];
        let (_, grad) = ce_loss(&ScoreMatrix::new(2, 3, x.clone()).unwrap(), &targets).unwrap();
        fd_check(
            |v| {
                ce_loss(&ScoreMatrix::new(2, 3, v.to_vec()).unwrap(), &targets)
                    .unwrap()
                    .0
            },
            &x,
            &grad,
            1e-6,
        );
        for row in grad.chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn ce_errors() {
        let empty = ScoreMatrix::new(0, 3, vec![]).unwrap();
        assert!(ce_loss(&empty, &[]).is_err());
        let logits = ScoreMatrix::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(ce_loss(&logits, &[3]).is_err());
    }

    fn pairs(p: &[(usize, usize)]) -> MatchSet {
        MatchSet::new(p.iter().map(|&(gt, pred)| MatchPair { gt, pred, iou: 1.0 }).collect())
    }

    #[test]
    fn cosine_reference_values() {
        let a = EmbeddingBatch::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], true).unwrap();
        let b = EmbeddingBatch::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0], true).unwrap();
        let l = cos_consistency_loss(&a, &b, &pairs(&[(0, 0)])).unwrap();
        assert_eq!(l.value, 0.0);
        let l = cos_consistency_loss(&a, &b, &pairs(&[(1, 1)])).unwrap();
        assert!((l.value - 1.0).abs() < 1e-15);
        let l = cos_consistency_loss(&a, &b, &pairs(&[(2, 2)])).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);
        let l = cos_consistency_loss(&a, &b, &MatchSet::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_gt.iter().chain(&l.grad_pred).all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_identity() {
        let r = total_loss(1.0, 0.2, DEFAULT_LAMBDA_CE, DEFAULT_LAMBDA_COS).unwrap();
        assert!((r.total - 3.0).abs() < 1e-12);
        assert_eq!(total_loss(1.5, 0.7, 2.0, 0.0).unwrap().total, 3.0);
        assert_eq!(total_loss(0.0, 0.0, 2.0, 5.0).unwrap().total, 0.0);
        assert!(total_loss(1.0, 1.0, -1.0, 0.0).is_err());
    }
}
