//! Pairing ground-truth masks with predicted masks.
//!
//! [`iou_matcher`] keeps every pair above an IoU threshold (many-to-many);
//! [`hungarian_matcher`] is the one-to-one minimum-cost baseline with cost
//! `1 − IoU`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{iou_matrix, BinaryMaskBatch};

/// Default IoU threshold of the IoU-based matcher.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.7;

const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
}

/// A set of `(gt, pred, iou)` pairs in `(gt, pred)` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn new(mut pairs: Vec<MatchPair>) -> Self {
        pairs.sort_by_key(|p| (p.gt, p.pred));
        Self { pairs }
    }

    pub fn pairs(&self) -> &[MatchPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps only pairs satisfying `keep`.
    pub fn filter(&self, keep: impl Fn(&MatchPair) -> bool) -> Self {
        Self {
            pairs: self.pairs.iter().copied().filter(|p| keep(p)).collect(),
        }
    }

    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| 1.0 - p.iou).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gt_index,pred_index,iou\n");
        for p in &self.pairs {
            let _ = writeln!(out, "{},{},{:?}", p.gt, p.pred, p.iou);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("match CSV line {}: {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad());
            }
            pairs.push(MatchPair {
                gt: fields[0].parse().map_err(|_| bad())?,
                pred: fields[1].parse().map_err(|_| bad())?,
                iou: fields[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self::new(pairs))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// All pairs with `IoU(gt_i, pred_j) ≥ threshold`.
pub fn iou_matcher(gt: &BinaryMaskBatch, pred: &BinaryMaskBatch, threshold: f64) -> Result<MatchSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {threshold} outside (0, 1]"
        )));
    }
    let m = iou_matrix(gt, pred)?;
    let mut pairs = Vec::new();
    for i in 0..m.rows {
        for j in 0..m.cols {
            let iou = m.get(i, j);
            if iou >= threshold {
                pairs.push(MatchPair { gt: i, pred: j, iou });
            }
        }
    }
    Ok(MatchSet { pairs })
}

/// Minimum-cost one-to-one matching of size `min(N, M)` under `1 − IoU`.
///
/// Among optimal assignments the lexicographically smallest list of
/// `(gt, pred)` pairs is returned.
pub fn hungarian_matcher(gt: &BinaryMaskBatch, pred: &BinaryMaskBatch) -> Result<MatchSet> {
    let m = iou_matrix(gt, pred)?;
    let cost: Vec<f64> = m.values.iter().map(|v| 1.0 - v).collect();
    let assignment = min_cost_assignment(&cost, m.rows, m.cols);
    Ok(MatchSet::new(
        assignment
            .into_iter()
            .map(|(i, j)| MatchPair {
                gt: i,
                pred: j,
                iou: m.get(i, j),
            })
            .collect(),
    ))
}

/// Square assignment solved by shortest augmenting paths with potentials.
/// Returns the column of each row and the dual potentials `(u, v)`.
fn solve_square(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

fn optimal_cost(cost: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> f64 {
    let k = rows.len();
    if k == 0 {
        return 0.0;
    }
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| cost[r * n + c]))
        .collect();
    let (assign, _, _) = solve_square(&sub, k);
    assign.iter().enumerate().map(|(i, &j)| sub[i * k + j]).sum()
}

/// Minimum-cost assignment of an `rows×cols` cost matrix, of size
/// `min(rows, cols)`, as `(row, col)` pairs in row order.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let n = rows.max(cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // pad to square with zero-cost dummy rows or columns
    let mut square = vec![0.0; n * n];
    for i in 0..rows {
        square[i * n..i * n + cols].copy_from_slice(&cost[i * cols..(i + 1) * cols]);
    }
    let (_, u, v) = solve_square(&square, n);
    let best = optimal_cost(&square, n, &(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>());

    // Fix rows in order to the smallest column that still admits an optimal
    // completion. Any optimal assignment only uses edges that are tight
    // under an optimal dual, which prunes the candidates.
    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed_cost = 0.0;
    let mut out = Vec::new();
    for i in 0..n {
        free_rows.retain(|&r| r != i);
        let tight = |j: usize| (square[i * n + j] - u[i] - v[j]).abs() <= TIE_EPS * (1.0 + best.abs());
        let mut chosen = None;
        for &j in free_cols.iter().filter(|&&j| tight(j)) {
            let rest: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let total = fixed_cost + square[i * n + j] + optimal_cost(&square, n, &free_rows, &rest);
            if total <= best + TIE_EPS * (1.0 + best.abs()) {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        fixed_cost += square[i * n + j];
        free_cols.retain(|&c| c != j);
        if i < rows && j < cols {
            out.push((i, j));
        }
    }
    out
}
