use crate::error::{shape_err, Error, Result};
use crate::extractors::ScoreMatrix;
use crate::masks::BinaryMaskBatch;

/// Label of pixels no mask covers. Never counted by the metrics.
pub const VOID_LABEL: usize = usize::MAX;

/// Per-pixel argmax of `Σ_n mask_n(pixel)·scores[n, c]`; uncovered pixels
/// get [`VOID_LABEL`]. Ties go to the smaller class index.
pub fn semantic_inference(masks: &BinaryMaskBatch, scores: &ScoreMatrix) -> Result<Vec<usize>> {
    if scores.rows != masks.len() {
        return shape_err(format!("{} score rows for {} masks", scores.rows, masks.len()));
    }
    if scores.values.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument("class scores must be nonnegative".into()));
    }
    let plane = masks.height() * masks.width();
    let l = scores.cols;
    let mut acc = vec![0.0; plane * l];
    let mut covered = vec![false; plane];
    for (n, m) in masks.iter().enumerate() {
        let row = scores.row(n);
        for (p, _) in m.data().iter().enumerate().filter(|(_, &on)| on) {
            covered[p] = true;
            for (a, s) in acc[p * l..(p + 1) * l].iter_mut().zip(row) {
                *a += s;
            }
        }
    }
    Ok((0..plane)
        .map(|p| {
            if covered[p] && l > 0 {
                crate::extractors::argmax(&acc[p * l..(p + 1) * l])
            } else {
                VOID_LABEL
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::BinaryMask;

    #[test]
    fn full_mask_is_constant() {
        let masks = BinaryMaskBatch::new(4, 4, vec![BinaryMask::full(4, 4)]).unwrap();
        let mut s = vec![0.1; 5];
        s[3] = 0.6;
        let map = semantic_inference(&masks, &ScoreMatrix::new(1, 5, s).unwrap()).unwrap();
        assert!(map.iter().all(|&c| c == 3));
    }

    #[test]
    fn disjoint_masks_and_void() {
        let masks = BinaryMaskBatch::new(
            4,
            4,
            vec![
                BinaryMask::from_fn(4, 4, |y, _| y == 0),
                BinaryMask::from_fn(4, 4, |y, _| y == 1),
            ],
        )
        .unwrap();
        let scores = ScoreMatrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let map = semantic_inference(&masks, &scores).unwrap();
        assert_eq!(&map[0..4], &[0; 4]);
        assert_eq!(&map[4..8], &[1; 4]);
        assert!(map[8..].iter().all(|&c| c == VOID_LABEL));
    }

    #[test]
    fn ties_go_to_smaller_class() {
        let masks = BinaryMaskBatch::new(2, 2, vec![BinaryMask::full(2, 2)]).unwrap();
        let map = semantic_inference(&masks, &ScoreMatrix::new(1, 3, vec![0.2, 0.4, 0.4]).unwrap()).unwrap();
        assert!(map.iter().all(|&c| c == 1));
    }
}
