//! IoU-based matching of anchors or proposals to ground truth, and balanced sampling.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::BBox;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub labels: Vec<Label>,
    /// Ground-truth index for positives.
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl Assignment {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == Label::Positive).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == Label::Negative).collect()
    }
}

/// IoU ≥ `pos_iou` → positive, < `neg_iou` → negative, otherwise ignored.
/// With `claim_best`, each ground truth additionally makes its single
/// highest-IoU box positive (lowest index on ties, only if that IoU > 0).
pub fn assign_targets(boxes: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64, claim_best: bool) -> Result<Assignment> {
    ensure!(
        (0.0..=1.0).contains(&neg_iou) && (0.0..=1.0).contains(&pos_iou) && neg_iou <= pos_iou,
        "need 0 <= neg_iou <= pos_iou <= 1, got {} / {}",
        neg_iou,
        pos_iou
    );
    let n = boxes.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched = vec![None; n];
    let mut max_iou = vec![0.0; n];
    if gts.is_empty() {
        return Ok(Assignment { labels, matched, max_iou });
    }
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];
    for (i, b) in boxes.iter().enumerate() {
        let mut best = (-1.0, 0);
        for (j, g) in gts.iter().enumerate() {
            let iou = b.iou(g);
            if iou > best.0 {
                best = (iou, j);
            }
            if iou > best_for_gt[j].0 {
                best_for_gt[j] = (iou, i);
            }
        }
        max_iou[i] = best.0;
        if best.0 >= pos_iou {
            labels[i] = Label::Positive;
            matched[i] = Some(best.1);
        } else if best.0 >= neg_iou {
            labels[i] = Label::Ignore;
        }
    }
    if claim_best {
        for (j, &(iou, i)) in best_for_gt.iter().enumerate() {
            if iou > 0.0 && labels[i] != Label::Positive {
                labels[i] = Label::Positive;
                matched[i] = Some(j);
            }
        }
    }
    Ok(Assignment { labels, matched, max_iou })
}

/// Draws up to `num · pos_fraction` positives and fills the rest with
/// negatives. Returns `(positive indices, negative indices)`, each sorted.
pub fn sample<R: Rng>(a: &Assignment, num: usize, pos_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut pos = a.positives();
    let mut neg = a.negatives();
    let max_pos = (num as f64 * pos_fraction) as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(num - pos.len());
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_positive_disjoint_is_negative() {
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let b = [g[0], BBox::new(50.0, 50.0, 60.0, 60.0)];
        let a = assign_targets(&b, &g, 0.7, 0.3, true).unwrap();
        assert_eq!(a.labels, [Label::Positive, Label::Negative]);
        assert_eq!(a.matched[0], Some(0));
    }

    #[test]
    fn empty_ground_truth_gives_all_negatives() {
        let b = [BBox::new(0.0, 0.0, 1.0, 1.0); 3];
        let a = assign_targets(&b, &[], 0.7, 0.3, true).unwrap();
        assert!(a.labels.iter().all(|&l| l == Label::Negative));
    }

    #[test]
    fn best_box_is_claimed() {
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let b = [BBox::new(0.0, 0.0, 10.0, 20.0), BBox::new(0.0, 0.0, 10.0, 20.0)];
        let a = assign_targets(&b, &g, 0.7, 0.3, true).unwrap();
        assert_eq!(a.labels, [Label::Positive, Label::Ignore]);
    }
}
