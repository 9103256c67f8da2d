//! Classification and segmentation evaluation: confusion counts, per-class
//! accuracy / recall / precision / IoU with frequency-weighted and
//! unweighted means, and the per-image improvement analysis.
//!
//! Convention used throughout: classes absent from both prediction and
//! ground truth (zero IoU denominator) are excluded from unweighted means
//! rather than scored as 0 or 1. An optional ignore id removes pixels from
//! counting entirely.

use crate::error::{IonError, Result};

/// Per-class TP/FP/FN/TN pixel (or sample) counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub k: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn zeros(k: usize) -> Self {
        ConfusionCounts { k, tp: vec![0; k], fp: vec![0; k], fn_: vec![0; k], tn: vec![0; k], total: 0 }
    }

    /// Adds another confusion of the same K, for accumulating over a set.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.k, other.k);
        for c in 0..self.k {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.tn[c] += other.tn[c];
        }
        self.total += other.total;
    }

    /// Ground-truth pixel proportion per class.
    pub fn gt_proportions(&self) -> Vec<f64> {
        let denom = self.total.max(1) as f64;
        (0..self.k).map(|c| (self.tp[c] + self.fn_[c]) as f64 / denom).collect()
    }
}

/// Exact confusion counts between same-shaped integer maps. Positions where
/// the ground truth equals `ignore` are skipped entirely.
pub fn confusion(pred: &[u32], gt: &[u32], k: usize, ignore: Option<u32>) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(IonError::ShapeMismatch {
            op: "confusion",
            detail: format!("pred has {} entries, gt has {}", pred.len(), gt.len()),
        });
    }
    let mut cc = ConfusionCounts::zeros(k);
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        if p as usize >= k || g as usize >= k {
            return Err(IonError::InvalidArg {
                op: "confusion",
                detail: format!("class id out of range for K={k}: pred {p}, gt {g}"),
            });
        }
        cc.total += 1;
        for c in 0..k as u32 {
            match (p == c, g == c) {
                (true, true) => cc.tp[c as usize] += 1,
                (true, false) => cc.fp[c as usize] += 1,
                (false, true) => cc.fn_[c as usize] += 1,
                (false, false) => cc.tn[c as usize] += 1,
            }
        }
    }
    Ok(cc)
}

/// Per-class IoU = TP / (TP + FP + FN); `None` when the denominator is zero
/// (class absent from both maps).
pub fn class_iou(cc: &ConfusionCounts) -> Vec<Option<f64>> {
    (0..cc.k)
        .map(|c| {
            let denom = cc.tp[c] + cc.fp[c] + cc.fn_[c];
            if denom == 0 {
                None
            } else {
                Some(cc.tp[c] as f64 / denom as f64)
            }
        })
        .collect()
}

/// Unweighted mean over classes present in prediction or ground truth.
pub fn mean_class_iou(cc: &ConfusionCounts) -> f64 {
    mean_defined(&class_iou(cc))
}

fn mean_defined(vals: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = vals.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Per-class accuracy (TP+TN)/total, or `None` when nothing was counted.
pub fn class_accuracy(cc: &ConfusionCounts) -> Vec<Option<f64>> {
    (0..cc.k)
        .map(|c| {
            if cc.total == 0 {
                None
            } else {
                Some((cc.tp[c] + cc.tn[c]) as f64 / cc.total as f64)
            }
        })
        .collect()
}

/// Per-class recall TP/(TP+FN); `None` when the class never occurs in the
/// ground truth.
pub fn class_recall(cc: &ConfusionCounts) -> Vec<Option<f64>> {
    (0..cc.k)
        .map(|c| {
            let denom = cc.tp[c] + cc.fn_[c];
            if denom == 0 {
                None
            } else {
                Some(cc.tp[c] as f64 / denom as f64)
            }
        })
        .collect()
}

/// Per-class precision TP/(TP+FP); `None` when the class is never predicted.
pub fn class_precision(cc: &ConfusionCounts) -> Vec<Option<f64>> {
    (0..cc.k)
        .map(|c| {
            let denom = cc.tp[c] + cc.fp[c];
            if denom == 0 {
                None
            } else {
                Some(cc.tp[c] as f64 / denom as f64)
            }
        })
        .collect()
}

/// Unweighted aggregates over defined classes: (accuracy, recall,
/// precision, iou).
pub fn aggregate_metrics(cc: &ConfusionCounts) -> (f64, f64, f64, f64) {
    (
        mean_defined(&class_accuracy(cc)),
        mean_defined(&class_recall(cc)),
        mean_defined(&class_precision(cc)),
        mean_defined(&class_iou(cc)),
    )
}

/// Weighted mean of per-class values; weights must sum to 1 within 1e-6.
pub fn weighted_mean_metric(values: &[f64], proportions: &[f64]) -> Result<f64> {
    if values.len() != proportions.len() {
        return Err(IonError::ShapeMismatch {
            op: "weighted_mean_metric",
            detail: format!("{} values vs {} proportions", values.len(), proportions.len()),
        });
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(IonError::InvalidArg {
            op: "weighted_mean_metric",
            detail: format!("proportions sum to {sum}, expected 1"),
        });
    }
    Ok(values.iter().zip(proportions).map(|(v, w)| v * w).sum())
}

/// Fraction of samples whose predicted class id equals the ground truth.
pub fn cls_accuracy(preds: &[u32], gts: &[u32]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(IonError::InvalidArg {
            op: "cls_accuracy",
            detail: format!("need equal non-empty inputs, got {} and {}", preds.len(), gts.len()),
        });
    }
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// One test image's baseline score and the change under a technique.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementPoint {
    pub image_id: String,
    pub baseline_iou: f64,
    pub delta: f64,
}

/// Ordinary least-squares line of delta against baseline plus the fraction
/// of points that improved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementFit {
    pub slope: f64,
    pub intercept: f64,
    pub fraction_improved: f64,
}

pub fn improvement_analysis(points: &[ImprovementPoint]) -> Result<ImprovementFit> {
    if points.len() < 2 {
        return Err(IonError::InvalidArg {
            op: "improvement_analysis",
            detail: format!("need at least 2 points, got {}", points.len()),
        });
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.baseline_iou).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.delta).sum::<f64>() / n;
    let var_x: f64 = points.iter().map(|p| (p.baseline_iou - mean_x).powi(2)).sum();
    if var_x == 0.0 {
        return Err(IonError::InvalidArg {
            op: "improvement_analysis",
            detail: "degenerate fit: all baselines identical".into(),
        });
    }
    let cov: f64 = points
        .iter()
        .map(|p| (p.baseline_iou - mean_x) * (p.delta - mean_y))
        .sum();
    let slope = cov / var_x;
    let intercept = mean_y - slope * mean_x;
    let fraction_improved = points.iter().filter(|p| p.delta > 0.0).count() as f64 / n;
    Ok(ImprovementFit { slope, intercept, fraction_improved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn confusion_hand_counts() {
        // identical maps: no FP/FN
        let cc = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, None).unwrap();
        assert_eq!(cc.fp, vec![0, 0, 0]);
        assert_eq!(cc.fn_, vec![0, 0, 0]);

        // pred all 0, gt all 1 on 4 pixels
        let cc = confusion(&[0; 4], &[1; 4], 2, None).unwrap();
        assert_eq!(cc.fn_[1], 4);
        assert_eq!(cc.fp[0], 4);
        assert_eq!(cc.tp, vec![0, 0]);

        assert!(confusion(&[0, 1], &[0], 2, None).is_err());
        assert!(confusion(&[5], &[0], 2, None).is_err());
    }

    #[test]
    fn counts_sum_invariant_holds_per_class() {
        let mut rng = crate::rng::rng_from(31, "conf", 0);
        for _ in 0..20 {
            let k = rng.gen_range(2..8usize);
            let n = 64;
            let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
            let gt: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
            let cc = confusion(&pred, &gt, k, None).unwrap();
            for c in 0..k {
                assert_eq!(cc.tp[c] + cc.fp[c] + cc.fn_[c] + cc.tn[c], cc.total);
            }
        }
    }

    /// Independent per-pixel brute-force recount used as the oracle.
    fn brute_force(pred: &[u32], gt: &[u32], k: usize, ignore: Option<u32>) -> (Vec<f64>, f64, Vec<f64>, Vec<f64>) {
        let mut ious = Vec::new();
        let mut recalls = Vec::new();
        let mut precisions = Vec::new();
        let mut defined_ious = Vec::new();
        for c in 0..k as u32 {
            let mut inter = 0u64;
            let mut pc = 0u64;
            let mut gc = 0u64;
            for (&p, &g) in pred.iter().zip(gt) {
                if Some(g) == ignore {
                    continue;
                }
                if p == c && g == c {
                    inter += 1;
                }
                if p == c {
                    pc += 1;
                }
                if g == c {
                    gc += 1;
                }
            }
            let union = pc + gc - inter;
            if union > 0 {
                let iou = inter as f64 / union as f64;
                ious.push(iou);
                defined_ious.push(iou);
            } else {
                ious.push(f64::NAN);
            }
            if gc > 0 {
                recalls.push(inter as f64 / gc as f64);
            }
            if pc > 0 {
                precisions.push(inter as f64 / pc as f64);
            }
        }
        let mean_iou = if defined_ious.is_empty() {
            0.0
        } else {
            defined_ious.iter().sum::<f64>() / defined_ious.len() as f64
        };
        (ious, mean_iou, recalls, precisions)
    }

    #[test]
    fn metrics_match_brute_force_oracle_on_100_random_maps() {
        let mut rng = crate::rng::rng_from(32, "oracle", 0);
        for trial in 0..120 {
            let k = rng.gen_range(2..=19usize);
            let h = rng.gen_range(2..=16usize);
            let w = rng.gen_range(2..=16usize);
            let ignore = if trial % 3 == 0 { Some(k as u32 - 1) } else { None };
            // bias the draw so some classes are absent
            let active = rng.gen_range(1..=k as u32);
            let pred: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..active.max(1))).collect();
            let gt: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..k as u32)).collect();

            let cc = confusion(&pred, &gt, k, ignore).unwrap();
            let (oracle_ious, oracle_mean, oracle_recalls, oracle_precisions) =
                brute_force(&pred, &gt, k, ignore);

            let got = class_iou(&cc);
            for c in 0..k {
                match got[c] {
                    Some(v) => assert!((v - oracle_ious[c]).abs() < 1e-9, "trial {trial} class {c}"),
                    None => assert!(oracle_ious[c].is_nan()),
                }
            }
            assert!((mean_class_iou(&cc) - oracle_mean).abs() < 1e-9);

            let recall_mean = oracle_recalls.iter().sum::<f64>() / oracle_recalls.len().max(1) as f64;
            let precision_mean =
                oracle_precisions.iter().sum::<f64>() / oracle_precisions.len().max(1) as f64;
            let (_, agg_rec, agg_prec, _) = aggregate_metrics(&cc);
            if !oracle_recalls.is_empty() {
                assert!((agg_rec - recall_mean).abs() < 1e-9);
            }
            if !oracle_precisions.is_empty() {
                assert!((agg_prec - precision_mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn metrics_invariant_to_pixel_permutation_and_relabelling() {
        let mut rng = crate::rng::rng_from(33, "perm", 0);
        let k = 5;
        let n = 100;
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
        let gt: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
        let base = mean_class_iou(&confusion(&pred, &gt, k, None).unwrap());

        // permute pixels
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let pred_p: Vec<u32> = order.iter().map(|&i| pred[i]).collect();
        let gt_p: Vec<u32> = order.iter().map(|&i| gt[i]).collect();
        assert_eq!(base, mean_class_iou(&confusion(&pred_p, &gt_p, k, None).unwrap()));

        // relabel classes with a permutation applied to both maps
        let relabel = [3u32, 0, 4, 1, 2];
        let pred_r: Vec<u32> = pred.iter().map(|&c| relabel[c as usize]).collect();
        let gt_r: Vec<u32> = gt.iter().map(|&c| relabel[c as usize]).collect();
        let relabelled = mean_class_iou(&confusion(&pred_r, &gt_r, k, None).unwrap());
        assert!((base - relabelled).abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_examples() {
        assert!((weighted_mean_metric(&[0.8, 0.4], &[0.5, 0.5]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(weighted_mean_metric(&[0.8, 0.4], &[1.0, 0.0]).unwrap(), 0.8);
        assert!((weighted_mean_metric(&[0.8, 0.4], &[0.75, 0.25]).unwrap() - 0.7).abs() < 1e-12);
        assert!(weighted_mean_metric(&[0.8], &[0.5, 0.5]).is_err());
        assert!(weighted_mean_metric(&[0.8, 0.4], &[0.7, 0.2]).is_err());
    }

    #[test]
    fn weighted_mean_with_uniform_weights_equals_unweighted() {
        let mut rng = crate::rng::rng_from(34, "wm", 0);
        let k = 4;
        let pred: Vec<u32> = (0..64).map(|_| rng.gen_range(0..k as u32)).collect();
        let gt: Vec<u32> = (0..64).map(|_| rng.gen_range(0..k as u32)).collect();
        let cc = confusion(&pred, &gt, k, None).unwrap();
        let ious: Vec<f64> = class_iou(&cc).iter().map(|v| v.unwrap()).collect();
        let uniform = vec![1.0 / k as f64; k];
        let wm = weighted_mean_metric(&ious, &uniform).unwrap();
        assert!((wm - mean_class_iou(&cc)).abs() < 1e-12);
    }

    #[test]
    fn cls_accuracy_examples() {
        assert_eq!(cls_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(cls_accuracy(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert_eq!(cls_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(cls_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn all_one_class_predictor_on_balanced_two_class_data() {
        let gt = [0u32, 1, 0, 1, 0, 1, 0, 1];
        let pred = [0u32; 8];
        let cc = confusion(&pred, &gt, 2, None).unwrap();
        assert_eq!(class_recall(&cc)[0], Some(1.0));
        assert_eq!(class_precision(&cc)[0], Some(0.5));
        assert_eq!(class_recall(&cc)[1], Some(0.0));
        assert_eq!(class_precision(&cc)[1], None);
    }

    #[test]
    fn improvement_fit_examples() {
        // points on y = -x + 1
        let pts: Vec<ImprovementPoint> = (0..5)
            .map(|i| {
                let x = i as f64 / 4.0;
                ImprovementPoint { image_id: format!("i{i}"), baseline_iou: x, delta: 1.0 - x }
            })
            .collect();
        let fit = improvement_analysis(&pts).unwrap();
        assert!((fit.slope - (-1.0)).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);

        // all deltas zero
        let pts: Vec<ImprovementPoint> = (0..4)
            .map(|i| ImprovementPoint {
                image_id: format!("i{i}"),
                baseline_iou: i as f64 * 0.2,
                delta: 0.0,
            })
            .collect();
        let fit = improvement_analysis(&pts).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.fraction_improved, 0.0);

        // two points
        let pts = vec![
            ImprovementPoint { image_id: "a".into(), baseline_iou: 0.0, delta: 0.0 },
            ImprovementPoint { image_id: "b".into(), baseline_iou: 1.0, delta: 1.0 },
        ];
        assert_eq!(improvement_analysis(&pts).unwrap().slope, 1.0);

        // degenerate x variance
        let pts = vec![
            ImprovementPoint { image_id: "a".into(), baseline_iou: 0.5, delta: 0.0 },
            ImprovementPoint { image_id: "b".into(), baseline_iou: 0.5, delta: 1.0 },
        ];
        assert!(improvement_analysis(&pts).is_err());
    }
}
