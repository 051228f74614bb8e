//! Mean intersection-over-union for per-point part labels.

use super::GeomError;

/// Mean over parts `0..part_count` of `|pred_l ∩ gt_l| / |pred_l ∪ gt_l|`.
/// A part absent from both prediction and ground truth contributes IoU 1.
pub fn miou(pred: &[u32], gt: &[u32], part_count: u32) -> Result<f64, GeomError> {
    if pred.len() != gt.len() {
        return Err(GeomError::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if part_count == 0 {
        return Err(GeomError::LabelOutOfRange {
            label: 0,
            part_count,
        });
    }
    for &l in pred.iter().chain(gt.iter()) {
        if l >= part_count {
            return Err(GeomError::LabelOutOfRange {
                label: l,
                part_count,
            });
        }
    }

    let parts = part_count as usize;
    let mut intersection = vec![0usize; parts];
    let mut union = vec![0usize; parts];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            intersection[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }

    let mut acc = 0.0;
    for l in 0..parts {
        acc += if union[l] == 0 {
            1.0
        } else {
            intersection[l] as f64 / union[l] as f64
        };
    }
    Ok(acc / parts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_one() {
        let labels = vec![0, 1, 2, 1, 0, 2];
        assert_eq!(miou(&labels, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn hand_case_point_five_eight() {
        // part 0: |{0}| / |{0,1}| = 1/2; part 1: |{2,3}| / |{1,2,3}| = 2/3.
        let v = miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((v - 0.58333).abs() < 1e-5);
    }

    #[test]
    fn fully_disjoint_is_zero() {
        let v = miou(&[0, 0, 0], &[1, 1, 1], 2).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn absent_part_counts_as_one() {
        // Part 2 appears nowhere: IoU 1 by convention.
        let v = miou(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            miou(&[0, 1], &[0], 2),
            Err(GeomError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(matches!(
            miou(&[0, 5], &[0, 1], 2),
            Err(GeomError::LabelOutOfRange { .. })
        ));
    }
}
