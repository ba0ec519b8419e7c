//! Correspondence and registration metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{Point3, RigidTransform};

/// Default inlier radius β in meters.
pub const DEFAULT_BETA: f64 = 1.0;
/// Default rotation threshold for a successful registration, degrees.
pub const DEFAULT_RRE_THRESHOLD: f64 = 5.0;
/// Default translation threshold for a successful registration, meters.
pub const DEFAULT_RTE_THRESHOLD: f64 = 2.0;

fn is_inlier(gt: &RigidTransform, src: &Point3, dst: &Point3, beta: f64) -> bool {
    gt.apply_point(src).dist(dst) < beta
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("beta must be > 0, got {beta}")))
    }
}

/// Inlier precision of predicted centroid pairs `(source, target)`.
///
/// Returns `(fraction, defined)`; an empty prediction gives `(0.0, false)`.
pub fn inlier_precision(pairs: &[(Point3, Point3)], gt: &RigidTransform, beta: f64) -> Result<(f64, bool)> {
    check_beta(beta)?;
    if pairs.is_empty() {
        return Ok((0.0, false));
    }
    let hits = pairs.iter().filter(|(s, d)| is_inlier(gt, s, d, beta)).count();
    Ok((hits as f64 / pairs.len() as f64, true))
}

/// Inlier recall: fraction of ground-truth pairs that appear among the
/// predictions and pass the β test. `None` when there are no ground-truth pairs.
pub fn inlier_recall(
    predicted: &[(usize, usize)],
    truth: &[(usize, usize)],
    centroids_x: &[Point3],
    centroids_y: &[Point3],
    gt: &RigidTransform,
    beta: f64,
) -> Result<Option<f64>> {
    check_beta(beta)?;
    if truth.is_empty() {
        return Ok(None);
    }
    let mut recovered = 0;
    for &(i, j) in truth {
        let (Some(src), Some(dst)) = (centroids_x.get(i), centroids_y.get(j)) else {
            return Err(Error::validation(format!("ground-truth pair ({i}, {j}) out of range")));
        };
        if predicted.contains(&(i, j)) && is_inlier(gt, src, dst, beta) {
            recovered += 1;
        }
    }
    Ok(Some(recovered as f64 / truth.len() as f64))
}

/// Rotation and translation error of one registration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoseError {
    pub rre_deg: f64,
    pub rte_m: f64,
}

impl PoseError {
    pub fn between(estimate: &RigidTransform, gt: &RigidTransform) -> Result<Self> {
        Ok(PoseError {
            rre_deg: crate::geom::rre(estimate.rotation(), gt.rotation())?,
            rte_m: crate::geom::rte(estimate.translation(), gt.translation())?,
        })
    }

    pub fn success(&self, t_rre: f64, t_rte: f64) -> bool {
        self.rre_deg < t_rre && self.rte_m < t_rte
    }
}

/// Registration recall over evaluated pairs; `None` entries are skipped pairs
/// and excluded from the denominator. Returns `None` when every pair is skipped.
pub fn registration_recall(errors: &[Option<PoseError>], t_rre: f64, t_rte: f64) -> Option<f64> {
    let evaluated: Vec<&PoseError> = errors.iter().flatten().collect();
    if evaluated.is_empty() {
        return None;
    }
    let ok = evaluated.iter().filter(|e| e.success(t_rre, t_rte)).count();
    Some(ok as f64 / evaluated.len() as f64)
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    // sorted summation keeps the result independent of record order
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Median (average of the middle two for even lengths); `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn p(x: f64) -> Point3 {
        Point3::new(x, 0.0, 0.0)
    }

    #[test]
    fn precision_counts() {
        let id = RigidTransform::identity();
        let exact = [(p(0.0), p(0.0)), (p(5.0), p(5.0))];
        assert_eq!(inlier_precision(&exact, &id, 1.0).unwrap(), (1.0, true));
        let mixed = [(p(0.0), p(0.5)), (p(5.0), p(5.9)), (p(9.0), p(12.0))];
        assert_eq!(inlier_precision(&mixed, &id, 1.0).unwrap(), (2.0 / 3.0, true));
        assert_eq!(inlier_precision(&[], &id, 1.0).unwrap(), (0.0, false));
        assert!(inlier_precision(&exact, &id, 0.0).is_err());
    }

    #[test]
    fn precision_uses_gt_transform() {
        let gt = RigidTransform::from_translation(Vector3::new(10.0, 0.0, 0.0));
        let pairs = [(p(0.0), p(10.2)), (p(0.0), p(0.0))];
        assert_eq!(inlier_precision(&pairs, &gt, 1.0).unwrap(), (0.5, true));
    }

    #[test]
    fn recall_counts() {
        let id = RigidTransform::identity();
        let cx = [p(0.0), p(10.0), p(20.0)];
        let cy = [p(0.0), p(10.0), p(29.0)];
        let truth = [(0, 0), (1, 1), (2, 2)];
        assert_eq!(inlier_recall(&[(0, 0), (1, 1), (2, 2)], &truth[..2], &cx, &cy, &id, 1.0).unwrap(), Some(1.0));
        assert_eq!(inlier_recall(&[], &truth, &cx, &cy, &id, 1.0).unwrap(), Some(0.0));
        // (2, 2) is predicted but fails the β test
        assert_eq!(inlier_recall(&[(0, 0), (2, 2)], &truth, &cx, &cy, &id, 1.0).unwrap(), Some(1.0 / 3.0));
        assert_eq!(inlier_recall(&[(0, 0)], &[], &cx, &cy, &id, 1.0).unwrap(), None);
    }

    #[test]
    fn recall_rates() {
        let good = PoseError { rre_deg: 0.1, rte_m: 0.05 };
        let far = PoseError { rre_deg: 0.1, rte_m: 2.5 };
        assert_eq!(registration_recall(&[Some(good), Some(good)], 5.0, 2.0), Some(1.0));
        assert_eq!(registration_recall(&[Some(good), Some(far)], 5.0, 2.0), Some(0.5));
        assert_eq!(registration_recall(&[Some(good), None], 5.0, 2.0), Some(1.0));
        assert_eq!(registration_recall(&[None, None], 5.0, 2.0), None);
    }

    #[test]
    fn pose_error_values() {
        let gt = RigidTransform::identity();
        let est = RigidTransform::rot_z(10f64.to_radians()).compose(&RigidTransform::from_translation(Vector3::zeros()));
        let est = RigidTransform::new(*est.rotation(), Vector3::new(3.0, 4.0, 0.0)).unwrap();
        let e = PoseError::between(&est, &gt).unwrap();
        assert!((e.rre_deg - 10.0).abs() < 1e-12);
        assert_eq!(e.rte_m, 5.0);
    }

    #[test]
    fn summary_stats() {
        assert_eq!(mean_std(&[1.0, 3.0]), Some((2.0, 1.0)));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(mean_std(&[]), None);
    }
}
