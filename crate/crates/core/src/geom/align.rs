use nalgebra::Matrix3;

use super::{centroid, KdTree, Point3, PointCloud, RigidTransform};
use crate::error::{Error, Result};

/// Relative threshold on the second singular value of the cross-covariance
/// below which the problem is treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
///
/// Closed form via SVD of the centered cross-covariance. A reflection in the
/// solution is corrected by flipping the sign of the last singular direction.
pub fn kabsch_svd(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::validation(format!(
            "kabsch: {} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientCorrespondences(src.len()));
    }
    if let Some(index) = src.iter().chain(dst).position(|p| !p.is_finite()) {
        return Err(Error::NonFinitePoint {
            index: index % src.len(),
        });
    }
    let cs = centroid(src).expect("non-empty").to_vector();
    let cd = centroid(dst).expect("non-empty").to_vector();
    let mut h = Matrix3::zeros();
    let mut spread = 0.0f64;
    for (s, d) in src.iter().zip(dst) {
        let a = s.to_vector() - cs;
        let b = d.to_vector() - cd;
        h += a * b.transpose();
        spread = spread.max(a.norm_squared()).max(b.norm_squared());
    }
    let svd = h.svd(true, true);
    let raw = svd.singular_values;
    let mut sv = [raw[0], raw[1], raw[2]];
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= RANK_TOL * spread.max(f64::MIN_POSITIVE) || sv[1] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateConfiguration(format!(
            "cross-covariance rank < 2 (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let weakest = (0..3)
            .min_by(|&a, &b| raw[a].total_cmp(&raw[b]))
            .expect("three singular values");
        d[(weakest, weakest)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = cd - r * cs;
    Ok(RigidTransform::from_parts_unchecked(r, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the RMS changes by less than this (meters).
    pub convergence_eps: f64,
    /// Correspondences farther apart than this are dropped (meters).
    pub max_correspondence_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iters: 50,
            convergence_eps: 1e-6,
            max_correspondence_dist: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub converged: bool,
    pub iterations: usize,
    /// Truncated RMS residual before the first update and after every
    /// accepted update. Non-increasing.
    pub rms_history: Vec<f64>,
}

impl IcpResult {
    pub fn final_rms(&self) -> f64 {
        *self.rms_history.last().expect("history is never empty")
    }
}

struct Matches {
    src: Vec<Point3>,
    dst: Vec<Point3>,
    rms: f64,
}

/// Nearest neighbors under `t`, with each residual capped at `max_dist`.
///
/// The capped mean square is the quantity ICP provably never increases:
/// re-matching minimizes each capped term, and the SVD step minimizes the
/// sum over the current inliers while outliers stay at the cap.
fn match_points(
    src: &[Point3],
    dst: &[Point3],
    tree: &KdTree<'_>,
    t: &RigidTransform,
    max_dist: f64,
) -> Matches {
    let cap = max_dist * max_dist;
    let mut m = Matches {
        src: Vec::new(),
        dst: Vec::new(),
        rms: 0.0,
    };
    let mut total = 0.0;
    for p in src {
        let q = t.apply_point(p);
        let (j, d2) = tree.nearest(&q).expect("non-empty target");
        if d2 <= cap {
            m.src.push(*p);
            m.dst.push(dst[j]);
            total += d2;
        } else {
            total += cap;
        }
    }
    m.rms = (total / src.len() as f64).sqrt();
    m
}

/// Point-to-point ICP refinement starting from `init`.
///
/// Each iteration matches every source point to its nearest target point,
/// drops pairs beyond the correspondence cap, and re-solves the full
/// transform with [`kabsch_svd`]. The returned transform already includes
/// `init`. If `max_iters` elapse first, the best transform found is returned
/// with `converged = false`.
pub fn icp_refine(
    src: &PointCloud,
    dst: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::validation("icp requires non-empty clouds"));
    }
    if let Some(index) = src.first_non_finite().or_else(|| dst.first_non_finite()) {
        return Err(Error::NonFinitePoint { index });
    }
    if !(cfg.max_correspondence_dist > 0.0) {
        return Err(Error::validation("icp correspondence distance must be > 0"));
    }
    let tree = KdTree::new(&dst.points);
    let mut current = *init;
    let mut matches = match_points(&src.points, &dst.points, &tree, &current, cfg.max_correspondence_dist);
    let mut history = vec![matches.rms];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let candidate = match kabsch_svd(&matches.src, &matches.dst) {
            Ok(t) => t,
            Err(_) => break,
        };
        let next = match_points(&src.points, &dst.points, &tree, &candidate, cfg.max_correspondence_dist);
        if next.rms > matches.rms {
            // only reachable through rounding at the optimum
            converged = true;
            break;
        }
        let delta = matches.rms - next.rms;
        current = candidate;
        matches = next;
        history.push(matches.rms);
        if delta < cfg.convergence_eps {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        converged,
        iterations,
        rms_history: history,
    })
}

/// Plain RMS of index-paired residuals under `t`.
#[cfg(test)]
pub(crate) fn paired_rms(t: &RigidTransform, src: &[Point3], dst: &[Point3]) -> f64 {
    let total: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| t.apply_point(s).dist2(d))
        .sum();
    (total / src.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::geom::{rre, rte, tests::random_transform, transform_points};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::FRAC_PI_2;

    fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_give_identity() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
        ];
        let t = kabsch_svd(&pts, &pts).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
    }

    #[test]
    fn recovers_constructed_transform() {
        let truth = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let dst = transform_points(&truth, &src);
        let t = kabsch_svd(&src, &dst).unwrap();
        assert!((t.rotation() - truth.rotation()).abs().max() < 1e-12);
        assert!((t.translation() - truth.translation()).abs().max() < 1e-12);
    }

    #[test]
    fn planar_points_still_solve() {
        // rank-2 covariance is acceptable; the reflection guard fixes the sign
        let truth = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(0.3, 0.0, -1.0));
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
        ];
        let dst = transform_points(&truth, &src);
        let t = kabsch_svd(&src, &dst).unwrap();
        assert!((t.rotation() - truth.rotation()).abs().max() < 1e-9);
        assert!(t.rotation().determinant() > 0.0);
    }

    #[test]
    fn too_few_pairs() {
        let pts = vec![Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            kabsch_svd(&pts, &pts),
            Err(Error::InsufficientCorrespondences(2))
        ));
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            kabsch_svd(&pts, &pts),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    /// Residual sum of squares for a rotation vector + translation.
    fn cost(params: &[f64; 6], src: &[Point3], dst: &[Point3]) -> f64 {
        let axis = Vector3::new(params[0], params[1], params[2]);
        let angle = axis.norm();
        let t = Vector3::new(params[3], params[4], params[5]);
        let tr = if angle > 0.0 {
            RigidTransform::from_axis_angle(axis, angle, t)
        } else {
            RigidTransform::from_translation(t)
        };
        src.iter().zip(dst).map(|(s, d)| tr.apply_point(s).dist2(d)).sum()
    }

    /// Independent oracle: coordinate descent with shrinking steps on the
    /// 6-parameter least-squares cost.
    fn numeric_minimum(src: &[Point3], dst: &[Point3]) -> f64 {
        let mut p = [0.0f64; 6];
        let mut best = cost(&p, src, dst);
        let mut step = 0.5;
        while step > 1e-9 {
            let mut improved = false;
            for i in 0..6 {
                for s in [step, -step] {
                    let mut q = p;
                    q[i] += s;
                    let c = cost(&q, src, dst);
                    if c < best {
                        best = c;
                        p = q;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best
    }

    #[test]
    fn noisy_fit_matches_numeric_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let src = random_points(&mut rng, 100, 1.0);
        // modest rotation keeps the descent oracle in the right basin
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.4, Vector3::new(0.5, -0.2, 0.1));
        let dst: Vec<Point3> = transform_points(&truth, &src)
            .into_iter()
            .map(|p| p + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        let t = kabsch_svd(&src, &dst).unwrap();
        let rms = paired_rms(&t, &src, &dst);
        assert!(rms <= 0.02, "rms {rms}");
        let oracle = numeric_minimum(&src, &dst);
        let ours: f64 = rms * rms * src.len() as f64;
        assert!(ours <= oracle * (1.0 + 1e-6) + 1e-12, "svd {ours} vs descent {oracle}");
    }

    #[test]
    fn icp_identity_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = PointCloud::new(random_points(&mut rng, 200, 5.0));
        let res = icp_refine(&c, &c, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert_eq!(res.rms_history[0], 0.0);
        assert!((res.transform.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(res.transform.translation().norm() < 1e-12);
    }

    #[test]
    fn icp_recovers_small_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let src = PointCloud::new(random_points(&mut rng, 400, 5.0));
        let truth = random_transform(&mut rng);
        let dst = PointCloud::new(transform_points(&truth, &src.points));
        let perturb = RigidTransform::from_axis_angle(
            Vector3::new(0.3, -0.5, 1.0),
            2f64.to_radians(),
            Vector3::new(0.2, 0.0, 0.0),
        );
        let init = perturb.compose(&truth);
        let res = icp_refine(&src, &dst, &init, &IcpConfig::default()).unwrap();
        assert!(rre(res.transform.rotation(), truth.rotation()).unwrap() < 0.01);
        assert!(rte(res.transform.translation(), truth.translation()).unwrap() < 1e-3);
        for w in res.rms_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn icp_rejects_empty() {
        let c = PointCloud::new(vec![Point3::ORIGIN]);
        let e = PointCloud::default();
        assert!(icp_refine(&c, &e, &RigidTransform::identity(), &IcpConfig::default()).is_err());
        assert!(icp_refine(&e, &c, &RigidTransform::identity(), &IcpConfig::default()).is_err());
    }

    #[test]
    fn icp_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let src = PointCloud::new(random_points(&mut rng, 300, 5.0));
        let truth = RigidTransform::from_axis_angle(Vector3::z(), 0.3, Vector3::new(1.0, 0.5, 0.0));
        let dst = PointCloud::new(transform_points(&truth, &src.points));
        let cfg = IcpConfig {
            max_iters: 1,
            convergence_eps: 1e-12,
            ..IcpConfig::default()
        };
        let res = icp_refine(&src, &dst, &RigidTransform::identity(), &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 1);
    }
}
