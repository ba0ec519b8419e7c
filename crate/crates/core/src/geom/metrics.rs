use nalgebra::{Matrix3, Vector3};

use super::validate_rotation;
use crate::error::{Error, Result};

/// Intrinsic X-Y-Z Euler angles `(a, b, c)` in radians with
/// `r = Rx(a) · Ry(b) · Rz(c)`. At gimbal lock `c` is fixed to zero.
pub fn euler_xyz(r: &Matrix3<f64>) -> [f64; 3] {
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        [a, b, c]
    } else {
        [r[(2, 1)].atan2(r[(1, 1)]), b, 0.0]
    }
}

/// Relative rotation error in degrees: the sum of absolute intrinsic XYZ
/// Euler angles of `r_gᵀ · r`.
pub fn rre(r: &Matrix3<f64>, r_g: &Matrix3<f64>) -> Result<f64> {
    validate_rotation(r)?;
    validate_rotation(r_g)?;
    let rel = r_g.transpose() * r;
    Ok(euler_xyz(&rel).iter().map(|a| a.abs().to_degrees()).sum())
}

/// Relative translation error: `‖t_g − t‖₂` in meters.
pub fn rte(t: &Vector3<f64>, t_g: &Vector3<f64>) -> Result<f64> {
    if !t.iter().chain(t_g.iter()).all(|v| v.is_finite()) {
        return Err(Error::validation("non-finite translation"));
    }
    Ok((t_g - t).norm())
}
