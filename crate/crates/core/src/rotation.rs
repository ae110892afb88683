//! Axis-angle rotations and their derivatives.

use nalgebra::{Matrix3, Vector3};

const SMALL_ANGLE: f64 = 1e-8;

#[inline]
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map from an axis-angle vector to a rotation matrix.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta = axis_angle.norm();
    let k = skew(axis_angle);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Rotation and its three partial derivatives with respect to the axis-angle components.
pub fn rodrigues_with_jacobian(axis_angle: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let r = rodrigues(axis_angle);
    let theta2 = axis_angle.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut d = [Matrix3::zeros(); 3];
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        let k = skew(axis_angle);
        for (i, e) in basis.iter().enumerate() {
            let ei = skew(e);
            d[i] = ei + 0.5 * (ei * k + k * ei);
        }
        return (r, d);
    }
    // Gallego & Yezzi closed form: dR/dw_i = (w_i [w]x + [w x (I - R) e_i]x) R / |w|^2
    let k = skew(axis_angle);
    let i_minus_r = Matrix3::identity() - r;
    for (i, e) in basis.iter().enumerate() {
        let v = axis_angle.cross(&(i_minus_r * e));
        d[i] = (axis_angle[i] * k + skew(&v)) * r / theta2;
    }
    (r, d)
}

/// Clamps an axis-angle vector to magnitude at most `max_angle`.
pub fn clamp_axis_angle(w: &Vector3<f64>, max_angle: f64) -> Vector3<f64> {
    let n = w.norm();
    if n > max_angle {
        w * (max_angle / n)
    } else {
        *w
    }
}
