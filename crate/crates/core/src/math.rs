//! Small linear-algebra helpers shared by projection, tracing and gradients.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation `exp([w]x)` for an axis-angle vector.
pub fn rotation_exp(w: &Vec3) -> Mat3 {
    Rotation3::new(*w).into_inner()
}

/// Orthonormal frame check: columns unit length and mutually orthogonal.
pub fn is_orthonormal(m: &Mat3, tol: f64) -> bool {
    let g = m.transpose() * m;
    (g - Mat3::identity()).abs().max() <= tol
}

pub fn to_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}
