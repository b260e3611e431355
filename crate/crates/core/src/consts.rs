//! Thresholds shared by the fast paths and the reference oracles.
//!
//! Both sides read these values from here so equivalence tests compare the
//! same arithmetic rather than tolerance-matched approximations.

/// Contributions with alpha below this are skipped; also the cutoff used to
/// size ellipses, ray-splat acceptance and BVH disks.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Upper clamp for per-pixel alpha in splatting.
pub const ALPHA_MAX: f64 = 0.99;
/// Blending stops once transmittance drops below this.
pub const T_STOP: f64 = 1e-4;
/// Added to the diagonal of every projected 2D covariance, in px^2.
pub const LOWPASS_PX2: f64 = 0.3;
/// Gaussians at camera depth <= this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Thin-axis scale relative to the larger tangent scale.
pub const THIN_EPS_REL: f64 = 1e-6;
/// Minimum ray parameter accepted for a ray-splat hit.
pub const RAY_T_MIN: f64 = 1e-4;
/// Reflection ray origins are pushed this far along the ray.
pub const RAY_ORIGIN_OFFSET: f64 = 1e-4;
pub const DEFAULT_TILE_SIZE: usize = 16;
