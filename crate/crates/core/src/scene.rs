//! Gaussian primitives, cameras and scenes.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{is_orthonormal, rotation_exp, Mat3, Vec3};
use crate::sh::{ShCoeffs, MAX_SH_DEGREE};

const FRAME_TOL: f64 = 1e-9;
const DEGENERATE_CROSS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GaussianKind {
    Base,
    Reflective,
}

/// Kind-specific attributes. A base Gaussian carries SH color and its blend
/// weight; a reflective Gaussian carries an RGB reflection coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Appearance {
    Base { sh: ShCoeffs, blend_weight: f64 },
    Reflective { reflection: [f64; 3] },
}

/// An oriented elliptical disk with Gaussian falloff (a 2D Gaussian surfel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub position: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub appearance: Appearance,
}

impl GaussianPrimitive {
    pub fn kind(&self) -> GaussianKind {
        match self.appearance {
            Appearance::Base { .. } => GaussianKind::Base,
            Appearance::Reflective { .. } => GaussianKind::Reflective,
        }
    }

    pub fn sh(&self) -> Option<&ShCoeffs> {
        match &self.appearance {
            Appearance::Base { sh, .. } => Some(sh),
            Appearance::Reflective { .. } => None,
        }
    }

    pub fn blend_weight(&self) -> Option<f64> {
        match self.appearance {
            Appearance::Base { blend_weight, .. } => Some(blend_weight),
            Appearance::Reflective { .. } => None,
        }
    }

    pub fn reflection(&self) -> Option<[f64; 3]> {
        match self.appearance {
            Appearance::Reflective { reflection } => Some(reflection),
            Appearance::Base { .. } => None,
        }
    }

    /// Rotation whose columns are `[t_u, t_v, t_u x t_v]`.
    pub fn frame(&self) -> Result<Mat3> {
        let n = normal_of(self)?;
        Ok(Mat3::from_columns(&[self.tangent_u, self.tangent_v, n]))
    }

    pub fn max_scale(&self) -> f64 {
        self.scale_u.max(self.scale_v)
    }

    /// Applies a world-space rotation `exp([w]x)` to the tangent frame.
    pub fn rotate_frame(&mut self, w: &Vec3) {
        let r = rotation_exp(w);
        self.tangent_u = r * self.tangent_u;
        self.tangent_v = r * self.tangent_v;
    }

    /// Gram-Schmidt re-orthonormalization keeping `t_u`'s direction.
    pub fn orthonormalize(&mut self) {
        let u = self.tangent_u.normalize();
        let v = (self.tangent_v - u * u.dot(&self.tangent_v)).normalize();
        self.tangent_u = u;
        self.tangent_v = v;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScene(msg));
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("non-finite position".into());
        }
        let (nu, nv) = (self.tangent_u.norm(), self.tangent_v.norm());
        if (nu - 1.0).abs() > FRAME_TOL || (nv - 1.0).abs() > FRAME_TOL {
            return bad(format!("tangents not unit length ({nu}, {nv})"));
        }
        let dot = self.tangent_u.dot(&self.tangent_v);
        if dot.abs() > FRAME_TOL {
            return bad(format!("tangents not orthogonal (dot = {dot:e})"));
        }
        if !(self.scale_u > 0.0 && self.scale_v > 0.0) {
            return bad(format!(
                "non-positive scale ({}, {})",
                self.scale_u, self.scale_v
            ));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return bad(format!("opacity {} outside (0, 1]", self.opacity));
        }
        match &self.appearance {
            Appearance::Base { sh, blend_weight } => {
                sh.degree()?;
                if !(0.0..=1.0).contains(blend_weight) {
                    return bad(format!("blend weight {blend_weight} outside [0, 1]"));
                }
                if sh.coeffs.iter().flatten().any(|c| !c.is_finite()) {
                    return bad("non-finite SH coefficient".into());
                }
            }
            Appearance::Reflective { reflection } => {
                if reflection.iter().any(|c| !c.is_finite()) {
                    return bad("non-finite reflection coefficient".into());
                }
            }
        }
        Ok(())
    }
}

/// Unit normal `t_u x t_v` of a Gaussian's tangent frame.
pub fn normal_of(g: &GaussianPrimitive) -> Result<Vec3> {
    let n = g.tangent_u.cross(&g.tangent_v);
    let len = n.norm();
    if len < DEGENERATE_CROSS {
        return Err(Error::DegenerateFrame(len));
    }
    Ok(n / len)
}

/// Pinhole camera. `rotation` maps world directions into camera space, where
/// +z looks forward, +x points right and +y points down the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub center: Vec3,
    pub rotation: Mat3,
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    /// Camera at `eye` looking at `target`; principal point at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let cam = Self {
            center: eye,
            rotation,
            focal_x: focal,
            focal_y: focal,
            principal_x: width as f64 / 2.0,
            principal_y: height as f64 / 2.0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !is_orthonormal(&self.rotation, FRAME_TOL) || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidCamera(
                "rotation is not a proper orthonormal matrix".into(),
            ));
        }
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(Error::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.center)
    }

    /// World-space unit direction of the ray through pixel-space point `(x, y)`.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vec3 {
        let d = Vec3::new(
            (x - self.principal_x) / self.focal_x,
            (y - self.principal_y) / self.focal_y,
            1.0,
        );
        (self.rotation.transpose() * d).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A scene: base Gaussians (SH color, blend weight) and reflective Gaussians
/// (reflection coefficients), kept in separate lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub sh_degree: usize,
    pub base: Vec<GaussianPrimitive>,
    pub reflective: Vec<GaussianPrimitive>,
}

impl Scene {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            base: Vec::new(),
            reflective: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.reflective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gaussians(&self, kind: GaussianKind) -> &[GaussianPrimitive] {
        match kind {
            GaussianKind::Base => &self.base,
            GaussianKind::Reflective => &self.reflective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidScene(format!(
                "SH degree {} exceeds {MAX_SH_DEGREE}",
                self.sh_degree
            )));
        }
        for (kind, list) in [
            (GaussianKind::Base, &self.base),
            (GaussianKind::Reflective, &self.reflective),
        ] {
            for (i, g) in list.iter().enumerate() {
                if g.kind() != kind {
                    return Err(Error::InvalidScene(format!(
                        "{kind:?} list entry {i} has kind {:?}",
                        g.kind()
                    )));
                }
                g.validate()
                    .map_err(|e| Error::InvalidScene(format!("{kind:?}[{i}]: {e}")))?;
                if let Some(sh) = g.sh() {
                    if sh.degree()? != self.sh_degree {
                        return Err(Error::InvalidScene(format!(
                            "base[{i}] has SH degree {} but the scene declares {}",
                            sh.degree()?,
                            self.sh_degree
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hash of every parameter bit; used to detect stale forward caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sh_degree.hash(&mut h);
        for g in self.base.iter().chain(&self.reflective) {
            let mut put = |v: f64| v.to_bits().hash(&mut h);
            g.position.iter().for_each(|&v| put(v));
            g.tangent_u.iter().for_each(|&v| put(v));
            g.tangent_v.iter().for_each(|&v| put(v));
            put(g.scale_u);
            put(g.scale_v);
            put(g.opacity);
            match &g.appearance {
                Appearance::Base { sh, blend_weight } => {
                    sh.coeffs.iter().flatten().for_each(|&v| put(v));
                    put(*blend_weight);
                }
                Appearance::Reflective { reflection } => reflection.iter().for_each(|&v| put(v)),
            }
            g.kind().hash(&mut h);
        }
        self.base.len().hash(&mut h);
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_frame(u: Vec3, v: Vec3) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vec3::zeros(),
            tangent_u: u,
            tangent_v: v,
            scale_u: 1.0,
            scale_v: 1.0,
            opacity: 0.5,
            appearance: Appearance::Reflective {
                reflection: [0.0; 3],
            },
        }
    }

    #[test]
    fn canonical_and_swapped_frames() {
        assert_eq!(
            normal_of(&with_frame(Vec3::x(), Vec3::y())).unwrap(),
            Vec3::z()
        );
        assert_eq!(
            normal_of(&with_frame(Vec3::y(), Vec3::x())).unwrap(),
            -Vec3::z()
        );
    }

    #[test]
    fn degenerate_frame() {
        let g = with_frame(Vec3::x(), Vec3::x());
        assert!(matches!(normal_of(&g), Err(Error::DegenerateFrame(_))));
    }

    fn rotation_strategy() -> impl Strategy<Value = Mat3> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)
            .prop_map(|(a, b, c)| rotation_exp(&Vec3::new(a, b, c)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normal_is_unit_and_orthogonal(r in rotation_strategy()) {
            let g = with_frame(r.column(0).into(), r.column(1).into());
            let n = normal_of(&g).unwrap();
            prop_assert!((n.norm() - 1.0).abs() < 1e-12);
            prop_assert!(n.dot(&g.tangent_u).abs() < 1e-12);
            prop_assert!(n.dot(&g.tangent_v).abs() < 1e-12);
        }

        #[test]
        fn normal_commutes_with_rotation(frame in rotation_strategy(), rot in rotation_strategy()) {
            let g = with_frame(frame.column(0).into(), frame.column(1).into());
            let rotated = with_frame(rot * g.tangent_u, rot * g.tangent_v);
            let lhs = normal_of(&rotated).unwrap();
            let rhs = rot * normal_of(&g).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }
    }

    #[test]
    fn look_at_axes() {
        let cam = CameraView::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zeros(),
            -Vec3::y(),
            100.0,
            64,
            48,
        )
        .unwrap();
        let p = cam.world_to_camera(&Vec3::zeros());
        assert!((p - Vec3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
        let ray = cam.pixel_ray(32.0, 24.0);
        assert!((ray - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut g = with_frame(Vec3::x(), Vec3::y());
        g.validate().unwrap();
        g.opacity = 0.0;
        assert!(g.validate().is_err());
        let mut g = with_frame(Vec3::x(), Vec3::new(0.1, 1.0, 0.0).normalize());
        assert!(g.validate().is_err());
        g.orthonormalize();
        g.validate().unwrap();
    }

    #[test]
    fn kind_partition_is_strict() {
        let mut scene = Scene::empty(0);
        scene.base.push(with_frame(Vec3::x(), Vec3::y()));
        assert!(scene.validate().is_err());
    }
}
