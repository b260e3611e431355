//! Deterministic test scenes: random clouds and a planar mirror with a probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::{rotation_exp, Mat3, Vec3};
use crate::scene::{Appearance, CameraView, GaussianPrimitive, Scene};
use crate::sh::{coeff_count, ShCoeffs, SH_C0};

/// Axis-aligned box that generated positions stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Knobs for `gen_random_with`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneConfig {
    pub sh_degree: usize,
    /// Tangent scales as a fraction of the bounds diagonal.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    /// Magnitude of the non-constant SH bands.
    pub sh_detail: f64,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            sh_degree: 1,
            scale_range: (0.03, 0.12),
            opacity_range: (0.2, 0.9),
            sh_detail: 0.1,
        }
    }
}

fn random_frame(rng: &mut ChaCha8Rng) -> Mat3 {
    let w = Vec3::new(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    rotation_exp(&w)
}

fn frame_gaussian(
    position: Vec3,
    frame: &Mat3,
    su: f64,
    sv: f64,
    opacity: f64,
    appearance: Appearance,
) -> GaussianPrimitive {
    let mut g = GaussianPrimitive {
        position,
        tangent_u: frame.column(0).into(),
        tangent_v: frame.column(1).into(),
        scale_u: su,
        scale_v: sv,
        opacity,
        appearance,
    };
    g.orthonormalize();
    g
}

/// SH coefficients whose constant band reproduces `rgb` (before the offset).
pub fn sh_for_color(degree: usize, rgb: [f64; 3]) -> ShCoeffs {
    let mut sh = ShCoeffs::zeros(degree);
    sh.coeffs[0] = rgb.map(|c| (c - 0.5) / SH_C0);
    sh
}

pub fn gen_random(seed: u64, m_base: usize, m_reflective: usize, bounds: &Bounds) -> Scene {
    gen_random_with(
        seed,
        m_base,
        m_reflective,
        bounds,
        &RandomSceneConfig::default(),
    )
}

pub fn gen_random_with(
    seed: u64,
    m_base: usize,
    m_reflective: usize,
    bounds: &Bounds,
    cfg: &RandomSceneConfig,
) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag = bounds.diagonal();
    let mut scene = Scene::empty(cfg.sh_degree);
    let one = |rng: &mut ChaCha8Rng, base: bool| {
        let position = Vec3::from_fn(|i, _| rng.random_range(bounds.min[i]..=bounds.max[i]));
        let frame = random_frame(rng);
        let su = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1) * diag;
        let sv = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1) * diag;
        let opacity = rng.random_range(cfg.opacity_range.0..=cfg.opacity_range.1);
        let appearance = if base {
            let rgb = [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ];
            let mut sh = sh_for_color(cfg.sh_degree, rgb);
            for k in 1..coeff_count(cfg.sh_degree) {
                sh.coeffs[k] = [(); 3].map(|_| rng.random_range(-cfg.sh_detail..=cfg.sh_detail));
            }
            Appearance::Base {
                sh,
                blend_weight: rng.random_range(0.0..=1.0),
            }
        } else {
            Appearance::Reflective {
                reflection: [(); 3].map(|_| rng.random_range(0.0..=1.0)),
            }
        };
        frame_gaussian(position, &frame, su, sv, opacity, appearance)
    };
    for _ in 0..m_base {
        let g = one(&mut rng, true);
        scene.base.push(g);
    }
    for _ in 0..m_reflective {
        let g = one(&mut rng, false);
        scene.reflective.push(g);
    }
    scene
}

/// A camera outside `bounds` looking at its center, framing it comfortably.
pub fn default_view(bounds: &Bounds, width: usize, height: usize) -> CameraView {
    orbit_views(bounds, 1, width, height).remove(0)
}

/// `n` cameras on a ring around `bounds`, slightly above its center.
pub fn orbit_views(bounds: &Bounds, n: usize, width: usize, height: usize) -> Vec<CameraView> {
    let c = bounds.center();
    let r = 1.6 * bounds.diagonal();
    let focal = 0.9 * width.min(height) as f64;
    (0..n)
        .map(|k| {
            let a = 0.35 + k as f64 / n as f64 * std::f64::consts::TAU;
            let eye = c + Vec3::new(r * a.sin(), -0.35 * r, -r * a.cos());
            CameraView::look_at(eye, c, -Vec3::y(), focal, width, height)
                .expect("orbit camera is well-formed")
        })
        .collect()
}

/// Parameters of the planar-mirror scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MirrorProbeConfig {
    /// Half-width of the square mirror in the `z = 0` plane.
    pub extent: f64,
    /// Mirror Gaussians per side.
    pub grid: usize,
    /// Probe center relative to the mirror center; `z` is the height.
    pub probe_offset: Vec3,
    pub probe_radius: f64,
    /// Blend weight of the base Gaussians under the mirror.
    pub mirror_beta: f64,
    /// Faint, small base Gaussians scattered over the scene.
    pub dust: usize,
    pub sh_degree: usize,
}

impl Default for MirrorProbeConfig {
    fn default() -> Self {
        Self {
            extent: 1.0,
            grid: 12,
            probe_offset: Vec3::new(0.0, 0.25, 0.5),
            probe_radius: 0.08,
            mirror_beta: 1.0,
            dust: 0,
            sh_degree: 1,
        }
    }
}

/// Analytic description of the mirror geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorDescription {
    pub plane_point: Vec3,
    pub plane_normal: Vec3,
    pub probe_center: Vec3,
    pub probe_height: f64,
    /// The probe center mirrored through the plane.
    pub virtual_center: Vec3,
    pub probe_reflection: [f64; 3],
    /// Index of the probe disk in `Scene::reflective`, if the mirror exists.
    pub probe_index: Option<usize>,
    pub mirror_count: usize,
}

impl MirrorDescription {
    /// Pixel position of the virtual probe image in `view`, if in front of it.
    pub fn virtual_pixel(&self, view: &CameraView) -> Option<(f64, f64)> {
        let t = view.world_to_camera(&self.virtual_center);
        (t.z > 0.0).then(|| {
            (
                view.focal_x * t.x / t.z + view.principal_x,
                view.focal_y * t.y / t.z + view.principal_y,
            )
        })
    }
}

pub fn gen_mirror_probe(seed: u64, extent: f64, probe_offset: Vec3) -> (Scene, MirrorDescription) {
    gen_mirror_probe_with(
        seed,
        &MirrorProbeConfig {
            extent,
            probe_offset,
            ..MirrorProbeConfig::default()
        },
    )
}

pub fn gen_mirror_probe_with(seed: u64, cfg: &MirrorProbeConfig) -> (Scene, MirrorDescription) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::empty(cfg.sh_degree);
    let up = Mat3::identity();
    let k = cfg.grid.max(1);

    if cfg.extent > 0.0 {
        let spacing = 2.0 * cfg.extent / k as f64;
        let s = 0.6 * spacing;
        for i in 0..k {
            for j in 0..k {
                let p = Vec3::new(
                    -cfg.extent + (i as f64 + 0.5) * spacing,
                    -cfg.extent + (j as f64 + 0.5) * spacing,
                    0.0,
                );
                let tint = rng.random_range(0.25..0.35);
                scene.base.push(frame_gaussian(
                    p,
                    &up,
                    s,
                    s,
                    0.9,
                    Appearance::Base {
                        sh: sh_for_color(cfg.sh_degree, [tint; 3]),
                        blend_weight: cfg.mirror_beta,
                    },
                ));
                scene.reflective.push(frame_gaussian(
                    p,
                    &up,
                    s,
                    s,
                    0.9,
                    Appearance::Reflective {
                        reflection: [0.5, 0.5, 0.5],
                    },
                ));
            }
        }
    }
    let mirror_count = scene.reflective.len();

    let probe_center = Vec3::new(0.0, 0.0, 0.0) + cfg.probe_offset;
    let red = [1.0, 0.05, 0.05];
    scene.base.push(frame_gaussian(
        probe_center,
        &up,
        cfg.probe_radius,
        cfg.probe_radius,
        0.95,
        Appearance::Base {
            sh: sh_for_color(cfg.sh_degree, [0.9, 0.1, 0.1]),
            blend_weight: 0.0,
        },
    ));
    let probe_index = (cfg.extent > 0.0).then(|| {
        scene.reflective.push(frame_gaussian(
            probe_center,
            &up,
            cfg.probe_radius,
            cfg.probe_radius,
            0.95,
            Appearance::Reflective { reflection: red },
        ));
        scene.reflective.len() - 1
    });

    let span = cfg.extent.max(0.5);
    for _ in 0..cfg.dust {
        let p = Vec3::new(
            rng.random_range(-span..span),
            rng.random_range(-span..span),
            rng.random_range(-0.6 * span..0.9 * span),
        );
        let frame = random_frame(&mut rng);
        let s = rng.random_range(0.01..0.03) * span;
        let rgb = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ];
        scene.base.push(frame_gaussian(
            p,
            &frame,
            s,
            s * rng.random_range(0.5..1.0),
            rng.random_range(0.02..0.08),
            Appearance::Base {
                sh: sh_for_color(cfg.sh_degree, rgb),
                blend_weight: 0.0,
            },
        ));
    }

    let desc = MirrorDescription {
        plane_point: Vec3::zeros(),
        plane_normal: Vec3::z(),
        probe_center,
        probe_height: probe_center.z,
        virtual_center: Vec3::new(probe_center.x, probe_center.y, -probe_center.z),
        probe_reflection: red,
        probe_index,
        mirror_count,
    };
    (scene, desc)
}

/// A camera above the mirror looking down at it from the side opposite the probe.
pub fn mirror_view(desc: &MirrorDescription, width: usize, height: usize) -> Result<CameraView> {
    mirror_views(desc, 1, width, height).map(|mut v| v.remove(0))
}

/// `n` cameras spread around the mirror, all seeing the probe's reflection.
pub fn mirror_views(
    desc: &MirrorDescription,
    n: usize,
    width: usize,
    height: usize,
) -> Result<Vec<CameraView>> {
    let target = Vec3::new(desc.probe_center.x, desc.probe_center.y * 0.3, 0.0);
    let focal = 1.1 * width.min(height) as f64;
    (0..n)
        .map(|k| {
            let a = if n == 1 {
                0.0
            } else {
                (k as f64 / (n - 1) as f64 - 0.5) * 0.9
            };
            let eye = Vec3::new(2.2 * a.sin(), -2.2 * a.cos(), 2.0);
            CameraView::look_at(eye, target, Vec3::z(), focal, width, height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let b = Bounds::cube(2.0);
        assert_eq!(gen_random(7, 20, 10, &b), gen_random(7, 20, 10, &b));
        assert_ne!(gen_random(7, 20, 10, &b), gen_random(8, 20, 10, &b));
    }

    #[test]
    fn random_scene_is_valid_and_bounded() {
        let b = Bounds {
            min: Vec3::new(-1.0, 0.0, 2.0),
            max: Vec3::new(1.0, 0.5, 3.0),
        };
        let s = gen_random(3, 50, 0, &b);
        assert!(s.reflective.is_empty());
        s.validate().unwrap();
        assert!(s.base.iter().all(|g| b.contains(&g.position)));
    }

    #[test]
    fn mirror_probe_geometry() {
        let (scene, desc) = gen_mirror_probe(1, 1.0, Vec3::new(0.1, 0.2, 0.7));
        scene.validate().unwrap();
        assert_eq!(desc.virtual_center.z, -0.7);
        assert_eq!(desc.probe_height, 0.7);
        assert_eq!(scene.reflective.len(), 12 * 12 + 1);
        assert!(scene.reflective[..desc.mirror_count]
            .iter()
            .all(|g| g.position.z == 0.0));
        let view = mirror_view(&desc, 64, 64).unwrap();
        let (u, v) = desc.virtual_pixel(&view).unwrap();
        assert!(u > 0.0 && u < 64.0 && v > 0.0 && v < 64.0);
    }

    #[test]
    fn zero_extent_mirror_has_no_reflective_gaussians() {
        let (scene, desc) = gen_mirror_probe(1, 0.0, Vec3::new(0.0, 0.0, 0.5));
        assert!(scene.reflective.is_empty());
        assert_eq!(desc.probe_index, None);
        scene.validate().unwrap();
    }
}
