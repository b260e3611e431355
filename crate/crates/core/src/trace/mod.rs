//! Reflection-baked tracing: one reflected ray per visible reflective
//! Gaussian, blended over the reflective splats it hits.

mod bvh;

pub use bvh::{cutoff_sigma, splat_bounds, Aabb, Bvh};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consts::{MIN_ALPHA, RAY_ORIGIN_OFFSET, RAY_T_MIN, T_STOP};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::Renderer;
use crate::scene::{normal_of, CameraView, GaussianPrimitive, Scene};
use crate::sh::sh_basis;

/// Mirror reflection `v - 2 (v . n) n`.
pub fn reflect_dir(v: &Vec3, n: &Vec3) -> Result<Vec3> {
    let len = n.norm();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidNormal(len));
    }
    Ok(v - n * (2.0 * v.dot(n)))
}

/// Unnormalized direction from the camera center to the splat center.
pub fn splat_direction(g: &GaussianPrimitive, view: &CameraView) -> Result<Vec3> {
    let v = g.position - view.center;
    if v == Vec3::zeros() {
        return Err(Error::ZeroDirection);
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub gaussian: usize,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// `exp(-(u^2 + v^2) / 2)`.
    pub density: f64,
}

/// Ray/splat-plane intersection with the 2D Gaussian acceptance test.
pub fn intersect_splat(
    index: usize,
    g: &GaussianPrimitive,
    origin: &Vec3,
    dir: &Vec3,
) -> Option<RayHit> {
    let n = normal_of(g).ok()?;
    let denom = dir.dot(&n);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (g.position - origin).dot(&n) / denom;
    if !(t > RAY_T_MIN) {
        return None;
    }
    let rel = origin + dir * t - g.position;
    let u = rel.dot(&g.tangent_u) / g.scale_u;
    let v = rel.dot(&g.tangent_v) / g.scale_v;
    let density = (-0.5 * (u * u + v * v)).exp();
    (g.opacity * density >= MIN_ALPHA).then_some(RayHit {
        gaussian: index,
        t,
        u,
        v,
        density,
    })
}

pub(crate) fn sort_hits(hits: &mut [RayHit]) {
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.gaussian.cmp(&b.gaussian)));
}

fn check_unit(dir: &Vec3) -> Result<()> {
    let len = dir.norm();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDirection(len));
    }
    Ok(())
}

/// All accepted hits along the ray, ascending by `t` (ties by index),
/// found through the BVH. `exclude` drops one Gaussian (the ray's source).
pub fn trace_ray(
    origin: &Vec3,
    dir: &Vec3,
    bvh: &Bvh,
    reflective: &[GaussianPrimitive],
    exclude: Option<usize>,
) -> Result<(Vec<RayHit>, u64)> {
    check_unit(dir)?;
    let mut hits = Vec::new();
    let visited = bvh.traverse(origin, dir, RAY_T_MIN, |p| {
        if Some(p) != exclude {
            if let Some(h) = intersect_splat(p, &reflective[p], origin, dir) {
                hits.push(h);
            }
        }
    });
    sort_hits(&mut hits);
    Ok((hits, visited))
}

/// Direction weighting applied to a hit Gaussian's reflection coefficients.
/// `phi(r, d) = gain(d) * r`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Phi {
    /// `phi(r, d) = r`.
    #[default]
    Identity,
    /// Scalar degree-1 SH lobe over the ray direction, clamped at zero.
    ShLobe { weights: [f64; 4] },
}

impl Phi {
    pub fn gain(&self, dir: &Vec3) -> f64 {
        match self {
            Phi::Identity => 1.0,
            Phi::ShLobe { weights } => {
                let b = sh_basis(dir, 4);
                (0..4).map(|i| weights[i] * b[i]).sum::<f64>().max(0.0)
            }
        }
    }
}

/// One hit that contributed to a baked reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendedHit {
    pub gaussian: usize,
    pub alpha: f64,
    pub density: f64,
    /// Transmittance in front of this hit.
    pub transmittance: f64,
}

/// Result of baking one reflective Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct BakeRecord {
    pub payload: [f64; 3],
    pub direction: Vec3,
    pub gain: f64,
    pub hits: Vec<BlendedHit>,
    pub nodes_visited: u64,
}

/// Front-to-back blend of hit reflection coefficients.
pub fn blend_hits(
    hits: &[RayHit],
    reflective: &[GaussianPrimitive],
    gain: f64,
) -> ([f64; 3], Vec<BlendedHit>) {
    let mut acc = [0.0; 3];
    let mut t = 1.0;
    let mut used = Vec::new();
    for h in hits {
        let g = &reflective[h.gaussian];
        let r = g.reflection().expect("reflective Gaussian");
        let alpha = g.opacity * h.density;
        let w = alpha * t;
        for c in 0..3 {
            acc[c] += gain * r[c] * w;
        }
        used.push(BlendedHit {
            gaussian: h.gaussian,
            alpha,
            density: h.density,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t < T_STOP {
            break;
        }
    }
    (acc, used)
}

/// Origin and unit direction of the reflected ray leaving reflective Gaussian `g`.
pub fn reflection_ray(g: &GaussianPrimitive, view: &CameraView) -> Result<(Vec3, Vec3)> {
    let v = splat_direction(g, view)?;
    let n = normal_of(g)?;
    let d = reflect_dir(&v, &n)?.normalize();
    Ok((g.position + d * RAY_ORIGIN_OFFSET, d))
}

/// Baked reflection payload of reflective Gaussian `index`.
pub fn bake_reflection(
    index: usize,
    scene: &Scene,
    view: &CameraView,
    bvh: &Bvh,
    phi: &Phi,
) -> Result<BakeRecord> {
    let g = &scene.reflective[index];
    let (origin, dir) = reflection_ray(g, view)?;
    let (hits, nodes_visited) = trace_ray(&origin, &dir, bvh, &scene.reflective, Some(index))?;
    let gain = phi.gain(&dir);
    let (payload, hits) = blend_hits(&hits, &scene.reflective, gain);
    Ok(BakeRecord {
        payload,
        direction: dir,
        gain,
        hits,
        nodes_visited,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceStats {
    pub rays_traced: u64,
    pub bvh_nodes_visited: u64,
    pub hits_blended: u64,
}

/// Baked payloads for every reflective Gaussian (zero where culled).
#[derive(Debug, Clone, PartialEq)]
pub struct BakeTable {
    pub payloads: Vec<[f64; 3]>,
    pub records: Vec<Option<BakeRecord>>,
    pub stats: TraceStats,
}

/// Traces exactly one ray per reflective Gaussian visible in `view`.
pub fn bake_all(
    renderer: &Renderer,
    scene: &Scene,
    view: &CameraView,
    bvh: &Bvh,
    phi: &Phi,
) -> Result<BakeTable> {
    let grid = renderer.grid(view)?;
    let visible = renderer.project_all(&scene.reflective, view, &grid)?;
    let baked: Vec<(usize, BakeRecord)> = renderer.install(|| {
        visible
            .par_iter()
            .map(|pg| bake_reflection(pg.index, scene, view, bvh, phi).map(|r| (pg.index, r)))
            .collect::<Result<_>>()
    })?;
    let mut table = BakeTable {
        payloads: vec![[0.0; 3]; scene.reflective.len()],
        records: vec![None; scene.reflective.len()],
        stats: TraceStats::default(),
    };
    for (i, rec) in baked {
        table.stats.rays_traced += 1;
        table.stats.bvh_nodes_visited += rec.nodes_visited;
        table.stats.hits_blended += rec.hits.len() as u64;
        table.payloads[i] = rec.payload;
        table.records[i] = Some(rec);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rotation_exp, Mat3};
    use crate::oracle::trace_ray_linear;
    use crate::scene::Appearance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mirror(position: Vec3, frame: Mat3, s: f64, opacity: f64, r: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive {
            position,
            tangent_u: frame.column(0).into(),
            tangent_v: frame.column(1).into(),
            scale_u: s,
            scale_v: s,
            opacity,
            appearance: Appearance::Reflective { reflection: r },
        }
    }

    #[test]
    fn reflect_head_on_and_45_degrees() {
        assert_eq!(reflect_dir(&Vec3::z(), &Vec3::z()).unwrap(), -Vec3::z());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = reflect_dir(&Vec3::x(), &Vec3::new(h, 0.0, h)).unwrap();
        assert!((d - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(matches!(
            reflect_dir(&Vec3::x(), &Vec3::new(2.0, 0.0, 0.0)),
            Err(Error::InvalidNormal(_))
        ));
    }

    #[test]
    fn reflect_is_norm_preserving_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let v = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let n = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let r = reflect_dir(&v, &n).unwrap();
            assert!((r.norm() - v.norm()).abs() < 1e-12 * (1.0 + v.norm()));
            assert!((reflect_dir(&r, &n).unwrap() - v).norm() < 1e-12 * (1.0 + v.norm()));
            assert!((r.dot(&n) + v.dot(&n)).abs() < 1e-9);
        }
    }

    #[test]
    fn splat_direction_cases() {
        let view = CameraView::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), 10.0, 8, 8).unwrap();
        let g = mirror(
            Vec3::new(0.0, 0.0, 5.0),
            Mat3::identity(),
            1.0,
            0.5,
            [0.0; 3],
        );
        assert_eq!(
            splat_direction(&g, &view).unwrap(),
            Vec3::new(0.0, 0.0, 5.0)
        );
        let at_cam = mirror(Vec3::zeros(), Mat3::identity(), 1.0, 0.5, [0.0; 3]);
        assert!(matches!(
            splat_direction(&at_cam, &view),
            Err(Error::ZeroDirection)
        ));
    }

    #[test]
    fn single_facing_splat_on_axis() {
        let list = vec![mirror(
            Vec3::new(0.0, 0.0, 5.0),
            Mat3::identity(),
            1.0,
            0.8,
            [0.0; 3],
        )];
        let bvh = Bvh::build(&list);
        let (hits, _) = trace_ray(&Vec3::zeros(), &Vec3::z(), &bvh, &list, None).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(
            (hits[0].t, hits[0].u, hits[0].v, hits[0].density),
            (5.0, 0.0, 0.0, 1.0)
        );
        let (behind, _) = trace_ray(&Vec3::zeros(), &-Vec3::z(), &bvh, &list, None).unwrap();
        assert!(behind.is_empty());
    }

    #[test]
    fn blend_hand_cases() {
        let list = vec![
            mirror(
                Vec3::new(0.0, 0.0, 1.0),
                Mat3::identity(),
                1.0,
                1.0,
                [0.2, 0.4, 0.6],
            ),
            mirror(
                Vec3::new(0.0, 0.0, 2.0),
                Mat3::identity(),
                1.0,
                0.5,
                [1.0, 0.0, 0.0],
            ),
            mirror(
                Vec3::new(0.0, 0.0, 3.0),
                Mat3::identity(),
                1.0,
                0.5,
                [0.0, 1.0, 0.0],
            ),
        ];
        let hit = |g, t| RayHit {
            gaussian: g,
            t,
            u: 0.0,
            v: 0.0,
            density: 1.0,
        };
        assert_eq!(blend_hits(&[], &list, 1.0).0, [0.0; 3]);
        assert_eq!(blend_hits(&[hit(0, 1.0)], &list, 1.0).0, [0.2, 0.4, 0.6]);
        assert_eq!(
            blend_hits(&[hit(1, 2.0), hit(2, 3.0)], &list, 1.0).0,
            [0.5, 0.25, 0.0]
        );
    }

    #[test]
    fn bvh_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let list: Vec<_> = (0..300)
            .map(|_| {
                let w = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
                let p = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
                mirror(
                    p,
                    rotation_exp(&w),
                    rng.random_range(0.05..0.6),
                    rng.random_range(0.05..1.0),
                    [0.5; 3],
                )
            })
            .collect();
        let bvh = Bvh::build(&list);
        assert!(bvh.check_invariants());
        for _ in 0..100 {
            let o = Vec3::from_fn(|_, _| rng.random_range(-6.0..6.0));
            let d = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let (fast, _) = trace_ray(&o, &d, &bvh, &list, None).unwrap();
            let slow = trace_ray_linear(&o, &d, &list, None).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn phi_lobe_is_nonnegative_extension() {
        let phi = Phi::ShLobe {
            weights: [1.0, 0.0, 2.0, 0.0],
        };
        assert!(phi.gain(&Vec3::z()) > phi.gain(&-Vec3::z()));
        assert!(phi.gain(&-Vec3::z()) >= 0.0);
        assert_eq!(Phi::Identity.gain(&Vec3::x()), 1.0);
    }
}
