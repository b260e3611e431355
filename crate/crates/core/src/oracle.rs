//! Slow reference implementations: per-pixel splatting over every Gaussian,
//! exhaustive tile tests, linear-scan ray queries and pixel-wise tracing.

use rayon::prelude::*;

use crate::compositor::base_color;
use crate::consts::{ALPHA_MAX, MIN_ALPHA, RAY_ORIGIN_OFFSET, T_STOP};
use crate::error::Result;
use crate::math::Vec3;
use crate::projection::{footprint, Ellipse, Mat2, TileGrid, Vec2};
use crate::raster::{pixel_center, Branch, ChannelImage};
use crate::scene::{normal_of, CameraView, GaussianPrimitive, Scene};
use crate::trace::{blend_hits, intersect_splat, reflection_ray, sort_hits, Phi, RayHit};

/// Tiles meeting the ellipse, by testing every tile: the closed rectangle
/// meets the ellipse iff it contains the center or the Mahalanobis-closest
/// point of one of its edges lies inside.
pub fn oracle_tiles_for(ellipse: &Ellipse, grid: &TileGrid) -> Vec<u32> {
    let q = |p: Vec2| {
        let d = p - ellipse.center;
        (d.transpose() * ellipse.conic * d)[0]
    };
    let closest_on_segment = |a: Vec2, b: Vec2| {
        let e = b - a;
        let qe = (e.transpose() * ellipse.conic * e)[0];
        let s = if qe > 0.0 {
            ((ellipse.center - a).transpose() * ellipse.conic * e)[0] / qe
        } else {
            0.0
        };
        q(a + e * s.clamp(0.0, 1.0))
    };
    (0..grid.tile_count() as u32)
        .filter(|&id| {
            let [x0, y0, x1, y1] = grid.rect(id);
            let c = ellipse.center;
            if c.x >= x0 && c.x <= x1 && c.y >= y0 && c.y <= y1 {
                return true;
            }
            let corners = [
                Vec2::new(x0, y0),
                Vec2::new(x1, y0),
                Vec2::new(x1, y1),
                Vec2::new(x0, y1),
            ];
            (0..4)
                .any(|k| closest_on_segment(corners[k], corners[(k + 1) % 4]) <= ellipse.threshold)
        })
        .collect()
}

struct Footprint2 {
    index: usize,
    mean: Vec2,
    conic: Mat2,
    depth: f64,
    opacity: f64,
}

fn visible_footprints(list: &[GaussianPrimitive], view: &CameraView) -> Result<Vec<Footprint2>> {
    let mut out = Vec::new();
    for (index, g) in list.iter().enumerate() {
        if g.opacity <= MIN_ALPHA {
            continue;
        }
        if let Some(fp) = footprint(g, view)? {
            let conic = fp
                .cov
                .try_inverse()
                .expect("projected covariance is positive definite");
            out.push(Footprint2 {
                index,
                mean: fp.mean,
                conic,
                depth: fp.depth,
                opacity: g.opacity,
            });
        }
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Front-to-back blend at every pixel over every Gaussian of `list`, in
/// global depth order, with payload `payload(index)`.
pub fn oracle_splat(
    list: &[GaussianPrimitive],
    view: &CameraView,
    channels: usize,
    payload: impl Fn(usize) -> Result<Vec<f64>>,
) -> Result<ChannelImage> {
    let fps = visible_footprints(list, view)?;
    let payloads: Vec<Vec<f64>> = fps
        .iter()
        .map(|f| payload(f.index))
        .collect::<Result<_>>()?;
    let mut img = ChannelImage::new(view.width, view.height, channels);
    let pixels: Vec<(Vec<f64>, f64)> = (0..view.pixel_count())
        .into_par_iter()
        .map(|i| {
            let (px, py) = pixel_center(i % view.width, i / view.width);
            let p = Vec2::new(px, py);
            let mut acc = vec![0.0; channels];
            let mut t = 1.0;
            for (f, c) in fps.iter().zip(&payloads) {
                let d = p - f.mean;
                let power = -0.5 * (d.transpose() * f.conic * d)[0];
                let alpha = (f.opacity * power.exp()).min(ALPHA_MAX);
                if alpha < MIN_ALPHA {
                    continue;
                }
                for k in 0..channels {
                    acc[k] += c[k] * alpha * t;
                }
                t *= 1.0 - alpha;
                if t < T_STOP {
                    break;
                }
            }
            (acc, t)
        })
        .collect();
    for (i, (acc, t)) in pixels.into_iter().enumerate() {
        img.data[i * channels..(i + 1) * channels].copy_from_slice(&acc);
        img.transmittance[i] = t;
    }
    Ok(img)
}

/// All accepted hits along a ray, testing every reflective Gaussian.
pub fn trace_ray_linear(
    origin: &Vec3,
    dir: &Vec3,
    reflective: &[GaussianPrimitive],
    exclude: Option<usize>,
) -> Result<Vec<RayHit>> {
    let len = dir.norm();
    if (len - 1.0).abs() > 1e-6 {
        return Err(crate::error::Error::InvalidDirection(len));
    }
    let mut hits: Vec<RayHit> = reflective
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .filter_map(|(i, g)| intersect_splat(i, g, origin, dir))
        .collect();
    sort_hits(&mut hits);
    Ok(hits)
}

/// Baked payload of reflective Gaussian `i`, by linear-scan tracing.
pub fn oracle_bake(scene: &Scene, i: usize, view: &CameraView, phi: &Phi) -> Result<[f64; 3]> {
    let (origin, dir) = reflection_ray(&scene.reflective[i], view)?;
    let hits = trace_ray_linear(&origin, &dir, &scene.reflective, Some(i))?;
    Ok(blend_hits(&hits, &scene.reflective, phi.gain(&dir)).0)
}

/// One branch rendered without tiles.
pub fn oracle_render(scene: &Scene, view: &CameraView, branch: Branch) -> Result<ChannelImage> {
    match branch {
        Branch::Base => oracle_splat(&scene.base, view, 3, |i| {
            Ok(base_color(&scene.base[i], view)?.to_vec())
        }),
        Branch::Reflective => oracle_splat(&scene.reflective, view, 3, |i| {
            Ok(oracle_bake(scene, i, view, &Phi::default())?.to_vec())
        }),
    }
}

/// Blend-weight map rendered without tiles.
pub fn oracle_beta(scene: &Scene, view: &CameraView) -> Result<ChannelImage> {
    let mut img = oracle_splat(&scene.base, view, 1, |i| {
        Ok(vec![scene.base[i].blend_weight().unwrap_or(0.0)])
    })?;
    img.data.iter_mut().for_each(|b| *b = b.clamp(0.0, 1.0));
    Ok(img)
}

/// Pixel-wise reflection image and the number of rays traced for it.
#[derive(Debug, Clone)]
pub struct PixelwiseTrace {
    pub image: ChannelImage,
    pub rays: u64,
}

/// Traces one reflection ray per pixel. The surface point and normal at a
/// pixel are alpha-weighted averages over the reflective splats covering it
/// (ray-plane depth along the pixel ray, camera-facing normals); the result
/// is weighted by that coverage.
pub fn oracle_pixelwise_trace(
    scene: &Scene,
    view: &CameraView,
    phi: &Phi,
) -> Result<PixelwiseTrace> {
    let fps = visible_footprints(&scene.reflective, view)?;
    let normals: Vec<Vec3> = fps
        .iter()
        .map(|f| normal_of(&scene.reflective[f.index]))
        .collect::<Result<_>>()?;
    let pixels: Vec<Result<[f64; 3]>> = (0..view.pixel_count())
        .into_par_iter()
        .map(|i| {
            let (px, py) = pixel_center(i % view.width, i / view.width);
            let ray = view.pixel_ray(px, py);
            let p = Vec2::new(px, py);
            let mut t_acc = 0.0;
            let mut n_acc = Vec3::zeros();
            let mut weight = 0.0;
            let mut trans = 1.0;
            for (f, n) in fps.iter().zip(&normals) {
                let d = p - f.mean;
                let alpha =
                    (f.opacity * (-0.5 * (d.transpose() * f.conic * d)[0]).exp()).min(ALPHA_MAX);
                if alpha < MIN_ALPHA {
                    continue;
                }
                let g = &scene.reflective[f.index];
                let denom = ray.dot(n);
                let t_hit = if denom.abs() > 1e-12 {
                    (g.position - view.center).dot(n) / denom
                } else {
                    (g.position - view.center).dot(&ray)
                };
                let facing = if n.dot(&ray) > 0.0 { -n } else { *n };
                let w = alpha * trans;
                t_acc += w * t_hit;
                n_acc += facing * w;
                weight += w;
                trans *= 1.0 - alpha;
                if trans < T_STOP {
                    break;
                }
            }
            let (origin, dir) = match (weight > 0.0).then(|| n_acc.try_normalize(1e-12)).flatten() {
                Some(n) => {
                    let surface = view.center + ray * (t_acc / weight);
                    let d = (ray - n * (2.0 * ray.dot(&n))).normalize();
                    (surface + d * RAY_ORIGIN_OFFSET, d)
                }
                None => (view.center, ray),
            };
            let hits = trace_ray_linear(&origin, &dir, &scene.reflective, None)?;
            let (rgb, _) = blend_hits(&hits, &scene.reflective, phi.gain(&dir));
            Ok(rgb.map(|c| c * weight))
        })
        .collect();
    let mut image = ChannelImage::new(view.width, view.height, 3);
    for (i, px) in pixels.into_iter().enumerate() {
        image.data[i * 3..i * 3 + 3].copy_from_slice(&px?);
    }
    Ok(PixelwiseTrace {
        image,
        rays: view.pixel_count() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ellipse_from;
    use crate::raster::Renderer;
    use crate::scene::Appearance;
    use crate::sh::ShCoeffs;

    #[test]
    fn empty_scene_renders_black() {
        let view = CameraView::look_at(
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::zeros(),
            -Vec3::y(),
            30.0,
            16,
            12,
        )
        .unwrap();
        let img = oracle_render(&Scene::empty(0), &view, Branch::Base).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
        assert!(img.transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn single_gaussian_footprint_closed_form() {
        let view = CameraView::look_at(
            Vec3::new(0.0, 0.0, -10.0),
            Vec3::zeros(),
            -Vec3::y(),
            100.0,
            64,
            64,
        )
        .unwrap();
        let g = GaussianPrimitive {
            position: Vec3::zeros(),
            tangent_u: Vec3::x(),
            tangent_v: Vec3::y(),
            scale_u: 0.5,
            scale_v: 0.5,
            opacity: 0.8,
            appearance: Appearance::Base {
                sh: ShCoeffs::constant(0, [1.0, 0.0, 0.0]),
                blend_weight: 0.0,
            },
        };
        let scene = Scene {
            sh_degree: 0,
            base: vec![g],
            reflective: vec![],
        };
        let img = oracle_render(&scene, &view, Branch::Base).unwrap();
        // Isotropic footprint of variance (100 * 0.5 / 10)^2 + 0.3 centered at (32, 32).
        let var = 25.0 + 0.3;
        for (x, y) in [(32usize, 32usize), (35, 30), (40, 32), (20, 25)] {
            let (px, py) = pixel_center(x, y);
            let r2 = (px - 32.0).powi(2) + (py - 32.0).powi(2);
            let alpha = 0.8 * (-0.5 * r2 / var).exp();
            let expected = if alpha < MIN_ALPHA { 0.0 } else { alpha };
            assert!((img.pixel(x, y)[0] - expected).abs() < 1e-9, "({x}, {y})");
        }
    }

    #[test]
    fn pixelwise_ray_count_is_pixel_count() {
        let view = CameraView::look_at(
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::zeros(),
            -Vec3::y(),
            30.0,
            20,
            10,
        )
        .unwrap();
        let out = oracle_pixelwise_trace(&Scene::empty(0), &view, &Phi::default()).unwrap();
        assert_eq!(out.rays, 200);
    }

    #[test]
    fn oracle_tile_test_on_simple_cases() {
        let grid = TileGrid::new(64, 64, 16).unwrap();
        let e = ellipse_from(
            Vec2::new(16.0, 16.0),
            Mat2::identity(),
            MIN_ALPHA * 0.5f64.exp(),
            MIN_ALPHA,
        )
        .unwrap();
        assert_eq!(oracle_tiles_for(&e, &grid).len(), 4);
        let far = ellipse_from(Vec2::new(-50.0, 10.0), Mat2::identity(), 0.9, MIN_ALPHA).unwrap();
        assert!(oracle_tiles_for(&far, &grid).is_empty());
    }

    #[test]
    fn oracle_is_independent_of_thread_count() {
        let scene = crate::synth::gen_random(2, 40, 10, &crate::synth::Bounds::cube(1.0));
        let view = crate::synth::default_view(&crate::synth::Bounds::cube(1.0), 32, 32);
        let one = Renderer::with_threads(1)
            .unwrap()
            .install(|| oracle_render(&scene, &view, Branch::Reflective).unwrap());
        let two = Renderer::with_threads(2)
            .unwrap()
            .install(|| oracle_render(&scene, &view, Branch::Reflective).unwrap());
        assert_eq!(one, two);
    }
}
