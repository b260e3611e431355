//! Training losses and their image adjoints.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::{pixel_center, ChannelImage};
use crate::scene::CameraView;

pub const L1_WEIGHT: f64 = 0.8;
pub const SSIM_WEIGHT: f64 = 0.2;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

/// A scalar loss and its gradient with respect to every input value.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub adjoint: ChannelImage,
}

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable 11x11 Gaussian filter of one channel plane, zero outside the image.
/// The kernel is symmetric, so this map is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn plane(img: &ChannelImage, c: usize) -> Vec<f64> {
    img.data
        .iter()
        .skip(c)
        .step_by(img.channels)
        .copied()
        .collect()
}

fn check_pair(a: &ChannelImage, b: &ChannelImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean SSIM over pixels and channels, and its gradient with respect to `x`.
pub fn ssim(x: &ChannelImage, y: &ChannelImage) -> Result<LossValue> {
    check_pair(x, y)?;
    let (w, h, ch) = (x.width, x.height, x.channels);
    let n = (w * h * ch) as f64;
    let mut value = 0.0;
    let mut adjoint = ChannelImage::new(w, h, ch);
    for c in 0..ch {
        let xp = plane(x, c);
        let yp = plane(y, c);
        let mu_x = blur(&xp, w, h);
        let mu_y = blur(&yp, w, h);
        let exx = blur(&xp.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let eyy = blur(&yp.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let exy = blur(
            &xp.iter().zip(&yp).map(|(a, b)| a * b).collect::<Vec<_>>(),
            w,
            h,
        );
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx * my) + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = (exx[i] - mx * mx) + (eyy[i] - my * my) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            value += s;
            d_mu[i] =
                (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - s * (2.0 * mx / b1 - 2.0 * mx / b2);
            d_exx[i] = -s / b2;
            d_exy[i] = 2.0 * a1 / (b1 * b2);
        }
        let g_mu = blur(&d_mu, w, h);
        let g_exx = blur(&d_exx, w, h);
        let g_exy = blur(&d_exy, w, h);
        for i in 0..w * h {
            adjoint.data[i * ch + c] = (g_mu[i] + 2.0 * xp[i] * g_exx[i] + yp[i] * g_exy[i]) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        adjoint,
    })
}

/// `0.8 * L1 + 0.2 * (1 - SSIM)` between a render and its target.
pub fn loss_rgb(rendered: &ChannelImage, target: &ChannelImage) -> Result<LossValue> {
    check_pair(rendered, target)?;
    let n = rendered.data.len() as f64;
    let s = ssim(rendered, target)?;
    let mut l1 = 0.0;
    let mut adjoint = ChannelImage::new(rendered.width, rendered.height, rendered.channels);
    for (i, (a, b)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = a - b;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        adjoint.data[i] = L1_WEIGHT * sign / n - SSIM_WEIGHT * s.adjoint.data[i];
    }
    Ok(LossValue {
        value: L1_WEIGHT * l1 / n + SSIM_WEIGHT * (1.0 - s.value),
        adjoint,
    })
}

/// Normals recovered from a depth map by central differences of the
/// back-projected points, oriented toward the camera. Border pixels and
/// pixels without coverage get no normal.
pub fn depth_normals(
    depth: &ChannelImage,
    transmittance: &[f64],
    view: &CameraView,
) -> Vec<Option<Vec3>> {
    let (w, h) = (depth.width, depth.height);
    let cov = |x: usize, y: usize| 1.0 - transmittance[y * w + x];
    let point = |x: usize, y: usize| -> Option<Vec3> {
        let c = cov(x, y);
        if c <= 1e-6 {
            return None;
        }
        let z = depth.pixel(x, y)[0] / c;
        let (px, py) = pixel_center(x, y);
        let cam = Vec3::new(
            (px - view.principal_x) / view.focal_x * z,
            (py - view.principal_y) / view.focal_y * z,
            z,
        );
        Some(view.rotation.transpose() * cam + view.center)
    };
    let mut out = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (Some(l), Some(r), Some(u), Some(d), Some(p)) = (
                point(x - 1, y),
                point(x + 1, y),
                point(x, y - 1),
                point(x, y + 1),
                point(x, y),
            ) else {
                continue;
            };
            let Some(n) = (r - l).cross(&(d - u)).try_normalize(1e-12) else {
                continue;
            };
            out[y * w + x] = Some(if n.dot(&(view.center - p)) < 0.0 {
                -n
            } else {
                n
            });
        }
    }
    out
}

/// Normal consistency between splatted normals and depth-derived normals:
/// the mean over pixels of `(1 - T) * (1 - n_hat . n_depth)`. Depth normals
/// and the visibility weight are held constant; the adjoint is with respect
/// to the (unnormalized) splatted normal map.
pub fn loss_normal_consistency(
    normal_map: &ChannelImage,
    depth_map: &ChannelImage,
    transmittance: &[f64],
    view: &CameraView,
) -> Result<LossValue> {
    if normal_map.channels != 3
        || depth_map.channels != 1
        || normal_map.width != depth_map.width
        || normal_map.height != depth_map.height
    {
        return Err(Error::Shape(
            "normal map must be RGB and depth map scalar, same size".into(),
        ));
    }
    let n_depth = depth_normals(depth_map, transmittance, view);
    let count = (normal_map.width * normal_map.height) as f64;
    let mut value = 0.0;
    let mut adjoint = ChannelImage::new(normal_map.width, normal_map.height, 3);
    for (i, nd) in n_depth.iter().enumerate() {
        let Some(nd) = nd else { continue };
        let raw = Vec3::new(
            normal_map.data[3 * i],
            normal_map.data[3 * i + 1],
            normal_map.data[3 * i + 2],
        );
        let len = raw.norm();
        if len < 1e-12 {
            continue;
        }
        let n = raw / len;
        let vis = 1.0 - transmittance[i];
        value += vis * (1.0 - n.dot(nd));
        let g = -(nd - n * n.dot(nd)) * (vis / (len * count));
        adjoint.data[3 * i..3 * i + 3].copy_from_slice(&[g.x, g.y, g.z]);
    }
    Ok(LossValue {
        value: value / count,
        adjoint,
    })
}
