//! Reverse-mode gradients of an image loss with respect to Gaussian
//! parameters, plus a central-difference checker.
//!
//! The reflective branch treats each baked reflection ray as fixed: the
//! gradient reaches the reflection coefficients and opacities of the hit
//! Gaussians but not the geometry that determined where the ray went.

use rayon::prelude::*;

use crate::compositor::{
    facing_normal, view_dir, ForwardCache, BASE_CHANNELS, CH_BETA, CH_DEPTH, CH_NORMAL,
};
use crate::consts::{ALPHA_MAX, MIN_ALPHA, THIN_EPS_REL, T_STOP};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::projection::{
    augment_thin3d, perspective_jacobian, world_covariance, Mat2, ProjectedGaussian, Vec2,
};
use crate::raster::{pixel_center, splat_power, ChannelImage, Renderer, TileFrame};
use crate::scene::{Appearance, CameraView, GaussianKind, GaussianPrimitive, Scene};
use crate::sh::{eval_sh_raw, sh_basis, sh_basis_grad};

/// Gradient of a scalar loss with respect to one Gaussian. `rotation` is the
/// derivative along an infinitesimal world-space rotation of the tangent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: Vec3,
    pub rotation: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub sh: Vec<[f64; 3]>,
    pub blend_weight: f64,
    pub reflection: [f64; 3],
}

impl GaussianGrad {
    pub fn zeros_like(g: &GaussianPrimitive) -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Vec3::zeros(),
            scale_u: 0.0,
            scale_v: 0.0,
            opacity: 0.0,
            sh: vec![[0.0; 3]; g.sh().map_or(0, |s| s.coeffs.len())],
            blend_weight: 0.0,
            reflection: [0.0; 3],
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.position
            .iter()
            .chain(self.rotation.iter())
            .copied()
            .chain([self.scale_u, self.scale_v, self.opacity, self.blend_weight])
            .chain(self.reflection)
            .chain(self.sh.iter().flatten().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub base: Vec<GaussianGrad>,
    pub reflective: Vec<GaussianGrad>,
}

impl ParamGradients {
    pub fn zeros_like(scene: &Scene) -> Self {
        Self {
            base: scene.base.iter().map(GaussianGrad::zeros_like).collect(),
            reflective: scene
                .reflective
                .iter()
                .map(GaussianGrad::zeros_like)
                .collect(),
        }
    }

    pub fn list(&self, kind: GaussianKind) -> &[GaussianGrad] {
        match kind {
            GaussianKind::Base => &self.base,
            GaussianKind::Reflective => &self.reflective,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base
            .iter()
            .chain(&self.reflective)
            .all(GaussianGrad::is_finite)
    }

    pub fn get(&self, p: &ParamRef) -> f64 {
        let g = &self.list(p.kind)[p.index];
        match p.field {
            Field::Position(i) => g.position[i],
            Field::Rotation(i) => g.rotation[i],
            Field::ScaleU => g.scale_u,
            Field::ScaleV => g.scale_v,
            Field::Opacity => g.opacity,
            Field::Sh { coeff, channel } => g.sh[coeff][channel],
            Field::BlendWeight => g.blend_weight,
            Field::Reflection(c) => g.reflection[c],
        }
    }

    /// Adds `other * factor` into `self`.
    pub fn accumulate(&mut self, other: &ParamGradients, factor: f64) {
        for (a, b) in self
            .base
            .iter_mut()
            .zip(&other.base)
            .chain(self.reflective.iter_mut().zip(&other.reflective))
        {
            a.position += b.position * factor;
            a.rotation += b.rotation * factor;
            a.scale_u += b.scale_u * factor;
            a.scale_v += b.scale_v * factor;
            a.opacity += b.opacity * factor;
            a.blend_weight += b.blend_weight * factor;
            for c in 0..3 {
                a.reflection[c] += b.reflection[c] * factor;
            }
            for (x, y) in a.sh.iter_mut().zip(&b.sh) {
                for c in 0..3 {
                    x[c] += y[c] * factor;
                }
            }
        }
    }
}

/// Loss adjoints for the images of a `RenderOutput`; absent images have zero adjoint.
#[derive(Debug, Clone, Default)]
pub struct OutputAdjoint {
    pub final_color: Option<ChannelImage>,
    pub base_color: Option<ChannelImage>,
    pub ref_color: Option<ChannelImage>,
    pub beta_map: Option<ChannelImage>,
    pub normal_map: Option<ChannelImage>,
    pub depth_map: Option<ChannelImage>,
}

impl OutputAdjoint {
    pub fn final_only(img: ChannelImage) -> Self {
        Self {
            final_color: Some(img),
            ..Self::default()
        }
    }
}

/// One blended splat at one pixel, as recorded while replaying the blend.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Position inside the tile's instance list.
    pub k: usize,
    pub slot: usize,
    pub alpha: f64,
    /// `exp(power)`, the unweighted Gaussian falloff.
    pub falloff: f64,
    pub transmittance: f64,
    pub clamped: bool,
}

/// Replays the forward blend of one pixel, listing the splats that contributed.
pub(crate) fn pixel_contributions<const C: usize>(
    frame: &TileFrame<C>,
    instances: &[u32],
    px: f64,
    py: f64,
    out: &mut Vec<Contribution>,
) {
    out.clear();
    let mut t = 1.0;
    for (k, &i) in instances.iter().enumerate() {
        let s = &frame.splats[i as usize];
        let falloff = splat_power(&s.mean, &s.conic, px, py).exp();
        let raw = s.opacity * falloff;
        let alpha = raw.min(ALPHA_MAX);
        if alpha < MIN_ALPHA {
            continue;
        }
        out.push(Contribution {
            k,
            slot: i as usize,
            alpha,
            falloff,
            transmittance: t,
            clamped: raw > ALPHA_MAX,
        });
        t *= 1.0 - alpha;
        if t < T_STOP {
            break;
        }
    }
}

/// `dC/dalpha_j` for every contribution, given per-channel payloads and the
/// channel adjoint `g`. Uses the back-to-front suffix
/// `B_{j-1} = c_j a_j + (1 - a_j) B_j`, so no division by `1 - alpha`.
pub(crate) fn alpha_adjoints<const C: usize>(
    frame: &TileFrame<C>,
    contribs: &[Contribution],
    g: &[f64; C],
    out: &mut Vec<f64>,
) {
    out.clear();
    out.resize(contribs.len(), 0.0);
    let mut suffix = [0.0; C];
    for (j, c) in contribs.iter().enumerate().rev() {
        let payload = &frame.splats[c.slot].payload;
        let mut d = 0.0;
        for ch in 0..C {
            d += g[ch] * (payload[ch] - suffix[ch]);
            suffix[ch] = payload[ch] * c.alpha + (1.0 - c.alpha) * suffix[ch];
        }
        out[j] = c.transmittance * d;
    }
}

/// Gradients with respect to one splat's screen-space attributes.
/// `conic` is the full symmetric-matrix gradient `(Q00, Q01 = Q10, Q11)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatGrad<const C: usize> {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub payload: [f64; C],
}

impl<const C: usize> SplatGrad<C> {
    fn zero() -> Self {
        Self {
            mean: [0.0; 2],
            conic: [0.0; 3],
            opacity: 0.0,
            payload: [0.0; C],
        }
    }

    fn add(&mut self, o: &Self) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        for c in 0..C {
            self.payload[c] += o.payload[c];
        }
    }
}

/// Gradient of `alpha` through `power` into mean and conic, scaled by `d_alpha`.
#[inline]
pub(crate) fn alpha_to_screen(
    mean: &[f64; 2],
    conic: &[f64; 3],
    px: f64,
    py: f64,
    alpha: f64,
    d_alpha: f64,
) -> ([f64; 2], [f64; 3]) {
    let dpower = d_alpha * alpha;
    let dx = px - mean[0];
    let dy = py - mean[1];
    let [a, b, c] = *conic;
    (
        [dpower * (a * dx + b * dy), dpower * (b * dx + c * dy)],
        [
            -0.5 * dpower * dx * dx,
            -0.5 * dpower * dx * dy,
            -0.5 * dpower * dy * dy,
        ],
    )
}

/// Backpropagates per-pixel channel adjoints through every tile of `frame`.
/// Tiles run in parallel; their partial sums are merged in tile order.
fn blend_backward<const C: usize>(
    renderer: &Renderer,
    frame: &TileFrame<C>,
    pixel_adjoint: impl Fn(usize, usize) -> [f64; C] + Sync,
) -> Vec<SplatGrad<C>> {
    let grid = frame.grid;
    let partials: Vec<Vec<SplatGrad<C>>> = renderer.install(|| {
        (0..grid.tile_count() as u32)
            .into_par_iter()
            .map(|tile| {
                let instances = frame.tile_instances(tile);
                let mut local = vec![SplatGrad::<C>::zero(); instances.len()];
                if instances.is_empty() {
                    return local;
                }
                let (x0, y0, x1, y1) = grid.pixel_bounds(tile);
                let mut contribs = Vec::new();
                let mut d_alpha = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let g = pixel_adjoint(x, y);
                        if g.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let (px, py) = pixel_center(x, y);
                        pixel_contributions(frame, instances, px, py, &mut contribs);
                        alpha_adjoints(frame, &contribs, &g, &mut d_alpha);
                        for (c, &da) in contribs.iter().zip(&d_alpha) {
                            let acc = &mut local[c.k];
                            let w = c.alpha * c.transmittance;
                            for ch in 0..C {
                                acc.payload[ch] += w * g[ch];
                            }
                            if c.clamped {
                                continue;
                            }
                            let s = &frame.splats[c.slot];
                            acc.opacity += da * c.falloff;
                            let (dm, dq) = alpha_to_screen(&s.mean, &s.conic, px, py, c.alpha, da);
                            acc.mean[0] += dm[0];
                            acc.mean[1] += dm[1];
                            for i in 0..3 {
                                acc.conic[i] += dq[i];
                            }
                        }
                    }
                }
                local
            })
            .collect()
    });
    let mut out = vec![SplatGrad::<C>::zero(); frame.splats.len()];
    for (tile, local) in partials.iter().enumerate() {
        for (k, &slot) in frame.tile_instances(tile as u32).iter().enumerate() {
            out[slot as usize].add(&local[k]);
        }
    }
    out
}

/// Geometry gradient of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GeomGrad {
    pub position: Vec3,
    pub rotation: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
}

/// Full symmetric-matrix gradient of the inverse covariance mapped to the
/// covariance: `G_cov = -Q G_Q Q`.
pub(crate) fn conic_to_cov(conic: &Mat2, g_conic: &[f64; 3]) -> Mat2 {
    let gq = Mat2::new(g_conic[0], g_conic[1], g_conic[1], g_conic[2]);
    -(conic * gq * conic)
}

/// Chains screen-space mean and covariance gradients back to position,
/// frame rotation and scales.
pub(crate) fn footprint_backward(
    g: &GaussianPrimitive,
    view: &CameraView,
    d_mean: &Vec2,
    g_cov: &Mat2,
) -> Result<GeomGrad> {
    let (rot, scales) = augment_thin3d(g)?;
    let w = view.rotation;
    let t = view.world_to_camera(&g.position);
    let j = perspective_jacobian(view, &t);
    let sigma = world_covariance(&rot, &scales);
    let m = w * sigma * w.transpose();

    let g_m = j.transpose() * g_cov * j;
    let g_sigma = w.transpose() * g_m * w;
    let g_j = 2.0 * g_cov * j * m;

    let (fx, fy) = (view.focal_x, view.focal_y);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = j.transpose() * d_mean;
    d_t.x += g_j[(0, 2)] * (-fx * iz2);
    d_t.y += g_j[(1, 2)] * (-fy * iz2);
    d_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let position = w.transpose() * d_t;

    let mut d_scales = [0.0; 3];
    let mut rotation = Vec3::zeros();
    for i in 0..3 {
        let r: Vec3 = rot.column(i).into();
        let gr = g_sigma * r;
        d_scales[i] = 2.0 * scales[i] * r.dot(&gr);
        rotation += r.cross(&(gr * (2.0 * scales[i] * scales[i])));
    }
    let (mut su, mut sv) = (d_scales[0], d_scales[1]);
    if g.scale_u >= g.scale_v {
        su += THIN_EPS_REL * d_scales[2];
    } else {
        sv += THIN_EPS_REL * d_scales[2];
    }
    Ok(GeomGrad {
        position,
        rotation,
        scale_u: su,
        scale_v: sv,
    })
}

/// Backpropagates a color adjoint through SH evaluation. Writes coefficient
/// gradients into `sh_out` (if given) and returns the position gradient
/// induced through the viewing direction.
pub(crate) fn color_backward(
    g: &GaussianPrimitive,
    view: &CameraView,
    g_rgb: &[f64; 3],
    sh_out: Option<&mut [[f64; 3]]>,
) -> Result<Vec3> {
    let Some(sh) = g.sh() else {
        return Ok(Vec3::zeros());
    };
    let dir = view_dir(g, view)?;
    let raw = eval_sh_raw(sh, &dir);
    let live: [f64; 3] = std::array::from_fn(|c| if raw[c] > 0.0 { g_rgb[c] } else { 0.0 });
    let n = sh.coeffs.len();
    if let Some(out) = sh_out {
        let basis = sh_basis(&dir, n);
        for k in 0..n {
            for c in 0..3 {
                out[k][c] += basis[k] * live[c];
            }
        }
    }
    let bgrad = sh_basis_grad(&dir, n);
    let mut d_dir = Vec3::zeros();
    for k in 0..n {
        let s: f64 = (0..3).map(|c| sh.coeffs[k][c] * live[c]).sum();
        d_dir += Vec3::from(bgrad[k]) * s;
    }
    let len = (g.position - view.center).norm();
    Ok((d_dir - dir * dir.dot(&d_dir)) / len)
}

fn pixel_adjoint_value(img: &Option<ChannelImage>, x: usize, y: usize, c: usize) -> f64 {
    img.as_ref().map_or(0.0, |i| i.pixel(x, y)[c])
}

fn check_adjoint(
    img: &Option<ChannelImage>,
    view: &CameraView,
    channels: usize,
    name: &str,
) -> Result<()> {
    if let Some(i) = img {
        if i.width != view.width || i.height != view.height || i.channels != channels {
            return Err(Error::Shape(format!(
                "{name} adjoint is {}x{}x{}, expected {}x{}x{channels}",
                i.width, i.height, i.channels, view.width, view.height
            )));
        }
    }
    Ok(())
}

/// The projected Gaussian behind each splat slot of a frame.
pub(crate) fn by_slot<'a>(
    projected: &'a [ProjectedGaussian],
    sources: &[usize],
) -> Vec<&'a ProjectedGaussian> {
    let max = projected.iter().map(|p| p.index + 1).max().unwrap_or(0);
    let mut lookup = vec![usize::MAX; max];
    for (i, p) in projected.iter().enumerate() {
        lookup[p.index] = i;
    }
    sources.iter().map(|&s| &projected[lookup[s]]).collect()
}

/// Reverse-mode gradient of a loss whose image adjoints are `adjoint`, using
/// the cache of the forward render of `scene`.
pub fn backward(
    renderer: &Renderer,
    scene: &Scene,
    cache: &ForwardCache,
    adjoint: &OutputAdjoint,
) -> Result<ParamGradients> {
    cache.check(scene)?;
    let view = &cache.view;
    check_adjoint(&adjoint.final_color, view, 3, "final")?;
    check_adjoint(&adjoint.base_color, view, 3, "base")?;
    check_adjoint(&adjoint.ref_color, view, 3, "reflection")?;
    check_adjoint(&adjoint.beta_map, view, 1, "beta")?;
    check_adjoint(&adjoint.normal_map, view, 3, "normal")?;
    check_adjoint(&adjoint.depth_map, view, 1, "depth")?;

    let width = view.width;

    // Branch images are needed for the blend-weight adjoint.
    let base_img = renderer.rasterize(&cache.base_frame);
    let ref_img = renderer.rasterize(&cache.ref_frame);
    let beta_at = |x: usize, y: usize| cache.beta_raw[y * width + x].clamp(0.0, 1.0);

    let base_adj = |x: usize, y: usize| -> [f64; BASE_CHANNELS] {
        let beta = beta_at(x, y);
        let mut g = [0.0; BASE_CHANNELS];
        let mut g_beta = pixel_adjoint_value(&adjoint.beta_map, x, y, 0);
        for c in 0..3 {
            let gf = pixel_adjoint_value(&adjoint.final_color, x, y, c);
            g[c] = (1.0 - beta) * gf + pixel_adjoint_value(&adjoint.base_color, x, y, c);
            g_beta += (ref_img.pixel(x, y)[c] - base_img.pixel(x, y)[c]) * gf;
        }
        let raw = cache.beta_raw[y * width + x];
        g[CH_BETA] = if (0.0..=1.0).contains(&raw) {
            g_beta
        } else {
            0.0
        };
        for c in 0..3 {
            g[CH_NORMAL + c] = pixel_adjoint_value(&adjoint.normal_map, x, y, c);
        }
        g[CH_DEPTH] = pixel_adjoint_value(&adjoint.depth_map, x, y, 0);
        g
    };
    let ref_adj = |x: usize, y: usize| -> [f64; 3] {
        let beta = beta_at(x, y);
        std::array::from_fn(|c| {
            beta * pixel_adjoint_value(&adjoint.final_color, x, y, c)
                + pixel_adjoint_value(&adjoint.ref_color, x, y, c)
        })
    };

    let base_splats = blend_backward(renderer, &cache.base_frame, base_adj);
    let ref_splats = blend_backward(renderer, &cache.ref_frame, ref_adj);

    let mut grads = ParamGradients::zeros_like(scene);

    let base_pg = by_slot(&cache.base_projected, &cache.base_frame.sources);
    let ref_pg = by_slot(&cache.ref_projected, &cache.ref_frame.sources);

    for (slot, sg) in base_splats.iter().enumerate() {
        let pg = base_pg[slot];
        let g = &scene.base[pg.index];
        let out = &mut grads.base[pg.index];
        let g_cov = conic_to_cov(&pg.conic, &sg.conic);
        let geom = footprint_backward(g, view, &Vec2::new(sg.mean[0], sg.mean[1]), &g_cov)?;
        out.position += geom.position;
        out.rotation += geom.rotation;
        out.scale_u += geom.scale_u;
        out.scale_v += geom.scale_v;
        out.opacity += sg.opacity;

        let g_rgb = [sg.payload[0], sg.payload[1], sg.payload[2]];
        out.position += color_backward(g, view, &g_rgb, Some(&mut out.sh))?;
        out.blend_weight += sg.payload[CH_BETA];

        let n = facing_normal(g, view)?;
        let g_n = Vec3::new(
            sg.payload[CH_NORMAL],
            sg.payload[CH_NORMAL + 1],
            sg.payload[CH_NORMAL + 2],
        );
        out.rotation += n.cross(&g_n);
        let depth_row: Vec3 = view.rotation.row(2).transpose();
        out.position += depth_row * sg.payload[CH_DEPTH];
    }

    for (slot, sg) in ref_splats.iter().enumerate() {
        let pg = ref_pg[slot];
        let g = &scene.reflective[pg.index];
        let g_cov = conic_to_cov(&pg.conic, &sg.conic);
        let geom = footprint_backward(g, view, &Vec2::new(sg.mean[0], sg.mean[1]), &g_cov)?;
        let out = &mut grads.reflective[pg.index];
        out.position += geom.position;
        out.rotation += geom.rotation;
        out.scale_u += geom.scale_u;
        out.scale_v += geom.scale_v;
        out.opacity += sg.opacity;
    }

    // Baked payloads: distribute each payload adjoint over the hits of its ray.
    let mut payload_adj = vec![[0.0; 3]; scene.reflective.len()];
    for (slot, sg) in ref_splats.iter().enumerate() {
        payload_adj[ref_pg[slot].index] = sg.payload;
    }
    for (i, rec) in cache.bake.records.iter().enumerate() {
        let Some(rec) = rec else { continue };
        let gp = payload_adj[i];
        if gp == [0.0; 3] {
            continue;
        }
        let mut suffix = [0.0; 3];
        for h in rec.hits.iter().rev() {
            let r = scene.reflective[h.gaussian].reflection().ok_or_else(|| {
                Error::InvalidScene("reflective list holds a base Gaussian".into())
            })?;
            let out = &mut grads.reflective[h.gaussian];
            let w = rec.gain * h.alpha * h.transmittance;
            let mut d_alpha = 0.0;
            for c in 0..3 {
                out.reflection[c] += w * gp[c];
                d_alpha += gp[c] * (r[c] - suffix[c]);
                suffix[c] = r[c] * h.alpha + (1.0 - h.alpha) * suffix[c];
            }
            out.opacity += rec.gain * h.transmittance * d_alpha * h.density;
        }
    }
    Ok(grads)
}

/// One scalar parameter of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Position(usize),
    Rotation(usize),
    ScaleU,
    ScaleV,
    Opacity,
    Sh { coeff: usize, channel: usize },
    BlendWeight,
    Reflection(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub kind: GaussianKind,
    pub index: usize,
    pub field: Field,
}

impl ParamRef {
    pub fn is_geometry(&self) -> bool {
        matches!(
            self.field,
            Field::Position(_) | Field::Rotation(_) | Field::ScaleU | Field::ScaleV
        )
    }

    /// Reflective geometry also steers the traced rays, which `backward`
    /// holds fixed; those coordinates are not expected to match differences.
    pub fn is_truncated(&self) -> bool {
        self.kind == GaussianKind::Reflective && self.is_geometry()
    }
}

/// Every scalar parameter of the scene.
pub fn enumerate_params(scene: &Scene) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for kind in [GaussianKind::Base, GaussianKind::Reflective] {
        for (index, g) in scene.gaussians(kind).iter().enumerate() {
            let mut push = |field| out.push(ParamRef { kind, index, field });
            for i in 0..3 {
                push(Field::Position(i));
            }
            for i in 0..3 {
                push(Field::Rotation(i));
            }
            push(Field::ScaleU);
            push(Field::ScaleV);
            push(Field::Opacity);
            match &g.appearance {
                Appearance::Base { sh, .. } => {
                    for coeff in 0..sh.coeffs.len() {
                        for channel in 0..3 {
                            push(Field::Sh { coeff, channel });
                        }
                    }
                    push(Field::BlendWeight);
                }
                Appearance::Reflective { .. } => {
                    for c in 0..3 {
                        push(Field::Reflection(c));
                    }
                }
            }
        }
    }
    out
}

/// Current value of a parameter; rotations are increments and read as zero.
pub fn param_value(scene: &Scene, p: &ParamRef) -> f64 {
    let g = &scene.gaussians(p.kind)[p.index];
    match (p.field, &g.appearance) {
        (Field::Position(i), _) => g.position[i],
        (Field::Rotation(_), _) => 0.0,
        (Field::ScaleU, _) => g.scale_u,
        (Field::ScaleV, _) => g.scale_v,
        (Field::Opacity, _) => g.opacity,
        (Field::Sh { coeff, channel }, Appearance::Base { sh, .. }) => sh.coeffs[coeff][channel],
        (Field::BlendWeight, Appearance::Base { blend_weight, .. }) => *blend_weight,
        (Field::Reflection(c), Appearance::Reflective { reflection }) => reflection[c],
        _ => panic!("parameter {p:?} does not exist on this Gaussian"),
    }
}

/// Copy of `scene` with one parameter moved by `delta`.
pub fn perturbed(scene: &Scene, p: &ParamRef, delta: f64) -> Scene {
    let mut s = scene.clone();
    let g = match p.kind {
        GaussianKind::Base => &mut s.base[p.index],
        GaussianKind::Reflective => &mut s.reflective[p.index],
    };
    match (p.field, &mut g.appearance) {
        (Field::Position(i), _) => g.position[i] += delta,
        (Field::Rotation(i), _) => {
            let mut w = Vec3::zeros();
            w[i] = delta;
            g.rotate_frame(&w);
        }
        (Field::ScaleU, _) => g.scale_u += delta,
        (Field::ScaleV, _) => g.scale_v += delta,
        (Field::Opacity, _) => g.opacity += delta,
        (Field::Sh { coeff, channel }, Appearance::Base { sh, .. }) => {
            sh.coeffs[coeff][channel] += delta
        }
        (Field::BlendWeight, Appearance::Base { blend_weight, .. }) => *blend_weight += delta,
        (Field::Reflection(c), Appearance::Reflective { reflection }) => reflection[c] += delta,
        _ => panic!("parameter {p:?} does not exist on this Gaussian"),
    }
    s
}

/// Step used for parameter value `theta`: `h * (1 + |theta|)`.
pub fn fd_step(theta: f64, h: f64) -> f64 {
    h * (1.0 + theta.abs())
}

/// `(f(x + step) - f(x - step)) / (2 step)`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, step: f64) -> Result<f64> {
    Ok((f(x + step)? - f(x - step)?) / (2.0 * step))
}

/// Central-difference estimates of `d loss / d p` for every `p` in `params`.
pub fn finite_diff_oracle(
    scene: &Scene,
    params: &[ParamRef],
    h: f64,
    loss: impl Fn(&Scene) -> Result<f64>,
) -> Result<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            let step = fd_step(param_value(scene, p), h);
            central_difference(|x| loss(&perturbed(scene, p, x)), 0.0, step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::forward;
    use crate::math::rotation_exp;
    use crate::sh::{ShCoeffs, SH_C0};
    use crate::synth::{default_view, gen_random, Bounds};
    use crate::trace::Phi;

    fn linear_loss(
        renderer: &Renderer,
        scene: &Scene,
        view: &CameraView,
        w: &ChannelImage,
    ) -> Result<f64> {
        let (out, _) = forward(renderer, scene, view, &Phi::default())?;
        Ok(out
            .final_color
            .data
            .iter()
            .zip(&w.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    fn weights(view: &CameraView, seed: u64) -> ChannelImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut w = ChannelImage::new(view.width, view.height, 3);
        w.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        w
    }

    #[test]
    fn quadratic_central_difference() {
        let d = central_difference(|x| Ok(x * x), 3.0, fd_step(3.0, 1e-4)).unwrap();
        assert!((d - 6.0).abs() < 1e-6);
    }

    #[test]
    fn single_base_gaussian_dc_gradient_closed_form() {
        let view = CameraView::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::zeros(),
            -Vec3::y(),
            40.0,
            32,
            32,
        )
        .unwrap();
        let g = GaussianPrimitive {
            position: Vec3::zeros(),
            tangent_u: Vec3::x(),
            tangent_v: Vec3::y(),
            scale_u: 0.3,
            scale_v: 0.2,
            opacity: 0.7,
            appearance: Appearance::Base {
                sh: ShCoeffs::constant(0, [0.3, 0.6, 0.2]),
                blend_weight: 0.4,
            },
        };
        let scene = Scene {
            sh_degree: 0,
            base: vec![g],
            reflective: vec![],
        };
        let r = Renderer::with_threads(1).unwrap();
        let (out, cache) = forward(&r, &scene, &view, &Phi::default()).unwrap();
        let n = (view.width * view.height * 3) as f64;
        let adj = ChannelImage::filled(view.width, view.height, &[1.0 / n; 3]);
        let grads = backward(&r, &scene, &cache, &OutputAdjoint::final_only(adj)).unwrap();
        // Per pixel: final = (1 - a*beta) * a * c, so d/dc0 = (1 - beta_p) * a * T * Y00 / n.
        let mut expected = 0.0;
        for (i, &beta_p) in out.beta_map.data.iter().enumerate() {
            let coverage = 1.0 - out.base_color.transmittance[i];
            expected += (1.0 - beta_p) * coverage * SH_C0 / n;
        }
        for c in 0..3 {
            assert!((grads.base[0].sh[0][c] - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let b = Bounds::cube(1.0);
        let scene = gen_random(1, 12, 6, &b);
        let view = default_view(&b, 32, 32);
        let r = Renderer::with_threads(1).unwrap();
        let (_, cache) = forward(&r, &scene, &view, &Phi::default()).unwrap();
        let adj = OutputAdjoint::final_only(ChannelImage::new(32, 32, 3));
        let grads = backward(&r, &scene, &cache, &adj).unwrap();
        assert!(grads
            .base
            .iter()
            .chain(&grads.reflective)
            .all(GaussianGrad::is_zero));
    }

    #[test]
    fn doubling_the_adjoint_doubles_gradients() {
        let b = Bounds::cube(1.0);
        let scene = gen_random(2, 12, 6, &b);
        let view = default_view(&b, 32, 32);
        let r = Renderer::with_threads(1).unwrap();
        let (_, cache) = forward(&r, &scene, &view, &Phi::default()).unwrap();
        let w = weights(&view, 3);
        let mut w2 = w.clone();
        w2.data.iter_mut().for_each(|v| *v *= 2.0);
        let g1 = backward(&r, &scene, &cache, &OutputAdjoint::final_only(w)).unwrap();
        let g2 = backward(&r, &scene, &cache, &OutputAdjoint::final_only(w2)).unwrap();
        for p in enumerate_params(&scene) {
            assert_eq!(g2.get(&p), 2.0 * g1.get(&p));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let b = Bounds::cube(1.0);
        let scene = gen_random(4, 5, 2, &b);
        let view = default_view(&b, 16, 16);
        let r = Renderer::with_threads(1).unwrap();
        let (_, cache) = forward(&r, &scene, &view, &Phi::default()).unwrap();
        let moved = perturbed(
            &scene,
            &ParamRef {
                kind: GaussianKind::Base,
                index: 0,
                field: Field::Opacity,
            },
            1e-3,
        );
        let adj = OutputAdjoint::final_only(ChannelImage::new(16, 16, 3));
        assert!(matches!(
            backward(&r, &moved, &cache, &adj),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn blend_weight_gradient_sign_follows_branch_difference() {
        let b = Bounds::cube(1.0);
        let scene = gen_random(6, 10, 6, &b);
        let view = default_view(&b, 32, 32);
        let r = Renderer::with_threads(1).unwrap();
        let (out, cache) = forward(&r, &scene, &view, &Phi::default()).unwrap();
        let adj = ChannelImage::filled(32, 32, &[1.0; 3]);
        let grads = backward(&r, &scene, &cache, &OutputAdjoint::final_only(adj)).unwrap();
        let total: f64 = out
            .ref_color
            .data
            .iter()
            .zip(&out.base_color.data)
            .map(|(r, b)| r - b)
            .sum();
        let g_beta: f64 = grads.base.iter().map(|g| g.blend_weight).sum();
        if total.abs() > 1e-6 {
            assert_eq!(total.signum(), g_beta.signum());
        }
    }

    #[test]
    fn screen_space_geometry_chain_matches_differences() {
        // Checks the projection chain in isolation on smooth functions of the footprint.
        let view = CameraView::look_at(
            Vec3::new(0.3, -0.2, -5.0),
            Vec3::zeros(),
            -Vec3::y(),
            80.0,
            64,
            64,
        )
        .unwrap();
        let rot = rotation_exp(&Vec3::new(0.4, -0.3, 0.9));
        let g = GaussianPrimitive {
            position: Vec3::new(0.2, 0.1, 0.3),
            tangent_u: rot.column(0).into(),
            tangent_v: rot.column(1).into(),
            scale_u: 0.4,
            scale_v: 0.25,
            opacity: 0.5,
            appearance: Appearance::Base {
                sh: ShCoeffs::zeros(0),
                blend_weight: 0.0,
            },
        };
        let d_mean = Vec2::new(0.7, -0.4);
        let g_cov = Mat2::new(0.3, -0.2, -0.2, 0.5);
        let f = |g: &GaussianPrimitive| {
            let fp = crate::projection::footprint(g, &view).unwrap().unwrap();
            d_mean.dot(&fp.mean) + (g_cov.component_mul(&fp.cov)).sum()
        };
        let an = footprint_backward(&g, &view, &d_mean, &g_cov).unwrap();
        let scene = Scene {
            sh_degree: 0,
            base: vec![g.clone()],
            reflective: vec![],
        };
        for field in [
            Field::Position(0),
            Field::Position(1),
            Field::Position(2),
            Field::Rotation(0),
            Field::Rotation(1),
            Field::Rotation(2),
            Field::ScaleU,
            Field::ScaleV,
        ] {
            let p = ParamRef {
                kind: GaussianKind::Base,
                index: 0,
                field,
            };
            let fd = finite_diff_oracle(&scene, &[p], 1e-6, |s| Ok(f(&s.base[0]))).unwrap()[0];
            let a = match field {
                Field::Position(i) => an.position[i],
                Field::Rotation(i) => an.rotation[i],
                Field::ScaleU => an.scale_u,
                _ => an.scale_v,
            };
            assert!(relative_error(a, fd, 1e-6) < 1e-5, "{field:?}: {a} vs {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_small_scene() {
        let b = Bounds::cube(1.0);
        let scene = gen_random(11, 6, 3, &b);
        let view = default_view(&b, 32, 32);
        let r = Renderer::with_threads(1).unwrap();
        let w = weights(&view, 12);
        let (_, cache) = forward(&r, &scene, &view, &Phi::default()).unwrap();
        let grads = backward(&r, &scene, &cache, &OutputAdjoint::final_only(w.clone())).unwrap();
        assert!(grads.is_finite());
        let params: Vec<_> = enumerate_params(&scene)
            .into_iter()
            .filter(|p| !p.is_truncated())
            .collect();
        let fd =
            finite_diff_oracle(&scene, &params, 1e-4, |s| linear_loss(&r, s, &view, &w)).unwrap();
        let good = params
            .iter()
            .zip(&fd)
            .filter(|(p, f)| relative_error(grads.get(p), **f, 1e-8) <= 1e-3)
            .count();
        assert!(
            good as f64 >= 0.9 * params.len() as f64,
            "{good}/{}",
            params.len()
        );
    }
}
