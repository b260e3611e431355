//! Hybrid compositing: base branch, baked reflective branch, splatted blend
//! weights, and the final per-pixel mix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::projection::ProjectedGaussian;
use crate::raster::{bin_and_sort, Branch, ChannelImage, Renderer, TileFrame};
use crate::scene::{normal_of, CameraView, GaussianPrimitive, Scene};
use crate::sh::eval_sh;
use crate::trace::{bake_all, BakeTable, Bvh, Phi, TraceStats};

/// Channels of the base-branch payload: RGB, blend weight, normal, depth.
pub const BASE_CHANNELS: usize = 8;
pub(crate) const CH_BETA: usize = 3;
pub(crate) const CH_NORMAL: usize = 4;
pub(crate) const CH_DEPTH: usize = 7;

/// Unit direction from the camera center to the Gaussian center.
pub fn view_dir(g: &GaussianPrimitive, view: &CameraView) -> Result<Vec3> {
    let v = g.position - view.center;
    let len = v.norm();
    if len == 0.0 {
        return Err(Error::ZeroDirection);
    }
    Ok(v / len)
}

/// SH color of a base Gaussian as seen from `view`.
pub fn base_color(g: &GaussianPrimitive, view: &CameraView) -> Result<[f64; 3]> {
    let sh = g.sh().ok_or_else(|| {
        Error::InvalidArgument("base color requested for a reflective Gaussian".into())
    })?;
    eval_sh(sh, &view_dir(g, view)?)
}

/// The Gaussian's normal, flipped if needed to face the camera.
pub fn facing_normal(g: &GaussianPrimitive, view: &CameraView) -> Result<Vec3> {
    let n = normal_of(g)?;
    Ok(if n.dot(&(view.center - g.position)) < 0.0 {
        -n
    } else {
        n
    })
}

pub fn base_payload(g: &GaussianPrimitive, view: &CameraView) -> Result<[f64; BASE_CHANNELS]> {
    let rgb = base_color(g, view)?;
    let n = facing_normal(g, view)?;
    let depth = view.world_to_camera(&g.position).z;
    let beta = g.blend_weight().unwrap_or(0.0);
    Ok([rgb[0], rgb[1], rgb[2], beta, n.x, n.y, n.z, depth])
}

/// `(1 - beta) * base + beta * reflection`, pixel by pixel.
pub fn composite(
    base: &ChannelImage,
    reflection: &ChannelImage,
    beta: &ChannelImage,
) -> Result<ChannelImage> {
    if !base.same_shape(reflection) {
        return Err(Error::Shape(format!(
            "base is {}x{}x{}, reflection is {}x{}x{}",
            base.width,
            base.height,
            base.channels,
            reflection.width,
            reflection.height,
            reflection.channels
        )));
    }
    if beta.width != base.width || beta.height != base.height || beta.channels != 1 {
        return Err(Error::Shape(format!(
            "beta map is {}x{}x{}, expected {}x{}x1",
            beta.width, beta.height, beta.channels, base.width, base.height
        )));
    }
    let mut out = ChannelImage::new(base.width, base.height, base.channels);
    let c = base.channels;
    for (i, &b) in beta.data.iter().enumerate() {
        for k in 0..c {
            let j = i * c + k;
            out.data[j] = (1.0 - b) * base.data[j] + b * reflection.data[j];
        }
    }
    out.transmittance.clone_from(&base.transmittance);
    Ok(out)
}

/// Per-pixel blend weight, splatted over the base Gaussians.
pub fn splat_beta(renderer: &Renderer, scene: &Scene, view: &CameraView) -> Result<ChannelImage> {
    view.validate()?;
    let grid = renderer.grid(view)?;
    let projected = renderer.project_all(&scene.base, view, &grid)?;
    let payloads: Vec<[f64; 1]> = projected
        .iter()
        .map(|pg| [scene.base[pg.index].blend_weight().unwrap_or(0.0)])
        .collect();
    let frame = bin_and_sort(&projected, &payloads, &grid);
    let mut img = renderer.rasterize(&frame);
    img.data.iter_mut().for_each(|b| *b = b.clamp(0.0, 1.0));
    Ok(img)
}

/// Everything one hybrid render produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub base_color: ChannelImage,
    pub ref_color: ChannelImage,
    pub beta_map: ChannelImage,
    /// Splatted (unnormalized) camera-facing normals.
    pub normal_map: ChannelImage,
    /// Alpha-weighted camera depth (not divided by coverage).
    pub depth_map: ChannelImage,
    pub final_color: ChannelImage,
    pub stats: TraceStats,
}

impl RenderOutput {
    pub fn branch(&self, branch: Branch) -> &ChannelImage {
        match branch {
            Branch::Base => &self.base_color,
            Branch::Reflective => &self.ref_color,
        }
    }
}

/// Which image a render command or binding should return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    Final,
    Base,
    Ref,
    Beta,
    Normal,
}

impl std::str::FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "final" => OutputMode::Final,
            "base" => OutputMode::Base,
            "ref" => OutputMode::Ref,
            "beta" => OutputMode::Beta,
            "normal" => OutputMode::Normal,
            other => return Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        })
    }
}

impl RenderOutput {
    pub fn image(&self, mode: OutputMode) -> &ChannelImage {
        match mode {
            OutputMode::Final => &self.final_color,
            OutputMode::Base => &self.base_color,
            OutputMode::Ref => &self.ref_color,
            OutputMode::Beta => &self.beta_map,
            OutputMode::Normal => &self.normal_map,
        }
    }
}

/// State kept from a forward render so gradients can be computed later.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) fingerprint: u64,
    pub(crate) view: CameraView,
    pub(crate) phi: Phi,
    pub(crate) base_projected: Vec<ProjectedGaussian>,
    pub(crate) base_frame: TileFrame<BASE_CHANNELS>,
    pub(crate) ref_projected: Vec<ProjectedGaussian>,
    pub(crate) ref_frame: TileFrame<3>,
    pub(crate) bake: BakeTable,
    /// Unclamped blend-weight map, before clamping to `[0, 1]`.
    pub(crate) beta_raw: Vec<f64>,
}

impl ForwardCache {
    pub fn view(&self) -> &CameraView {
        &self.view
    }

    pub fn phi(&self) -> &Phi {
        &self.phi
    }

    pub fn bake(&self) -> &BakeTable {
        &self.bake
    }

    /// Checks that this cache was produced from exactly `scene`.
    pub fn check(&self, scene: &Scene) -> Result<()> {
        if self.fingerprint != scene.fingerprint() {
            return Err(Error::StaleCache);
        }
        Ok(())
    }
}

/// Full hybrid render that also returns the cache needed by `backward`.
pub fn forward(
    renderer: &Renderer,
    scene: &Scene,
    view: &CameraView,
    phi: &Phi,
) -> Result<(RenderOutput, ForwardCache)> {
    view.validate()?;
    let grid = renderer.grid(view)?;

    let base_projected = renderer.project_all(&scene.base, view, &grid)?;
    let base_payloads: Vec<[f64; BASE_CHANNELS]> = base_projected
        .iter()
        .map(|pg| base_payload(&scene.base[pg.index], view))
        .collect::<Result<_>>()?;
    let base_frame = bin_and_sort(&base_projected, &base_payloads, &grid);
    let base_img = renderer.rasterize(&base_frame);

    let bvh = Bvh::build(&scene.reflective);
    let bake = bake_all(renderer, scene, view, &bvh, phi)?;
    let ref_projected = renderer.project_all(&scene.reflective, view, &grid)?;
    let ref_payloads: Vec<[f64; 3]> = ref_projected
        .iter()
        .map(|pg| bake.payloads[pg.index])
        .collect();
    let ref_frame = bin_and_sort(&ref_projected, &ref_payloads, &grid);
    let ref_color = renderer.rasterize(&ref_frame);

    let base_color = base_img.select(0, 3);
    let mut beta_map = base_img.select(CH_BETA, 1);
    let beta_raw = beta_map.data.clone();
    beta_map
        .data
        .iter_mut()
        .for_each(|b| *b = b.clamp(0.0, 1.0));
    let normal_map = base_img.select(CH_NORMAL, 3);
    let depth_map = base_img.select(CH_DEPTH, 1);
    let final_color = composite(&base_color, &ref_color, &beta_map)?;

    let out = RenderOutput {
        base_color,
        ref_color,
        beta_map,
        normal_map,
        depth_map,
        final_color,
        stats: bake.stats,
    };
    let cache = ForwardCache {
        fingerprint: scene.fingerprint(),
        view: view.clone(),
        phi: *phi,
        base_projected,
        base_frame,
        ref_projected,
        ref_frame,
        bake,
        beta_raw,
    };
    Ok((out, cache))
}

/// Hybrid render with the default reflection weighting.
pub fn render(renderer: &Renderer, scene: &Scene, view: &CameraView) -> Result<RenderOutput> {
    Ok(forward(renderer, scene, view, &Phi::default())?.0)
}
