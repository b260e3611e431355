//! Tile binning, depth sorting and front-to-back alpha blending.

mod pipelined;
mod prefetch;

pub use pipelined::blend_tile_pipelined;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consts::{ALPHA_MAX, DEFAULT_TILE_SIZE, MIN_ALPHA, T_STOP};
use crate::error::{Error, Result};
use crate::projection::{project_with, ProjectedGaussian, Projection, TileCulling, TileGrid};
use crate::scene::{CameraView, GaussianKind, GaussianPrimitive};

/// Attributes a tile needs per splat instance. `conic` holds the upper
/// triangle `(a, b, c)` of the inverse 2D covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatRecord<const C: usize> {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub payload: [f64; C],
}

impl<const C: usize> SplatRecord<C> {
    pub fn from_projected(pg: &ProjectedGaussian, payload: [f64; C]) -> Self {
        Self {
            mean: [pg.mean.x, pg.mean.y],
            conic: [pg.conic[(0, 0)], pg.conic[(0, 1)], pg.conic[(1, 1)]],
            opacity: pg.opacity,
            payload,
        }
    }
}

/// Gaussian exponent at pixel-space point `(px, py)`.
#[inline(always)]
pub(crate) fn splat_power(mean: &[f64; 2], conic: &[f64; 3], px: f64, py: f64) -> f64 {
    let dx = px - mean[0];
    let dy = py - mean[1];
    -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy)
}

/// Clamped alpha of one splat at a pixel, or `None` when below `MIN_ALPHA`.
#[inline(always)]
pub(crate) fn splat_alpha<const C: usize>(s: &SplatRecord<C>, px: f64, py: f64) -> Option<f64> {
    let alpha = (s.opacity * splat_power(&s.mean, &s.conic, px, py).exp()).min(ALPHA_MAX);
    (alpha >= MIN_ALPHA).then_some(alpha)
}

/// One blend step; returns `true` once the pixel is saturated.
#[inline(always)]
pub(crate) fn blend_step<const C: usize>(
    acc: &mut [f64; C],
    t: &mut f64,
    payload: &[f64; C],
    alpha: f64,
) -> bool {
    let w = alpha * *t;
    for c in 0..C {
        acc[c] += payload[c] * w;
    }
    *t *= 1.0 - alpha;
    *t < T_STOP
}

/// Pixel-space center of integer pixel `(x, y)`.
#[inline(always)]
pub fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

/// Per-tile, depth-sorted instance lists over a shared splat table.
#[derive(Debug, Clone)]
pub struct TileFrame<const C: usize> {
    pub grid: TileGrid,
    pub splats: Vec<SplatRecord<C>>,
    /// Source index (into the kind's Gaussian list) of each splat.
    pub sources: Vec<usize>,
    pub depths: Vec<f64>,
    offsets: Vec<usize>,
    instances: Vec<u32>,
}

impl<const C: usize> TileFrame<C> {
    pub fn tile_instances(&self, tile: u32) -> &[u32] {
        let t = tile as usize;
        &self.instances[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }
}

/// Bins projected Gaussians into their tiles; every tile list is sorted by
/// ascending depth with ties broken by ascending source index.
pub fn bin_and_sort<const C: usize>(
    projected: &[ProjectedGaussian],
    payloads: &[[f64; C]],
    grid: &TileGrid,
) -> TileFrame<C> {
    assert_eq!(projected.len(), payloads.len());
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].index.cmp(&projected[b].index))
    });

    let splats = order
        .iter()
        .map(|&i| SplatRecord::from_projected(&projected[i], payloads[i]))
        .collect();
    let sources = order.iter().map(|&i| projected[i].index).collect();
    let depths = order.iter().map(|&i| projected[i].depth).collect();

    let n_tiles = grid.tile_count();
    let mut counts = vec![0usize; n_tiles + 1];
    for pg in projected {
        for &t in &pg.tiles {
            counts[t as usize + 1] += 1;
        }
    }
    for t in 0..n_tiles {
        counts[t + 1] += counts[t];
    }
    let offsets = counts.clone();
    let mut cursor = counts;
    let mut instances = vec![0u32; offsets[n_tiles]];
    for (slot, &i) in order.iter().enumerate() {
        for &t in &projected[i].tiles {
            let c = &mut cursor[t as usize];
            instances[*c] = slot as u32;
            *c += 1;
        }
    }
    TileFrame {
        grid: *grid,
        splats,
        sources,
        depths,
        offsets,
        instances,
    }
}

/// Blended values and final transmittance for the pixels of one tile,
/// row-major over the tile's (possibly clipped) pixel rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBlend<const C: usize> {
    pub tile: u32,
    pub color: Vec<[f64; C]>,
    pub transmittance: Vec<f64>,
}

/// Straightforward per-pixel front-to-back blend over the tile's instances.
pub fn blend_tile<const C: usize>(frame: &TileFrame<C>, tile: u32) -> TileBlend<C> {
    let (x0, y0, x1, y1) = frame.grid.pixel_bounds(tile);
    let instances = frame.tile_instances(tile);
    let n = (x1 - x0) * (y1 - y0);
    let mut color = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = pixel_center(x, y);
            let mut acc = [0.0; C];
            let mut t = 1.0;
            for &i in instances {
                let s = &frame.splats[i as usize];
                let Some(alpha) = splat_alpha(s, px, py) else {
                    continue;
                };
                if blend_step(&mut acc, &mut t, &s.payload, alpha) {
                    break;
                }
            }
            color.push(acc);
            transmittance.push(t);
        }
    }
    TileBlend {
        tile,
        color,
        transmittance,
    }
}

/// Which branch of the hybrid model to splat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Base,
    Reflective,
}

impl Branch {
    pub fn kind(self) -> GaussianKind {
        match self {
            Branch::Base => GaussianKind::Base,
            Branch::Reflective => GaussianKind::Reflective,
        }
    }
}

/// A `width x height` image with `channels` values per pixel and the final
/// transmittance of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl ChannelImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            transmittance: vec![1.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ChannelImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Keeps channels `[start, start + count)`.
    pub fn select(&self, start: usize, count: usize) -> ChannelImage {
        let mut out = ChannelImage::new(self.width, self.height, count);
        for (dst, src) in out
            .data
            .chunks_mut(count)
            .zip(self.data.chunks(self.channels))
        {
            dst.copy_from_slice(&src[start..start + count]);
        }
        out.transmittance.clone_from(&self.transmittance);
        out
    }

    pub fn max_abs_diff(&self, other: &ChannelImage) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn psnr(&self, reference: &ChannelImage) -> Result<f64> {
        if !self.same_shape(reference) {
            return Err(Error::Shape("psnr operands differ in shape".into()));
        }
        let mse = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len().max(1) as f64;
        Ok(if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        })
    }
}

/// Rendering knobs. `threads == 0` means "use rayon's default".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub tile_size: usize,
    pub threads: usize,
    pub pipelined: bool,
    pub chunk: usize,
    pub culling: TileCulling,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            threads: 0,
            pipelined: true,
            chunk: pipelined::DEFAULT_CHUNK,
            culling: TileCulling::Precise,
        }
    }
}

/// Owns the worker pool; every render goes through `Renderer::install`.
pub struct Renderer {
    pub options: RenderOptions,
    pool: rayon::ThreadPool,
}

impl Renderer {
    pub fn new(options: RenderOptions) -> Result<Self> {
        if options.chunk == 0 {
            return Err(Error::InvalidArgument(
                "pipeline chunk size must be positive".into(),
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(Self { options, pool })
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        Self::new(RenderOptions {
            threads,
            ..RenderOptions::default()
        })
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn grid(&self, view: &CameraView) -> Result<TileGrid> {
        TileGrid::for_view(view, self.options.tile_size)
    }

    /// Projects every Gaussian in `list` and keeps the visible ones.
    pub fn project_all(
        &self,
        list: &[GaussianPrimitive],
        view: &CameraView,
        grid: &TileGrid,
    ) -> Result<Vec<ProjectedGaussian>> {
        let culling = self.options.culling;
        let projected: Vec<Projection> = self.install(|| {
            list.par_iter()
                .enumerate()
                .map(|(i, g)| project_with(g, i, view, grid, culling))
                .collect::<Result<_>>()
        })?;
        Ok(projected
            .into_iter()
            .filter_map(Projection::visible)
            .collect())
    }

    /// Blends every tile of `frame` into a `C`-channel image.
    pub fn rasterize<const C: usize>(&self, frame: &TileFrame<C>) -> ChannelImage {
        let grid = frame.grid;
        let (pipelined, chunk) = (self.options.pipelined, self.options.chunk);
        let tiles: Vec<TileBlend<C>> = self.install(|| {
            (0..grid.tile_count() as u32)
                .into_par_iter()
                .map(|t| {
                    if pipelined {
                        blend_tile_pipelined(frame, t, chunk)
                    } else {
                        blend_tile(frame, t)
                    }
                })
                .collect()
        });
        let mut img = ChannelImage::new(grid.width, grid.height, C);
        for tb in &tiles {
            let (x0, y0, x1, _) = grid.pixel_bounds(tb.tile);
            let w = x1 - x0;
            for (k, (c, t)) in tb.color.iter().zip(&tb.transmittance).enumerate() {
                let (x, y) = (x0 + k % w, y0 + k / w);
                img.pixel_mut(x, y).copy_from_slice(c);
                img.transmittance[y * grid.width + x] = *t;
            }
        }
        img
    }

    /// Splats one branch into an RGB image. The reflective branch bakes its
    /// payloads first (one traced ray per visible reflective Gaussian).
    pub fn render_channel(
        &self,
        scene: &crate::scene::Scene,
        view: &CameraView,
        branch: Branch,
    ) -> Result<ChannelImage> {
        view.validate()?;
        let grid = self.grid(view)?;
        let list = scene.gaussians(branch.kind());
        let projected = self.project_all(list, view, &grid)?;
        let payloads: Vec<[f64; 3]> = match branch {
            Branch::Base => projected
                .iter()
                .map(|pg| crate::compositor::base_color(&list[pg.index], view))
                .collect::<Result<_>>()?,
            Branch::Reflective => {
                let bvh = crate::trace::Bvh::build(&scene.reflective);
                let baked =
                    crate::trace::bake_all(self, scene, view, &bvh, &crate::trace::Phi::default())?;
                projected
                    .iter()
                    .map(|pg| baked.payloads[pg.index])
                    .collect()
            }
        };
        let frame = bin_and_sort(&projected, &payloads, &grid);
        Ok(self.rasterize(&frame))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{Mat2, Vec2};

    pub(crate) fn fake(
        index: usize,
        mean: (f64, f64),
        depth: f64,
        opacity: f64,
        tiles: Vec<u32>,
    ) -> ProjectedGaussian {
        ProjectedGaussian {
            index,
            kind: GaussianKind::Base,
            mean: Vec2::new(mean.0, mean.1),
            cov: Mat2::identity() * 4.0,
            conic: Mat2::identity() * 0.25,
            depth,
            opacity,
            aabb: [0.0; 4],
            tiles,
        }
    }

    #[test]
    fn disjoint_tiles_hold_one_instance_each() {
        let grid = TileGrid::new(32, 16, 16).unwrap();
        let p = vec![
            fake(0, (8.0, 8.0), 1.0, 0.5, vec![0]),
            fake(1, (24.0, 8.0), 1.0, 0.5, vec![1]),
        ];
        let frame = bin_and_sort(&p, &[[1.0], [2.0]], &grid);
        assert_eq!(frame.tile_instances(0).len(), 1);
        assert_eq!(frame.tile_instances(1).len(), 1);
        assert_eq!(frame.sources[frame.tile_instances(1)[0] as usize], 1);
    }

    #[test]
    fn same_tile_sorted_by_depth_then_index() {
        let grid = TileGrid::new(16, 16, 16).unwrap();
        let p = vec![
            fake(0, (8.0, 8.0), 2.0, 0.5, vec![0]),
            fake(1, (8.0, 8.0), 1.0, 0.5, vec![0]),
            fake(2, (8.0, 8.0), 1.0, 0.5, vec![0]),
        ];
        let frame = bin_and_sort(&p, &[[0.0]; 3], &grid);
        let order: Vec<_> = frame
            .tile_instances(0)
            .iter()
            .map(|&i| frame.sources[i as usize])
            .collect();
        assert_eq!(order, vec![1, 2, 0]);
        let depths: Vec<_> = frame
            .tile_instances(0)
            .iter()
            .map(|&i| frame.depths[i as usize])
            .collect();
        assert_eq!(depths, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn single_gaussian_at_its_mean() {
        let grid = TileGrid::new(16, 16, 16).unwrap();
        let p = vec![fake(0, (4.5, 4.5), 1.0, 0.8, vec![0])];
        let frame = bin_and_sort(&p, &[[1.0, 0.0, 0.0]], &grid);
        let tb = blend_tile(&frame, 0);
        let k = 4 * 16 + 4;
        assert_eq!(tb.color[k], [0.8, 0.0, 0.0]);
        assert!((tb.transmittance[k] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_coincident_half_alpha_gaussians() {
        let grid = TileGrid::new(16, 16, 16).unwrap();
        let p = vec![
            fake(0, (4.5, 4.5), 1.0, 0.5, vec![0]),
            fake(1, (4.5, 4.5), 2.0, 0.5, vec![0]),
        ];
        let frame = bin_and_sort(&p, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &grid);
        let tb = blend_tile(&frame, 0);
        let k = 4 * 16 + 4;
        assert_eq!(tb.color[k], [0.5, 0.25, 0.0]);
        assert_eq!(tb.transmittance[k], 0.25);
    }

    #[test]
    fn saturation_stops_accumulation() {
        let grid = TileGrid::new(16, 16, 16).unwrap();
        let p: Vec<_> = (0..5)
            .map(|i| fake(i, (4.5, 4.5), i as f64, 1.0, vec![0]))
            .collect();
        let frame = bin_and_sort(&p, &[[1.0]; 5], &grid);
        let tb = blend_tile(&frame, 0);
        let k = 4 * 16 + 4;
        // 0.99 clamp: T = 1e-2 after one, 1e-4 after two (not below), 1e-6 after three.
        assert!((tb.transmittance[k] - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn empty_tile_is_transparent() {
        let grid = TileGrid::new(20, 20, 16).unwrap();
        let frame = bin_and_sort::<3>(&[], &[], &grid);
        for t in 0..grid.tile_count() as u32 {
            let tb = blend_tile(&frame, t);
            assert!(tb.color.iter().all(|c| *c == [0.0; 3]));
            assert!(tb.transmittance.iter().all(|&t| t == 1.0));
        }
    }

    #[test]
    fn channel_image_select_and_psnr() {
        let a = ChannelImage::filled(4, 3, &[0.1, 0.2, 0.3, 0.4]);
        let b = a.select(1, 2);
        assert_eq!(b.pixel(3, 2), &[0.2, 0.3]);
        assert_eq!(b.psnr(&b).unwrap(), f64::INFINITY);
        let c = ChannelImage::filled(4, 3, &[0.3, 0.4]);
        assert!((b.psnr(&c).unwrap() - 20.0 * (1.0 / 0.1f64).log10()).abs() < 1e-9);
    }
}
