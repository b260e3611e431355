//! Software-pipelined tile blending.
//!
//! The tile's instance list is processed in fixed-size chunks through three
//! overlapping stages. At step `i` the kernel
//!
//! 1. fetches the splat indices of chunk `i` (and issues cache prefetches for
//!    the records they point to),
//! 2. gathers the attribute records of chunk `i - 1` into a contiguous
//!    buffer,
//! 3. blends chunk `i - 2` into every still-active pixel of the tile.
//!
//! Each pixel still sees the instances in exactly the serial order with the
//! same arithmetic, so the output is bit-identical to [`super::blend_tile`].

use super::prefetch::prefetch_read;
use super::{blend_step, pixel_center, splat_alpha, SplatRecord, TileBlend, TileFrame};

pub const DEFAULT_CHUNK: usize = 32;

pub fn blend_tile_pipelined<const C: usize>(
    frame: &TileFrame<C>,
    tile: u32,
    chunk: usize,
) -> TileBlend<C> {
    assert!(chunk > 0, "chunk size must be positive");
    let (x0, y0, x1, y1) = frame.grid.pixel_bounds(tile);
    let w = x1 - x0;
    let n_pix = w * (y1 - y0);
    let centers: Vec<(f64, f64)> = (0..n_pix)
        .map(|k| pixel_center(x0 + k % w, y0 + k / w))
        .collect();
    let mut color = vec![[0.0; C]; n_pix];
    let mut transmittance = vec![1.0; n_pix];
    // Indices of pixels still accumulating, compacted as pixels saturate.
    let mut active: Vec<u32> = (0..n_pix as u32).collect();

    let instances = frame.tile_instances(tile);
    let n_chunks = instances.len().div_ceil(chunk);
    let mut index_ring: [Vec<u32>; 2] = [Vec::with_capacity(chunk), Vec::with_capacity(chunk)];
    let mut attr_ring: [Vec<SplatRecord<C>>; 2] =
        [Vec::with_capacity(chunk), Vec::with_capacity(chunk)];

    for step in 0..n_chunks + 2 {
        if step < n_chunks {
            let slot = &mut index_ring[step % 2];
            slot.clear();
            let lo = step * chunk;
            slot.extend_from_slice(&instances[lo..(lo + chunk).min(instances.len())]);
            for &i in slot.iter() {
                prefetch_read(&frame.splats[i as usize]);
            }
        }
        if (1..=n_chunks).contains(&step) {
            let s = (step - 1) % 2;
            let (idx, attrs) = (&index_ring[s], &mut attr_ring[s]);
            attrs.clear();
            attrs.extend(idx.iter().map(|&i| frame.splats[i as usize]));
        }
        if step >= 2 {
            let attrs = &attr_ring[(step - 2) % 2];
            active.retain(|&p| {
                let p = p as usize;
                let (px, py) = centers[p];
                let (acc, t) = (&mut color[p], &mut transmittance[p]);
                for s in attrs {
                    let Some(alpha) = splat_alpha(s, px, py) else {
                        continue;
                    };
                    if blend_step(acc, t, &s.payload, alpha) {
                        return false;
                    }
                }
                true
            });
            if active.is_empty() {
                break;
            }
        }
    }
    TileBlend {
        tile,
        color,
        transmittance,
    }
}
