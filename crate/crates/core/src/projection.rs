//! Screen-space projection of 2D Gaussians and exact tile assignment.
//!
//! A surfel is lifted to a thin 3D Gaussian (`R = [t_u, t_v, t_u x t_v]`,
//! `S = (s_u, s_v, eps)`), projected with the first-order perspective
//! Jacobian, and its cutoff ellipse is intersected analytically with the
//! tile grid one tile row at a time.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::consts::{LOWPASS_PX2, MIN_ALPHA, NEAR_PLANE, THIN_EPS_REL};
use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::scene::{normal_of, CameraView, GaussianKind, GaussianPrimitive};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Rotation and scales of the thin 3D Gaussian enclosing a surfel.
pub fn augment_thin3d(g: &GaussianPrimitive) -> Result<(Mat3, Vec3)> {
    let n = normal_of(g)?;
    let rot = Mat3::from_columns(&[g.tangent_u, g.tangent_v, n]);
    let eps = THIN_EPS_REL * g.max_scale();
    Ok((rot, Vec3::new(g.scale_u, g.scale_v, eps)))
}

/// `R diag(S^2) R^T`.
pub fn world_covariance(rot: &Mat3, scales: &Vec3) -> Mat3 {
    let m = rot * Mat3::from_diagonal(scales);
    m * m.transpose()
}

/// Perspective Jacobian of `(fx x/z + cx, fy y/z + cy)` at camera point `t`.
pub fn perspective_jacobian(view: &CameraView, t: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        view.focal_x * iz,
        0.0,
        -view.focal_x * t.x * iz2,
        0.0,
        view.focal_y * iz,
        -view.focal_y * t.y * iz2,
    )
}

/// Mean, covariance and depth of a Gaussian's screen-space footprint before
/// any culling other than the near plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub mean: Vec2,
    pub cov: Mat2,
    pub depth: f64,
}

pub fn footprint(g: &GaussianPrimitive, view: &CameraView) -> Result<Option<Footprint>> {
    let (rot, scales) = augment_thin3d(g)?;
    let t = view.world_to_camera(&g.position);
    if t.z <= NEAR_PLANE {
        return Ok(None);
    }
    let j = perspective_jacobian(view, &t);
    let jw = j * view.rotation;
    let sigma = world_covariance(&rot, &scales);
    let mut cov = jw * sigma * jw.transpose();
    cov[(0, 0)] += LOWPASS_PX2;
    cov[(1, 1)] += LOWPASS_PX2;
    // Exact symmetry so both triangles carry identical bits.
    cov[(1, 0)] = cov[(0, 1)];
    let mean = Vec2::new(
        view.focal_x * t.x / t.z + view.principal_x,
        view.focal_y * t.y / t.z + view.principal_y,
    );
    Ok(Some(Footprint {
        mean,
        cov,
        depth: t.z,
    }))
}

/// The region where a Gaussian's weighted density reaches `min_alpha`:
/// `{ x : (x - center)^T conic (x - center) <= threshold }`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: Vec2,
    pub cov: Mat2,
    pub conic: Mat2,
    pub threshold: f64,
}

impl Ellipse {
    pub fn contains(&self, p: &Vec2) -> bool {
        let d = p - self.center;
        (d.transpose() * self.conic * d)[0] <= self.threshold
    }

    /// Axis-aligned bounds `(x_min, y_min, x_max, y_max)`.
    pub fn aabb(&self) -> [f64; 4] {
        let hx = (self.threshold * self.cov[(0, 0)]).sqrt();
        let hy = (self.threshold * self.cov[(1, 1)]).sqrt();
        [
            self.center.x - hx,
            self.center.y - hy,
            self.center.x + hx,
            self.center.y + hy,
        ]
    }
}

pub fn ellipse_from(mean: Vec2, cov: Mat2, opacity: f64, min_alpha: f64) -> Result<Ellipse> {
    if opacity <= min_alpha {
        return Err(Error::EmptyEllipse { opacity, min_alpha });
    }
    let conic = inverse_sym2(&cov);
    Ok(Ellipse {
        center: mean,
        cov,
        conic,
        threshold: 2.0 * (opacity / min_alpha).ln(),
    })
}

pub fn cutoff_ellipse(pg: &ProjectedGaussian, min_alpha: f64) -> Result<Ellipse> {
    ellipse_from(pg.mean, pg.cov, pg.opacity, min_alpha)
}

/// Inverse of a symmetric 2x2 matrix, returned exactly symmetric.
pub fn inverse_sym2(m: &Mat2) -> Mat2 {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(0, 1)];
    let inv = 1.0 / det;
    let off = -m[(0, 1)] * inv;
    Mat2::new(m[(1, 1)] * inv, off, off, m[(0, 0)] * inv)
}

/// Screen tiles covering `[0, width) x [0, height)`; edge tiles may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile_size: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::InvalidArgument("tile size must be positive".into()));
        }
        Ok(Self {
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
            width,
            height,
        })
    }

    pub fn for_view(view: &CameraView, tile_size: usize) -> Result<Self> {
        Self::new(view.width, view.height, tile_size)
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn tile_id(&self, row: usize, col: usize) -> u32 {
        (row * self.tiles_x + col) as u32
    }

    pub fn row_col(&self, id: u32) -> (usize, usize) {
        let id = id as usize;
        (id / self.tiles_x, id % self.tiles_x)
    }

    /// Pixel rectangle of a tile, `(x0, y0, x1, y1)` exclusive of `x1, y1`.
    pub fn pixel_bounds(&self, id: u32) -> (usize, usize, usize, usize) {
        let (row, col) = self.row_col(id);
        let x0 = col * self.tile_size;
        let y0 = row * self.tile_size;
        (
            x0,
            y0,
            (x0 + self.tile_size).min(self.width),
            (y0 + self.tile_size).min(self.height),
        )
    }

    /// Closed tile rectangle in continuous pixel coordinates, clipped to the image.
    pub fn rect(&self, id: u32) -> [f64; 4] {
        let (x0, y0, x1, y1) = self.pixel_bounds(id);
        [x0 as f64, y0 as f64, x1 as f64, y1 as f64]
    }

    /// Index range of tiles along one axis whose closed, clipped interval meets `[lo, hi]`.
    fn axis_span(&self, lo: f64, hi: f64, count: usize, extent: usize) -> Option<(usize, usize)> {
        if !(lo <= hi) || hi < 0.0 || lo > extent as f64 || count == 0 {
            return None;
        }
        let ts = self.tile_size as f64;
        let first = ((lo / ts) - 1.0).ceil().max(0.0);
        let last = (hi / ts).floor().min((count - 1) as f64);
        if first > last {
            return None;
        }
        Some((first as usize, last as usize))
    }
}

/// Tiles whose closed rectangle meets the ellipse, ascending by id.
///
/// Walks the tile rows spanned by the ellipse's AABB; inside each row strip
/// the ellipse's horizontal extent is found in closed form (the conditional
/// x-range of a 2D quadratic form is a pair of concave/convex functions of
/// `y`, so their extremes over the strip sit at the clamped tangent points).
pub fn tiles_for(ellipse: &Ellipse, grid: &TileGrid) -> Vec<u32> {
    let mut out = Vec::new();
    let [x_min, y_min, x_max, y_max] = ellipse.aabb();
    let Some((row_lo, row_hi)) = grid.axis_span(y_min, y_max, grid.tiles_y, grid.height) else {
        return out;
    };
    let (sxx, sxy, syy) = (
        ellipse.cov[(0, 0)],
        ellipse.cov[(0, 1)],
        ellipse.cov[(1, 1)],
    );
    let tau = ellipse.threshold;
    let slope = sxy / syy;
    let schur = sxx - sxy * slope;
    // Vertical offset of the rightmost ellipse point; leftmost is its negation.
    let dy_right = sxy * (tau / sxx).sqrt();
    let half_width = |dy: f64| (schur * (tau - dy * dy / syy)).max(0.0).sqrt();
    let (cx, cy) = (ellipse.center.x, ellipse.center.y);
    let ts = grid.tile_size as f64;

    for row in row_lo..=row_hi {
        let y0 = (row as f64 * ts).max(y_min);
        let y1 = ((row + 1) as f64 * ts).min(grid.height as f64).min(y_max);
        if y0 > y1 {
            continue;
        }
        let (da, db) = (y0 - cy, y1 - cy);
        let dr = dy_right.clamp(da, db);
        let dl = (-dy_right).clamp(da, db);
        let strip_x_max = cx + slope * dr + half_width(dr);
        let strip_x_min = cx + slope * dl - half_width(dl);
        let lo = strip_x_min.max(x_min);
        let hi = strip_x_max.min(x_max);
        if let Some((c0, c1)) = grid.axis_span(lo, hi, grid.tiles_x, grid.width) {
            out.extend((c0..=c1).map(|col| grid.tile_id(row, col)));
        }
    }
    out
}

/// Baseline tile assignment: every tile touched by the square of half-size
/// `ceil(3 * sqrt(lambda_max))`. Only used as a benchmark comparator.
pub fn tiles_naive_rect(mean: &Vec2, cov: &Mat2, grid: &TileGrid) -> Vec<u32> {
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    let lambda_max = mid + (mid * mid - det).max(0.1).sqrt();
    let r = (3.0 * lambda_max.sqrt()).ceil();
    let mut out = Vec::new();
    let Some((r0, r1)) = grid.axis_span(mean.y - r, mean.y + r, grid.tiles_y, grid.height) else {
        return out;
    };
    let Some((c0, c1)) = grid.axis_span(mean.x - r, mean.x + r, grid.tiles_x, grid.width) else {
        return out;
    };
    for row in r0..=r1 {
        out.extend((c0..=c1).map(|col| grid.tile_id(row, col)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TileCulling {
    /// Exact ellipse/tile intersection.
    #[default]
    Precise,
    /// 3-sigma square, the baseline the exact test replaces.
    NaiveRect,
}

/// A Gaussian's screen-space footprint plus its tile list.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    pub kind: GaussianKind,
    pub mean: Vec2,
    pub cov: Mat2,
    pub conic: Mat2,
    pub depth: f64,
    pub opacity: f64,
    pub aabb: [f64; 4],
    pub tiles: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Visible(ProjectedGaussian),
    Culled,
}

impl Projection {
    pub fn visible(self) -> Option<ProjectedGaussian> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::Culled => None,
        }
    }
}

/// Projects `g` (entry `index` of its kind's list) with exact tile culling.
pub fn project(
    g: &GaussianPrimitive,
    index: usize,
    view: &CameraView,
    grid: &TileGrid,
) -> Result<Projection> {
    project_with(g, index, view, grid, TileCulling::Precise)
}

pub fn project_with(
    g: &GaussianPrimitive,
    index: usize,
    view: &CameraView,
    grid: &TileGrid,
    culling: TileCulling,
) -> Result<Projection> {
    let Some(fp) = footprint(g, view)? else {
        return Ok(Projection::Culled);
    };
    let ellipse = match ellipse_from(fp.mean, fp.cov, g.opacity, MIN_ALPHA) {
        Ok(e) => e,
        Err(Error::EmptyEllipse { .. }) => return Ok(Projection::Culled),
        Err(e) => return Err(e),
    };
    let tiles = match culling {
        TileCulling::Precise => tiles_for(&ellipse, grid),
        TileCulling::NaiveRect => tiles_naive_rect(&fp.mean, &fp.cov, grid),
    };
    if tiles.is_empty() {
        return Ok(Projection::Culled);
    }
    Ok(Projection::Visible(ProjectedGaussian {
        index,
        kind: g.kind(),
        mean: fp.mean,
        cov: fp.cov,
        conic: ellipse.conic,
        depth: fp.depth,
        opacity: g.opacity,
        aabb: ellipse.aabb(),
        tiles,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rotation_exp;
    use crate::oracle::oracle_tiles_for;
    use crate::scene::Appearance;
    use crate::sh::ShCoeffs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn surfel(position: Vec3, rot: Mat3, su: f64, sv: f64, opacity: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            position,
            tangent_u: rot.column(0).into(),
            tangent_v: rot.column(1).into(),
            scale_u: su,
            scale_v: sv,
            opacity,
            appearance: Appearance::Base {
                sh: ShCoeffs::zeros(0),
                blend_weight: 0.0,
            },
        }
    }

    fn axis_camera(focal: f64, size: usize) -> CameraView {
        CameraView {
            center: Vec3::zeros(),
            rotation: Mat3::identity(),
            focal_x: focal,
            focal_y: focal,
            principal_x: size as f64 / 2.0,
            principal_y: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }

    fn circle(center: (f64, f64), radius: f64) -> Ellipse {
        Ellipse {
            center: Vec2::new(center.0, center.1),
            cov: Mat2::identity(),
            conic: Mat2::identity(),
            threshold: radius * radius,
        }
    }

    #[test]
    fn canonical_augmentation() {
        let g = surfel(Vec3::zeros(), Mat3::identity(), 2.0, 1.0, 0.5);
        let (r, s) = augment_thin3d(&g).unwrap();
        assert_eq!(r, Mat3::identity());
        assert_eq!(s, Vec3::new(2.0, 1.0, 2e-6));
    }

    #[test]
    fn augmentation_is_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let g = surfel(Vec3::zeros(), rotation_exp(&w), 1.0, 0.5, 0.5);
            let (r, _) = augment_thin3d(&g).unwrap();
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn thin_axis_is_negligible_in_projection() {
        // Same projection with eps = 0 computed in closed form: only the two
        // tangent columns contribute.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let view = axis_camera(200.0, 256);
        for _ in 0..200 {
            let w = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let rot = rotation_exp(&w);
            let pos = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(3.0..8.0),
            );
            let g = surfel(
                pos,
                rot,
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
                0.5,
            );
            let fp = footprint(&g, &view).unwrap().unwrap();
            let t = view.world_to_camera(&pos);
            let jw = perspective_jacobian(&view, &t) * view.rotation;
            let a = jw * g.tangent_u * g.scale_u;
            let b = jw * g.tangent_v * g.scale_v;
            let mut limit = a * a.transpose() + b * b.transpose();
            limit[(0, 0)] += LOWPASS_PX2;
            limit[(1, 1)] += LOWPASS_PX2;
            let rel = (fp.cov - limit).abs().max() / limit.abs().max();
            assert!(rel <= 1e-8, "{rel}");
        }
    }

    #[test]
    fn on_axis_surfel_matches_pinhole_closed_form() {
        let view = axis_camera(100.0, 128);
        let g = surfel(Vec3::new(0.0, 0.0, 10.0), Mat3::identity(), 1.0, 1.0, 0.9);
        let grid = TileGrid::for_view(&view, 16).unwrap();
        let pg = project(&g, 0, &view, &grid).unwrap().visible().unwrap();
        // radius = focal * s / depth = 10 px, variance 100 + low-pass.
        assert!((pg.cov[(0, 0)] - 100.3).abs() < 1e-9);
        assert!((pg.cov[(1, 1)] - 100.3).abs() < 1e-9);
        assert!(pg.cov[(0, 1)].abs() < 1e-12);
        assert!((pg.mean - Vec2::new(64.0, 64.0)).norm() < 1e-12);
        assert_eq!(pg.depth, 10.0);
    }

    #[test]
    fn behind_camera_and_far_off_screen_are_culled() {
        let view = axis_camera(100.0, 128);
        let grid = TileGrid::for_view(&view, 16).unwrap();
        let behind = surfel(Vec3::new(0.0, 0.0, -5.0), Mat3::identity(), 1.0, 1.0, 0.9);
        assert_eq!(
            project(&behind, 0, &view, &grid).unwrap(),
            Projection::Culled
        );
        // 10^4 px to the right at depth 10 with focal 100: x = 1000 world units.
        let off = surfel(
            Vec3::new(1000.0, 0.0, 10.0),
            Mat3::identity(),
            0.1,
            0.1,
            0.9,
        );
        assert_eq!(project(&off, 0, &view, &grid).unwrap(), Projection::Culled);
    }

    #[test]
    fn cutoff_ellipse_cases() {
        let pg = ProjectedGaussian {
            index: 0,
            kind: GaussianKind::Base,
            mean: Vec2::new(5.0, 5.0),
            cov: Mat2::identity(),
            conic: Mat2::identity(),
            depth: 1.0,
            opacity: MIN_ALPHA * 0.5f64.exp(),
            aabb: [0.0; 4],
            tiles: vec![],
        };
        let e = cutoff_ellipse(&pg, MIN_ALPHA).unwrap();
        assert!((e.threshold - 1.0).abs() < 1e-12);
        assert!(e.contains(&Vec2::new(6.0 - 1e-9, 5.0)));
        assert!(!e.contains(&Vec2::new(6.0 + 1e-9, 5.0)));
        let empty = ProjectedGaussian {
            opacity: MIN_ALPHA,
            ..pg
        };
        assert!(matches!(
            cutoff_ellipse(&empty, MIN_ALPHA),
            Err(Error::EmptyEllipse { .. })
        ));
    }

    #[test]
    fn ellipse_boundary_density_is_min_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = rng.random_range(0.5..20.0);
            let b = rng.random_range(0.5..20.0);
            let th = rng.random_range(0.0..std::f64::consts::PI);
            let r = nalgebra::Rotation2::new(th).into_inner();
            let cov = r * Mat2::new(a, 0.0, 0.0, b) * r.transpose();
            let opacity = rng.random_range(0.05..1.0);
            let e = ellipse_from(Vec2::new(10.0, 10.0), cov, opacity, MIN_ALPHA).unwrap();
            for k in 0..16 {
                let phi = k as f64 / 16.0 * std::f64::consts::TAU;
                // Boundary point along direction u: scale so that q = threshold.
                let u = Vec2::new(phi.cos(), phi.sin());
                let q_unit = (u.transpose() * e.conic * u)[0];
                let p = e.center + u * (e.threshold / q_unit).sqrt();
                let d = p - e.center;
                let density = (-0.5 * (d.transpose() * e.conic * d)[0]).exp();
                assert!(
                    (density - MIN_ALPHA / opacity).abs() < 1e-12 * (MIN_ALPHA / opacity).max(1.0)
                );
            }
        }
    }

    #[test]
    fn small_circle_at_tile_center_hits_one_tile() {
        let grid = TileGrid::new(64, 64, 16).unwrap();
        assert_eq!(tiles_for(&circle((8.0, 8.0), 3.0), &grid), vec![0]);
        assert_eq!(
            tiles_for(&circle((24.0, 40.0), 3.0), &grid),
            vec![grid.tile_id(2, 1)]
        );
    }

    #[test]
    fn circle_on_tile_corner_hits_four_tiles() {
        let grid = TileGrid::new(64, 64, 16).unwrap();
        let tiles = tiles_for(&circle((16.0, 16.0), 1.0), &grid);
        assert_eq!(
            tiles,
            vec![
                grid.tile_id(0, 0),
                grid.tile_id(0, 1),
                grid.tile_id(1, 0),
                grid.tile_id(1, 1)
            ]
        );
    }

    #[test]
    fn tile_grid_round_trips_ids() {
        let grid = TileGrid::new(100, 37, 16).unwrap();
        assert_eq!((grid.tiles_x, grid.tiles_y), (7, 3));
        for id in 0..grid.tile_count() as u32 {
            let (r, c) = grid.row_col(id);
            assert_eq!(grid.tile_id(r, c), id);
        }
        assert_eq!(grid.rect(grid.tile_id(2, 6)), [96.0, 32.0, 100.0, 37.0]);
    }

    fn random_ellipse(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Ellipse {
        let a = rng.random_range(0.3f64..40.0).powi(2);
        let b = rng.random_range(0.3f64..40.0).powi(2);
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let r = nalgebra::Rotation2::new(th).into_inner();
        let cov = r * Mat2::new(a, 0.0, 0.0, b) * r.transpose();
        let cov = Mat2::new(cov[(0, 0)], cov[(0, 1)], cov[(0, 1)], cov[(1, 1)]);
        let center = Vec2::new(
            rng.random_range(-60.0..w + 60.0),
            rng.random_range(-60.0..h + 60.0),
        );
        ellipse_from(center, cov, rng.random_range(0.01..1.0), MIN_ALPHA).unwrap()
    }

    #[test]
    fn tiles_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for ts in [8, 16, 32] {
            let grid = TileGrid::new(203, 150, ts).unwrap();
            for _ in 0..300 {
                let e = random_ellipse(&mut rng, 203.0, 150.0);
                assert_eq!(tiles_for(&e, &grid), oracle_tiles_for(&e, &grid));
            }
        }
    }

    #[test]
    fn tile_set_grows_with_opacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grid = TileGrid::new(128, 128, 16).unwrap();
        for _ in 0..200 {
            let e = random_ellipse(&mut rng, 128.0, 128.0);
            let low = tiles_for(&e, &grid);
            let bigger = Ellipse {
                threshold: e.threshold * 1.5,
                ..e
            };
            let high = tiles_for(&bigger, &grid);
            assert!(low.iter().all(|t| high.contains(t)));
        }
    }
}
