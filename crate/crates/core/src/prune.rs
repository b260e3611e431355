//! Sensitivity scores over both Gaussian sets and score-ranked pruning.
//!
//! A Gaussian's score is the squared gradient of the rendered image with
//! respect to its spatial parameters, summed over pixels, channels and
//! views. The blend weight map is held fixed, so the final image splits
//! into `(1 - beta) * base + beta * reflection` with constant weights.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::forward;
use crate::error::{Error, Result};
use crate::fit::{fit, mean_psnr, FitConfig};
use crate::grad::{
    alpha_adjoints, alpha_to_screen, by_slot, color_backward, conic_to_cov, footprint_backward,
    pixel_contributions, GeomGrad,
};
use crate::projection::{Mat2, ProjectedGaussian, Vec2};
use crate::raster::{pixel_center, ChannelImage, Renderer, TileFrame};
use crate::scene::{CameraView, GaussianKind, GaussianPrimitive, Scene};
use crate::trace::Phi;

/// Screen-space quantities a splat exposes to one pixel:
/// mean (2), covariance `(a, b, c)` (3), color (3), opacity (1).
const Q: usize = 9;
const SPATIAL: usize = 8;

/// How per-pixel gradients are reduced to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScoreRoute {
    /// Chain every pixel gradient to the parameters, then square it.
    PerPixel,
    /// Accumulate screen-space outer products `sum w^2 g g^T` and apply the
    /// parameter Jacobian once per Gaussian and view.
    #[default]
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub route: ScoreRoute,
    /// Adds opacity, and SH coefficients for base Gaussians, to the
    /// parameters. Reflective opacity counts only through its own footprint.
    pub include_appearance: bool,
    /// When false, both branches are weighted by 1 instead of `1 - beta` and `beta`.
    pub beta_weighted: bool,
    pub phi: Phi,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            route: ScoreRoute::Factored,
            include_appearance: false,
            beta_weighted: true,
            phi: Phi::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneScore {
    pub kind: GaussianKind,
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneScores {
    pub base: Vec<f64>,
    pub reflective: Vec<f64>,
}

impl PruneScores {
    pub fn zeros(scene: &Scene) -> Self {
        Self {
            base: vec![0.0; scene.base.len()],
            reflective: vec![0.0; scene.reflective.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.reflective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All scores in joint order: base Gaussians first, then reflective.
    pub fn entries(&self) -> Vec<PruneScore> {
        let base = self
            .base
            .iter()
            .enumerate()
            .map(|(index, &score)| PruneScore {
                kind: GaussianKind::Base,
                index,
                score,
            });
        let refl = self
            .reflective
            .iter()
            .enumerate()
            .map(|(index, &score)| PruneScore {
                kind: GaussianKind::Reflective,
                index,
                score,
            });
        base.chain(refl).collect()
    }

    pub fn total(&self) -> f64 {
        self.base.iter().chain(&self.reflective).sum()
    }

    fn add(&mut self, other: &PruneScores) {
        for (a, b) in self.base.iter_mut().zip(&other.base) {
            *a += b;
        }
        for (a, b) in self.reflective.iter_mut().zip(&other.reflective) {
            *a += b;
        }
    }
}

fn theta_len(g: &GaussianPrimitive, opts: &ScoreOptions) -> usize {
    if !opts.include_appearance {
        return SPATIAL;
    }
    SPATIAL + 1 + g.sh().map_or(0, |s| 3 * s.coeffs.len())
}

fn geom_row(row: &mut [f64], gg: &GeomGrad) {
    row[..3].copy_from_slice(gg.position.as_slice());
    row[3..6].copy_from_slice(gg.rotation.as_slice());
    row[6] = gg.scale_u;
    row[7] = gg.scale_v;
}

/// Jacobian of the screen-space quantities with respect to the scored
/// parameters, row-major `Q x n`. Baked reflections are held fixed.
fn screen_jacobian(
    g: &GaussianPrimitive,
    view: &CameraView,
    opts: &ScoreOptions,
) -> Result<(usize, Vec<f64>)> {
    let n = theta_len(g, opts);
    let mut jac = vec![0.0; Q * n];
    let zero2 = Mat2::zeros();
    for axis in 0..2 {
        let mut d = Vec2::zeros();
        d[axis] = 1.0;
        let gg = footprint_backward(g, view, &d, &zero2)?;
        geom_row(&mut jac[axis * n..(axis + 1) * n], &gg);
    }
    let covs = [
        Mat2::new(1.0, 0.0, 0.0, 0.0),
        Mat2::new(0.0, 0.5, 0.5, 0.0),
        Mat2::new(0.0, 0.0, 0.0, 1.0),
    ];
    for (k, gc) in covs.iter().enumerate() {
        let gg = footprint_backward(g, view, &Vec2::zeros(), gc)?;
        geom_row(&mut jac[(2 + k) * n..(3 + k) * n], &gg);
    }
    if let Some(sh) = g.sh() {
        for c in 0..3 {
            let mut unit = [0.0; 3];
            unit[c] = 1.0;
            let mut sh_rows = vec![[0.0; 3]; sh.coeffs.len()];
            let dp = color_backward(g, view, &unit, Some(&mut sh_rows))?;
            let row = &mut jac[(5 + c) * n..(6 + c) * n];
            row[..3].copy_from_slice(dp.as_slice());
            if opts.include_appearance {
                for (k, v) in sh_rows.iter().enumerate() {
                    row[SPATIAL + 1 + 3 * k + c] = v[c];
                }
            }
        }
    }
    if opts.include_appearance {
        jac[8 * n + SPATIAL] = 1.0;
    }
    Ok((n, jac))
}

struct SlotJac {
    n: usize,
    jac: Vec<f64>,
}

impl SlotJac {
    /// `J J^T`, so that `tr(J^T M J) = sum M_ab (J J^T)_ab`.
    fn gram(&self) -> [[f64; Q]; Q] {
        let mut out = [[0.0; Q]; Q];
        for a in 0..Q {
            for b in 0..Q {
                let ra = &self.jac[a * self.n..(a + 1) * self.n];
                let rb = &self.jac[b * self.n..(b + 1) * self.n];
                out[a][b] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    fn chain_sq_norm(&self, q: &[f64; Q], scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.resize(self.n, 0.0);
        for (a, &qa) in q.iter().enumerate() {
            if qa == 0.0 {
                continue;
            }
            for (s, j) in scratch
                .iter_mut()
                .zip(&self.jac[a * self.n..(a + 1) * self.n])
            {
                *s += qa * j;
            }
        }
        scratch.iter().map(|v| v * v).sum()
    }
}

/// Screen-space gradient of one channel of one pixel with respect to one contributor.
fn screen_grad<const C: usize>(
    frame: &TileFrame<C>,
    pg: &ProjectedGaussian,
    c: &crate::grad::Contribution,
    px: f64,
    py: f64,
    d_alpha: f64,
    channel: usize,
) -> [f64; Q] {
    let mut q = [0.0; Q];
    q[5 + channel] = c.alpha * c.transmittance;
    if c.clamped {
        return q;
    }
    let s = &frame.splats[c.slot];
    let (dm, dq) = alpha_to_screen(&s.mean, &s.conic, px, py, c.alpha, d_alpha);
    let gc = conic_to_cov(&pg.conic, &dq);
    q[0] = dm[0];
    q[1] = dm[1];
    q[2] = gc[(0, 0)];
    q[3] = gc[(0, 1)] + gc[(1, 0)];
    q[4] = gc[(1, 1)];
    q[8] = d_alpha * c.falloff;
    q
}

/// Scores of one branch in one view, indexed by Gaussian.
fn branch_scores<const C: usize>(
    renderer: &Renderer,
    list: &[GaussianPrimitive],
    view: &CameraView,
    projected: &[ProjectedGaussian],
    frame: &TileFrame<C>,
    weight: impl Fn(usize, usize) -> f64 + Sync,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let pgs = by_slot(projected, &frame.sources);
    let jacs: Vec<SlotJac> = pgs
        .iter()
        .map(|pg| screen_jacobian(&list[pg.index], view, opts).map(|(n, jac)| SlotJac { n, jac }))
        .collect::<Result<_>>()?;
    let grid = frame.grid;
    let factored = opts.route == ScoreRoute::Factored;

    // Per tile: a scalar per instance (per-pixel route) or an outer-product
    // matrix per instance (factored route).
    let partials: Vec<(Vec<f64>, Vec<[[f64; Q]; Q]>)> = renderer.install(|| {
        (0..grid.tile_count() as u32)
            .into_par_iter()
            .map(|tile| {
                let instances = frame.tile_instances(tile);
                let mut direct = vec![0.0; if factored { 0 } else { instances.len() }];
                let mut outer = vec![[[0.0; Q]; Q]; if factored { instances.len() } else { 0 }];
                if instances.is_empty() {
                    return (direct, outer);
                }
                let (x0, y0, x1, y1) = grid.pixel_bounds(tile);
                let mut contribs = Vec::new();
                let mut d_alpha = Vec::new();
                let mut scratch = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let w = weight(x, y);
                        if w == 0.0 {
                            continue;
                        }
                        let w2 = w * w;
                        let (px, py) = pixel_center(x, y);
                        pixel_contributions(frame, instances, px, py, &mut contribs);
                        for channel in 0..3 {
                            let mut g = [0.0; C];
                            g[channel] = 1.0;
                            alpha_adjoints(frame, &contribs, &g, &mut d_alpha);
                            for (c, &da) in contribs.iter().zip(&d_alpha) {
                                let q = screen_grad(frame, pgs[c.slot], c, px, py, da, channel);
                                if factored {
                                    let m = &mut outer[c.k];
                                    for a in 0..Q {
                                        if q[a] == 0.0 {
                                            continue;
                                        }
                                        for b in 0..Q {
                                            m[a][b] += w2 * q[a] * q[b];
                                        }
                                    }
                                } else {
                                    direct[c.k] +=
                                        w2 * jacs[c.slot].chain_sq_norm(&q, &mut scratch);
                                }
                            }
                        }
                    }
                }
                (direct, outer)
            })
            .collect()
    });

    let mut per_slot = vec![0.0; frame.splats.len()];
    if factored {
        let mut m_slot = vec![[[0.0; Q]; Q]; frame.splats.len()];
        for (tile, (_, outer)) in partials.iter().enumerate() {
            for (k, &slot) in frame.tile_instances(tile as u32).iter().enumerate() {
                let m = &mut m_slot[slot as usize];
                for a in 0..Q {
                    for b in 0..Q {
                        m[a][b] += outer[k][a][b];
                    }
                }
            }
        }
        for (slot, m) in m_slot.iter().enumerate() {
            let gram = jacs[slot].gram();
            let mut s = 0.0;
            for a in 0..Q {
                for b in 0..Q {
                    s += m[a][b] * gram[a][b];
                }
            }
            per_slot[slot] = s.max(0.0);
        }
    } else {
        for (tile, (direct, _)) in partials.iter().enumerate() {
            for (k, &slot) in frame.tile_instances(tile as u32).iter().enumerate() {
                per_slot[slot as usize] += direct[k];
            }
        }
    }

    let mut out = vec![0.0; list.len()];
    for (slot, s) in per_slot.into_iter().enumerate() {
        out[pgs[slot].index] += s;
    }
    Ok(out)
}

fn check_beta(map: &ChannelImage, view: &CameraView) -> Result<()> {
    if map.width != view.width || map.height != view.height || map.channels != 1 {
        return Err(Error::Shape(format!(
            "beta map is {}x{}x{}, view is {}x{}",
            map.width, map.height, map.channels, view.width, view.height
        )));
    }
    Ok(())
}

fn score_view(
    renderer: &Renderer,
    scene: &Scene,
    view: &CameraView,
    beta: Option<&ChannelImage>,
    opts: &ScoreOptions,
) -> Result<PruneScores> {
    let (_, cache) = forward(renderer, scene, view, &opts.phi)?;
    let width = view.width;
    let beta_at = |x: usize, y: usize| match beta {
        Some(m) => m.pixel(x, y)[0].clamp(0.0, 1.0),
        None => cache.beta_raw[y * width + x].clamp(0.0, 1.0),
    };
    let (wb, wr): (
        Box<dyn Fn(usize, usize) -> f64 + Sync>,
        Box<dyn Fn(usize, usize) -> f64 + Sync>,
    ) = if opts.beta_weighted {
        (Box::new(move |x, y| 1.0 - beta_at(x, y)), Box::new(beta_at))
    } else {
        (Box::new(|_, _| 1.0), Box::new(|_, _| 1.0))
    };
    let base = branch_scores(
        renderer,
        &scene.base,
        view,
        &cache.base_projected,
        &cache.base_frame,
        wb,
        opts,
    )?;
    let reflective = branch_scores(
        renderer,
        &scene.reflective,
        view,
        &cache.ref_projected,
        &cache.ref_frame,
        wr,
        opts,
    )?;
    Ok(PruneScores { base, reflective })
}

/// Scores every Gaussian over `views`. `beta_maps`, if given, replaces the
/// splatted blend-weight map of each view; either way it is held fixed.
pub fn score_all(
    renderer: &Renderer,
    scene: &Scene,
    views: &[CameraView],
    beta_maps: Option<&[ChannelImage]>,
    opts: &ScoreOptions,
) -> Result<PruneScores> {
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    if let Some(maps) = beta_maps {
        if maps.len() != views.len() {
            return Err(Error::Shape(format!(
                "{} views but {} beta maps",
                views.len(),
                maps.len()
            )));
        }
        for (m, v) in maps.iter().zip(views) {
            check_beta(m, v)?;
        }
    }
    let per_view: Vec<Result<PruneScores>> = renderer.install(|| {
        views
            .par_iter()
            .enumerate()
            .map(|(i, v)| score_view(renderer, scene, v, beta_maps.map(|m| &m[i]), opts))
            .collect()
    });
    let mut total = PruneScores::zeros(scene);
    for s in per_view {
        total.add(&s?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed_base: usize,
    pub removed_reflective: usize,
    /// Removed Gaussians as (kind, original index), lowest score first.
    pub removed: Vec<(GaussianKind, usize)>,
}

/// Number of Gaussians a round at `ratio` removes from `total`.
pub fn prune_count(total: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prune ratio must be in (0, 1), got {ratio}"
        )));
    }
    Ok((ratio * total as f64).floor() as usize)
}

/// Removes the listed Gaussians, keeping the relative order of the rest.
pub fn remove_gaussians(scene: &Scene, removed: &[(GaussianKind, usize)]) -> Scene {
    let mut drop_b = vec![false; scene.base.len()];
    let mut drop_r = vec![false; scene.reflective.len()];
    for &(kind, i) in removed {
        match kind {
            GaussianKind::Base => drop_b[i] = true,
            GaussianKind::Reflective => drop_r[i] = true,
        }
    }
    let keep = |list: &[GaussianPrimitive], drop: &[bool]| -> Vec<GaussianPrimitive> {
        list.iter()
            .zip(drop)
            .filter(|(_, &d)| !d)
            .map(|(g, _)| g.clone())
            .collect()
    };
    Scene {
        sh_degree: scene.sh_degree,
        base: keep(&scene.base, &drop_b),
        reflective: keep(&scene.reflective, &drop_r),
    }
}

fn report_for(removed: Vec<(GaussianKind, usize)>) -> PruneReport {
    let removed_base = removed
        .iter()
        .filter(|(k, _)| *k == GaussianKind::Base)
        .count();
    PruneReport {
        removed_base,
        removed_reflective: removed.len() - removed_base,
        removed,
    }
}

/// Removes the `floor(ratio * N)` lowest-scoring Gaussians from one joint
/// ranking of both sets. Equal scores go to the lower joint index, base first.
pub fn prune_round(
    scene: &Scene,
    scores: &PruneScores,
    ratio: f64,
) -> Result<(Scene, PruneReport)> {
    if scores.base.len() != scene.base.len() || scores.reflective.len() != scene.reflective.len() {
        return Err(Error::Shape(format!(
            "scores cover {}+{} Gaussians, scene has {}+{}",
            scores.base.len(),
            scores.reflective.len(),
            scene.base.len(),
            scene.reflective.len()
        )));
    }
    let total = scene.len();
    let n = prune_count(total, ratio)?;
    if total == 0 || n >= total {
        return Err(Error::RefusePrune(format!(
            "removing {n} of {total} Gaussians would leave the scene empty"
        )));
    }
    let mut entries = scores.entries();
    if entries
        .iter()
        .any(|e| !e.score.is_finite() || e.score < 0.0)
    {
        return Err(Error::InvalidArgument(
            "scores must be finite and non-negative".into(),
        ));
    }
    // entries are already in joint-index order, and the sort is stable
    entries.sort_by(|a, b| a.score.total_cmp(&b.score));
    let removed = entries[..n].iter().map(|e| (e.kind, e.index)).collect();
    let report = report_for(removed);
    Ok((remove_gaussians(scene, &report.removed), report))
}

/// Baseline: removes `floor(ratio * N)` Gaussians chosen uniformly at random.
pub fn prune_random(scene: &Scene, ratio: f64, seed: u64) -> Result<(Scene, PruneReport)> {
    let total = scene.len();
    let n = prune_count(total, ratio)?;
    if total == 0 || n >= total {
        return Err(Error::RefusePrune(format!(
            "removing {n} of {total} Gaussians would leave the scene empty"
        )));
    }
    let mut joint: Vec<(GaussianKind, usize)> = (0..scene.base.len())
        .map(|i| (GaussianKind::Base, i))
        .chain((0..scene.reflective.len()).map(|i| (GaussianKind::Reflective, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    joint.shuffle(&mut rng);
    joint.truncate(n);
    let report = report_for(joint);
    Ok((remove_gaussians(scene, &report.removed), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub rounds: usize,
    pub ratio: f64,
    /// Fitting iterations after each round; `refit.iterations == 0` disables refitting.
    pub refit: FitConfig,
    pub score: ScoreOptions,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            rounds: 4,
            ratio: 0.05,
            refit: FitConfig {
                iterations: 0,
                warmup: Some(0),
                ..FitConfig::default()
            },
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub removed_base: usize,
    pub removed_reflective: usize,
    pub psnr: f64,
    pub remaining_base: usize,
    pub remaining_reflective: usize,
}

/// Alternates scoring, pruning and optional refitting for `cfg.rounds`
/// rounds. PSNR is measured against `targets`; round 0 is the input scene.
pub fn prune_schedule(
    renderer: &Renderer,
    scene: &Scene,
    views: &[CameraView],
    targets: &[ChannelImage],
    cfg: &ScheduleConfig,
) -> Result<(Scene, Vec<RoundRecord>)> {
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    if cfg.rounds > 0 {
        prune_count(scene.len(), cfg.ratio)?;
    }
    let mut current = scene.clone();
    let mut log = vec![RoundRecord {
        round: 0,
        removed_base: 0,
        removed_reflective: 0,
        psnr: mean_psnr(renderer, &current, views, targets)?,
        remaining_base: current.base.len(),
        remaining_reflective: current.reflective.len(),
    }];
    for round in 1..=cfg.rounds {
        let scores = score_all(renderer, &current, views, None, &cfg.score)?;
        let (pruned, report) = prune_round(&current, &scores, cfg.ratio)?;
        current = pruned;
        if cfg.refit.iterations > 0 {
            current = fit(renderer, &current, views, targets, &cfg.refit)?.scene;
        }
        log.push(RoundRecord {
            round,
            removed_base: report.removed_base,
            removed_reflective: report.removed_reflective,
            psnr: mean_psnr(renderer, &current, views, targets)?,
            remaining_base: current.base.len(),
            remaining_reflective: current.reflective.len(),
        });
    }
    Ok((current, log))
}

pub fn write_prune_report(log: &[RoundRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "removed_base", "removed_reflective", "psnr"])?;
    for r in log {
        w.write_record([
            r.round.to_string(),
            r.removed_base.to_string(),
            r.removed_reflective.to_string(),
            format!("{:.6}", r.psnr),
        ])?;
    }
    w.flush()?;
    Ok(())
}
