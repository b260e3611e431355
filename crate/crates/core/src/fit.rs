//! Plain gradient descent on the hybrid model, used to produce fitted
//! scenes for gradient and pruning experiments.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::forward;
use crate::error::{Error, Result};
use crate::grad::{backward, OutputAdjoint, ParamGradients};
use crate::loss::{loss_normal_consistency, loss_rgb};
use crate::raster::{ChannelImage, Renderer};
use crate::scene::{Appearance, CameraView, Scene};
use crate::trace::Phi;

/// Step sizes per parameter group. Scales step in log space and opacities
/// in logit space, so both stay in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub logit_opacity: f64,
    pub sh: f64,
    pub blend_weight: f64,
    pub reflection: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            position: 0.05,
            rotation: 0.5,
            log_scale: 0.5,
            logit_opacity: 20.0,
            sh: 20.0,
            blend_weight: 5.0,
            reflection: 5.0,
        }
    }
}

impl StepSizes {
    fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.rotation,
            self.log_scale,
            self.logit_opacity,
            self.sh,
            self.blend_weight,
            self.reflection,
        ];
        if all.iter().all(|&s| s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "step sizes must be positive and finite".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub steps: StepSizes,
    pub lambda_rgb: f64,
    pub lambda_norm: f64,
    /// Iterations that update base Gaussians only; `None` means 10% of `iterations`.
    pub warmup: Option<usize>,
    /// Views per step; 0 uses every view each step.
    pub views_per_step: usize,
    pub seed: u64,
    pub phi: Phi,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            steps: StepSizes::default(),
            lambda_rgb: 1.0,
            lambda_norm: 0.0,
            warmup: None,
            views_per_step: 0,
            seed: 0,
            phi: Phi::Identity,
        }
    }
}

impl FitConfig {
    pub fn warmup_iterations(&self) -> usize {
        self.warmup.unwrap_or(self.iterations / 10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub loss_rgb: f64,
    pub loss_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub scene: Scene,
    /// One record per iteration, measured before that iteration's update,
    /// plus a final record after the last update.
    pub curve: Vec<LossRecord>,
}

fn check_inputs(views: &[CameraView], targets: &[ChannelImage]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    if views.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} views but {} targets",
            views.len(),
            targets.len()
        )));
    }
    for (v, t) in views.iter().zip(targets) {
        if v.width != t.width || v.height != t.height || t.channels != 3 {
            return Err(Error::Shape(format!(
                "target is {}x{}x{}, view is {}x{}",
                t.width, t.height, t.channels, v.width, v.height
            )));
        }
    }
    Ok(())
}

/// Loss over `views` and, if `want_grad`, its gradient.
fn loss_and_grad(
    renderer: &Renderer,
    scene: &Scene,
    views: &[&CameraView],
    targets: &[&ChannelImage],
    cfg: &FitConfig,
    want_grad: bool,
) -> Result<(LossRecord, Option<ParamGradients>)> {
    let mut grads = want_grad.then(|| ParamGradients::zeros_like(scene));
    let (mut l_rgb, mut l_norm) = (0.0, 0.0);
    let scale = 1.0 / views.len() as f64;
    for (view, target) in views.iter().zip(targets) {
        let (out, cache) = forward(renderer, scene, view, &cfg.phi)?;
        let rgb = loss_rgb(&out.final_color, target)?;
        l_rgb += rgb.value * scale;
        let norm = if cfg.lambda_norm > 0.0 {
            Some(loss_normal_consistency(
                &out.normal_map,
                &out.depth_map,
                &out.base_color.transmittance,
                view,
            )?)
        } else {
            None
        };
        if let Some(n) = &norm {
            l_norm += n.value * scale;
        }
        if let Some(acc) = grads.as_mut() {
            let mut adj = rgb.adjoint;
            adj.data.iter_mut().for_each(|v| *v *= cfg.lambda_rgb);
            let mut adjoint = OutputAdjoint::final_only(adj);
            if let Some(n) = norm {
                let mut a = n.adjoint;
                a.data.iter_mut().for_each(|v| *v *= cfg.lambda_norm);
                adjoint.normal_map = Some(a);
            }
            let g = backward(renderer, scene, &cache, &adjoint)?;
            acc.accumulate(&g, scale);
        }
    }
    let rec = LossRecord {
        iteration: 0,
        loss: cfg.lambda_rgb * l_rgb + cfg.lambda_norm * l_norm,
        loss_rgb: l_rgb,
        loss_norm: l_norm,
    };
    Ok((rec, grads))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One descent step. Reflective Gaussians are left untouched when `base_only`.
pub fn apply_step(scene: &mut Scene, grads: &ParamGradients, steps: &StepSizes, base_only: bool) {
    let lists = [
        (&mut scene.base, &grads.base, false),
        (&mut scene.reflective, &grads.reflective, true),
    ];
    for (list, gl, reflective) in lists {
        if reflective && base_only {
            continue;
        }
        for (g, d) in list.iter_mut().zip(gl) {
            g.position -= d.position * steps.position;
            g.rotate_frame(&(-d.rotation * steps.rotation));
            g.orthonormalize();
            g.scale_u *= (-steps.log_scale * g.scale_u * d.scale_u).exp();
            g.scale_v *= (-steps.log_scale * g.scale_v * d.scale_v).exp();
            let op = g.opacity.clamp(1e-6, 1.0 - 1e-9);
            let logit = (op / (1.0 - op)).ln() - steps.logit_opacity * op * (1.0 - op) * d.opacity;
            g.opacity = sigmoid(logit).clamp(1e-6, 1.0);
            match &mut g.appearance {
                Appearance::Base { sh, blend_weight } => {
                    for (c, dc) in sh.coeffs.iter_mut().zip(&d.sh) {
                        for k in 0..3 {
                            c[k] -= steps.sh * dc[k];
                        }
                    }
                    *blend_weight =
                        (*blend_weight - steps.blend_weight * d.blend_weight).clamp(0.0, 1.0);
                }
                Appearance::Reflective { reflection } => {
                    for k in 0..3 {
                        reflection[k] =
                            (reflection[k] - steps.reflection * d.reflection[k]).max(0.0);
                    }
                }
            }
        }
    }
}

/// Mean loss over all views, without gradients.
pub fn evaluate_loss(
    renderer: &Renderer,
    scene: &Scene,
    views: &[CameraView],
    targets: &[ChannelImage],
    cfg: &FitConfig,
) -> Result<LossRecord> {
    check_inputs(views, targets)?;
    let v: Vec<&CameraView> = views.iter().collect();
    let t: Vec<&ChannelImage> = targets.iter().collect();
    Ok(loss_and_grad(renderer, scene, &v, &t, cfg, false)?.0)
}

/// Mean PSNR of the final render against the targets.
pub fn mean_psnr(
    renderer: &Renderer,
    scene: &Scene,
    views: &[CameraView],
    targets: &[ChannelImage],
) -> Result<f64> {
    check_inputs(views, targets)?;
    let mut total = 0.0;
    for (v, t) in views.iter().zip(targets) {
        let out = crate::compositor::render(renderer, scene, v)?;
        total += out.final_color.psnr(t)?;
    }
    Ok(total / views.len() as f64)
}

pub fn fit(
    renderer: &Renderer,
    scene: &Scene,
    views: &[CameraView],
    targets: &[ChannelImage],
    cfg: &FitConfig,
) -> Result<FitResult> {
    check_inputs(views, targets)?;
    cfg.steps.validate()?;
    let mut scene = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..views.len()).collect();
    let per_step = if cfg.views_per_step == 0 {
        views.len()
    } else {
        cfg.views_per_step.min(views.len())
    };
    let warmup = cfg.warmup_iterations();
    let mut curve = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        if per_step < views.len() {
            order.shuffle(&mut rng);
        }
        let v: Vec<&CameraView> = order[..per_step].iter().map(|&i| &views[i]).collect();
        let t: Vec<&ChannelImage> = order[..per_step].iter().map(|&i| &targets[i]).collect();
        let (mut rec, grads) = loss_and_grad(renderer, &scene, &v, &t, cfg, true)?;
        rec.iteration = it;
        curve.push(rec);
        let grads = grads.expect("gradients requested");
        if !grads.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite gradient at iteration {it}"
            )));
        }
        apply_step(&mut scene, &grads, &cfg.steps, it < warmup);
    }
    let mut last = evaluate_loss(renderer, &scene, views, targets, cfg)?;
    last.iteration = cfg.iterations;
    curve.push(last);
    Ok(FitResult { scene, curve })
}

pub fn write_loss_curve(curve: &[LossRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
