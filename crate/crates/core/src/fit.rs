//! Per-subject optimization: fit a splat scene to posed images with Adam,
//! optionally refining the cameras, and canonicalize captures by fitting and
//! re-rendering from the canonical rig.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CanonicalRig};
use crate::imageio::{load_png, png_bytes, ImageBuf};
use crate::loss::{total_loss, LossReport, LossWeights};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::raster::{render, render_backward, render_backward_with_camera, RenderOutput, Upstream};
use crate::splat::{logit, normalize_quat, ply_read, ply_write_bytes, Gaussian3D, SplatScene};
use crate::{Error, Result};

/// `N` posed images with foreground masks. The cameras may be noisy.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    pub images: Vec<ImageBuf<f32>>,
    pub masks: Vec<ImageBuf<f32>>,
    pub cameras: Vec<Camera>,
}

impl CaptureSet {
    pub fn new(
        images: Vec<ImageBuf<f32>>,
        masks: Vec<ImageBuf<f32>>,
        cameras: Vec<Camera>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidConfig("capture set is empty".into()));
        }
        if images.len() != masks.len() || images.len() != cameras.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images, {} masks, {} cameras",
                images.len(),
                masks.len(),
                cameras.len()
            )));
        }
        let (w, h) = (images[0].width, images[0].height);
        for ((img, m), c) in images.iter().zip(&masks).zip(&cameras) {
            if img.channels != 3 || m.channels != 1 {
                return Err(Error::ShapeMismatch(
                    "captures need RGB images and 1-channel masks".into(),
                ));
            }
            if (img.width, img.height) != (w, h)
                || (m.width, m.height) != (w, h)
                || (c.width(), c.height()) != (w, h)
            {
                return Err(Error::ShapeMismatch(format!(
                    "capture sizes differ from {w}x{h}"
                )));
            }
        }
        Ok(Self {
            images,
            masks,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `M` views rendered from one scene at the rig cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSet {
    pub views: Vec<ImageBuf<f32>>,
    pub masks: Vec<ImageBuf<f32>>,
    pub rig: CanonicalRig,
    /// The scene every view was rendered from.
    pub scene: SplatScene<f32>,
}

impl CanonicalSet {
    pub fn from_scene(scene: SplatScene<f32>, rig: &CanonicalRig) -> Self {
        let (views, masks) = rig
            .cameras
            .iter()
            .map(|c| {
                let out = render(&scene, c);
                (out.rgb, out.alpha)
            })
            .unzip();
        Self {
            views,
            masks,
            rig: rig.clone(),
            scene,
        }
    }

    /// Writes `canon_{j:02}.png`, `mask_{j:02}.png`, `rig.json`, `fitted.ply`
    /// and `report.json` (the fit summary, `null` for sets rendered directly
    /// from a known scene).
    pub fn save(&self, dir: impl AsRef<Path>, fit: Option<&FitSummary>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (j, (v, m)) in self.views.iter().zip(&self.masks).enumerate() {
            std::fs::write(dir.join(format!("canon_{j:02}.png")), png_bytes(v)?)?;
            std::fs::write(dir.join(format!("mask_{j:02}.png")), png_bytes(m)?)?;
        }
        std::fs::write(dir.join("rig.json"), serde_json::to_vec_pretty(&self.rig)?)?;
        std::fs::write(dir.join("fitted.ply"), ply_write_bytes(&self.scene))?;
        let report = serde_json::json!({ "views": self.views.len(), "fit": fit });
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        Ok(())
    }

    /// Reads a directory written by [`CanonicalSet::save`]; views come back
    /// 8-bit quantized and `scene` is `fitted.ply`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rig: CanonicalRig = serde_json::from_slice(&std::fs::read(dir.join("rig.json"))?)?;
        let mut views = Vec::with_capacity(rig.len());
        let mut masks = Vec::with_capacity(rig.len());
        for j in 0..rig.len() {
            views.push(load_png(dir.join(format!("canon_{j:02}.png")), 3)?);
            masks.push(load_png(dir.join(format!("mask_{j:02}.png")), 1)?);
        }
        Ok(Self {
            views,
            masks,
            rig,
            scene: ply_read(dir.join("fitted.ply"))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
    pub camera_rotation: f64,
    pub camera_translation: f64,
    pub camera_focal: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 2e-3,
            log_scale: 5e-3,
            rotation: 1e-3,
            color: 1e-2,
            opacity: 5e-2,
            camera_rotation: 1e-3,
            camera_translation: 2e-3,
            camera_focal: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub gaussian_budget: usize,
    pub steps: usize,
    pub lr: LearningRates,
    /// Scene learning rates decay with a cosine schedule to this fraction.
    pub lr_final_fraction: f64,
    pub camera_refine: bool,
    /// Steps before camera refinement starts.
    pub camera_warmup: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Initial depths are drawn from this range times the camera distance to the origin.
    pub init_depth: [f64; 2],
    pub init_opacity: f64,
    pub background: [f32; 3],
    pub adam: AdamConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gaussian_budget: 2000,
            steps: 2000,
            lr: LearningRates::default(),
            lr_final_fraction: 0.1,
            camera_refine: false,
            camera_warmup: 200,
            weights: LossWeights::default(),
            seed: 0,
            init_depth: [0.5, 1.5],
            init_opacity: 0.5,
            background: [1.0; 3],
            adam: AdamConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        let rates = [lr.position, lr.log_scale, lr.rotation, lr.color, lr.opacity];
        let cam = [lr.camera_rotation, lr.camera_translation, lr.camera_focal];
        if self.gaussian_budget == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "gaussian_budget and steps must be >= 1".into(),
            ));
        }
        if rates
            .iter()
            .chain(&cam)
            .any(|r| !(*r > 0.0) || !r.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "learning rates must be > 0: {lr:?}"
            )));
        }
        if !(self.init_depth[0] > 0.0 && self.init_depth[1] >= self.init_depth[0]) {
            return Err(Error::InvalidConfig(
                "init_depth must be an increasing positive range".into(),
            ));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::InvalidConfig(
                "init_opacity must be in (0, 1)".into(),
            ));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub scene: SplatScene<f32>,
    /// Cameras after refinement (equal to the inputs when refinement is off).
    pub cameras: Vec<Camera>,
    /// Loss over all capture views for the final scene.
    pub report: LossReport,
    /// Total loss of the view optimized at each step.
    pub losses: Vec<f64>,
}

/// The serializable part of a [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps: usize,
    pub gaussians: usize,
    pub final_loss: LossReport,
    /// Smoothed (0.9) per-step loss at the last step.
    pub smoothed_loss: f64,
    pub cameras: Vec<Camera>,
}

impl FitResult {
    pub fn summary(&self) -> FitSummary {
        FitSummary {
            steps: self.losses.len(),
            gaussians: self.scene.len(),
            final_loss: self.report,
            smoothed_loss: smoothed(&self.losses, 0.9)
                .last()
                .copied()
                .unwrap_or(f64::NAN),
            cameras: self.cameras.clone(),
        }
    }
}

fn foreground_pixels(mask: &ImageBuf<f32>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) > 0.5 {
                out.push((x, y));
            }
        }
    }
    out
}

/// Pixel coordinates of `p` in `cam` if it lands inside the image.
fn pixel_of(cam: &Camera, p: &Vector3<f64>) -> Option<(usize, usize)> {
    let (uv, _) = cam.project(p).ok()?;
    let (x, y) = (uv.x.round(), uv.y.round());
    if x < 0.0 || y < 0.0 || x >= cam.width() as f64 || y >= cam.height() as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

/// Initial scene: random foreground pixels are back-projected to random
/// depths and kept only if they land inside every frustum and on the
/// foreground of every mask (visual-hull carving). Colors average the images at the
/// projections; scales follow nearest-neighbour spacing.
pub fn initialize(captures: &CaptureSet, config: &FitConfig) -> Result<SplatScene<f32>> {
    config.validate()?;
    let fg: Vec<Vec<(usize, usize)>> = captures.masks.iter().map(foreground_pixels).collect();
    let views: Vec<usize> = (0..captures.len()).filter(|&v| !fg[v].is_empty()).collect();
    if views.is_empty() {
        return Err(Error::NoForeground);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let k = config.gaussian_budget;
    let mut accepted: Vec<Vector3<f64>> = Vec::with_capacity(k);
    let mut rejected: Vec<Vector3<f64>> = Vec::new();
    let max_tries = 200 * k;
    let mut tries = 0;
    while accepted.len() < k && tries < max_tries {
        tries += 1;
        let v = views[rng.random_range(0..views.len())];
        let (px, py) = fg[v][rng.random_range(0..fg[v].len())];
        let cam = &captures.cameras[v];
        let k_ = &cam.intrinsics;
        let dist = cam.center().norm().max(1e-3);
        let z = dist * rng.random_range(config.init_depth[0]..=config.init_depth[1]);
        let u = px as f64 + rng.random_range(-0.5..0.5);
        let w = py as f64 + rng.random_range(-0.5..0.5);
        let pc = Vector3::new((u - k_.cx) / k_.fx * z, (w - k_.cy) / k_.fy * z, z);
        let p = cam.camera_to_world(&pc);
        let inside = captures
            .cameras
            .iter()
            .zip(&captures.masks)
            .all(|(c, m)| pixel_of(c, &p).is_some_and(|(x, y)| m.get(x, y, 0) > 0.5));
        if inside {
            accepted.push(p);
        } else if rejected.len() < k {
            rejected.push(p);
        }
    }
    let short = k - accepted.len();
    accepted.extend(rejected.into_iter().take(short));

    let mut gaussians = Vec::with_capacity(accepted.len());
    let spacing = knn_spacing(&accepted, 3);
    for (p, d) in accepted.iter().zip(spacing) {
        let mut color = Vector3::zeros();
        let mut n = 0.0;
        for (c, img) in captures.cameras.iter().zip(&captures.images) {
            if let Some((x, y)) = pixel_of(c, p) {
                color += Vector3::new(img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2))
                    .cast::<f64>();
                n += 1.0;
            }
        }
        let color = if n > 0.0 {
            color / n
        } else {
            Vector3::repeat(0.5)
        };
        let s = (0.5 * d).clamp(1e-3, 0.2);
        let mut g = Gaussian3D::isotropic(p.cast(), s as f32, color.cast(), 0.5);
        g.opacity_logit = logit(config.init_opacity) as f32;
        gaussians.push(g);
    }
    Ok(SplatScene::new(gaussians, Vector3::from(config.background)))
}

/// Mean distance to the `k` nearest neighbours of every point.
fn knn_spacing(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut best = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        best.clear();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = (p - q).norm_squared();
            if best.len() < k {
                best.push(d);
                best.sort_by(f64::total_cmp);
            } else if d < best[k - 1] {
                best[k - 1] = d;
                best.sort_by(f64::total_cmp);
            }
        }
        out.push(if best.is_empty() {
            0.05
        } else {
            best.iter().map(|d| d.sqrt()).sum::<f64>() / best.len() as f64
        });
    }
    out
}

/// Fits a scene to the captures starting from the back-projected initialization.
pub fn fit_scene(captures: &CaptureSet, config: &FitConfig) -> Result<FitResult> {
    let init = initialize(captures, config)?;
    fit_scene_from(captures, config, init)
}

struct SceneAdam {
    position: Adam<f32>,
    log_scale: Adam<f32>,
    rotation: Adam<f32>,
    color: Adam<f32>,
    opacity: Adam<f32>,
}

/// Fits starting from `init`; `gaussian_budget` is ignored.
pub fn fit_scene_from(
    captures: &CaptureSet,
    config: &FitConfig,
    init: SplatScene<f32>,
) -> Result<FitResult> {
    config.validate()?;
    if captures
        .masks
        .iter()
        .all(|m| m.data.iter().all(|v| *v <= 0.5))
    {
        return Err(Error::NoForeground);
    }
    if init.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut scene = init;
    let k = scene.len();
    let mut cameras = captures.cameras.clone();
    let ac = config.adam;
    let mut opt = SceneAdam {
        position: Adam::new(3 * k, ac),
        log_scale: Adam::new(3 * k, ac),
        rotation: Adam::new(4 * k, ac),
        color: Adam::new(3 * k, ac),
        opacity: Adam::new(k, ac),
    };
    let mut cam_opt: Vec<Adam<f32>> = (0..cameras.len()).map(|_| Adam::new(7, ac)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if order.is_empty() {
            order = (0..captures.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let v = order.pop().unwrap_or(0);
        let cam = cameras[v];
        let out = render(&scene, &cam);
        let (report, grads) = total_loss(
            std::slice::from_ref(&out),
            std::slice::from_ref(&captures.images[v]),
            std::slice::from_ref(&captures.masks[v]),
            &scene,
            &config.weights,
        )?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                stage: "fit",
                step,
                loss: report.total,
            });
        }
        losses.push(report.total);
        let up = Upstream {
            d_rgb: &grads.views[0].d_rgb,
            d_alpha: &grads.views[0].d_alpha,
        };
        let refine = config.camera_refine && step >= config.camera_warmup;
        let (mut sg, cg) = if refine {
            let (s, c) = render_backward_with_camera(&scene, &cam, up);
            (s, Some(c))
        } else {
            (render_backward(&scene, &cam, up), None)
        };
        for (a, b) in sg.log_scale.iter_mut().zip(&grads.log_scale) {
            *a += b;
        }
        if !sg.all_finite() {
            return Err(Error::Diverged {
                stage: "fit",
                step,
                loss: f64::NAN,
            });
        }
        let decay = cosine_lr(1.0, step, config.steps, 0, config.lr_final_fraction);
        let lr = |base: f64| (base * decay) as f32;
        opt.position.next_step();
        opt.log_scale.next_step();
        opt.rotation.next_step();
        opt.color.next_step();
        opt.opacity.next_step();
        let (lp, ls, lq, lc, lo) = (
            lr(config.lr.position),
            lr(config.lr.log_scale),
            lr(config.lr.rotation),
            lr(config.lr.color),
            lr(config.lr.opacity),
        );
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            for c in 0..3 {
                g.position[c] += opt.position.delta(3 * i + c, sg.position[i][c], lp);
                g.log_scale[c] += opt.log_scale.delta(3 * i + c, sg.log_scale[i][c], ls);
                g.color[c] =
                    (g.color[c] + opt.color.delta(3 * i + c, sg.color[i][c], lc)).clamp(0.0, 1.0);
            }
            for c in 0..4 {
                g.rotation[c] += opt.rotation.delta(4 * i + c, sg.rotation[i][c], lq);
            }
            g.rotation = normalize_quat(g.rotation);
            g.opacity_logit += opt.opacity.delta(i, sg.opacity_logit[i], lo);
        }
        if let Some(cg) = cg {
            let o = &mut cam_opt[v];
            o.next_step();
            let (lr_r, lr_t, lr_f) = (
                config.lr.camera_rotation as f32,
                config.lr.camera_translation as f32,
                config.lr.camera_focal as f32,
            );
            let grads = [
                cg.rotation.x,
                cg.rotation.y,
                cg.rotation.z,
                cg.translation.x,
                cg.translation.y,
                cg.translation.z,
                cg.log_focal,
            ];
            let mut d = [0.0f32; 7];
            for (i, g) in grads.iter().enumerate() {
                let rate = match i {
                    0..=2 => lr_r,
                    3..=5 => lr_t,
                    _ => lr_f,
                };
                d[i] = o.delta(i, *g, rate);
            }
            apply_camera_delta(&mut cameras[v], &d);
        }
    }

    let renders: Vec<RenderOutput<f32>> = cameras.iter().map(|c| render(&scene, c)).collect();
    let (report, _) = total_loss(
        &renders,
        &captures.images,
        &captures.masks,
        &scene,
        &config.weights,
    )?;
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            stage: "fit",
            step: config.steps,
            loss: report.total,
        });
    }
    Ok(FitResult {
        scene,
        cameras,
        report,
        losses,
    })
}

/// Folds a camera correction `(ω, τ, φ)` into the pose:
/// `R ← exp([ω]ₓ)·R`, `t ← t + τ`, `f ← f·e^φ`.
pub fn apply_camera_delta(cam: &mut Camera, d: &[f32; 7]) {
    let w = Vector3::new(d[0], d[1], d[2]).cast::<f64>();
    cam.pose.rotation = UnitQuaternion::from_scaled_axis(w) * cam.pose.rotation;
    cam.pose.translation += Vector3::new(d[3], d[4], d[5]).cast::<f64>();
    let f = (d[6] as f64).exp();
    cam.intrinsics.fx *= f;
    cam.intrinsics.fy *= f;
}

/// Fits a scene to the captures and renders it from every rig camera.
pub fn canonicalize(
    captures: &CaptureSet,
    rig: &CanonicalRig,
    config: &FitConfig,
) -> Result<CanonicalSet> {
    canonicalize_with_report(captures, rig, config).map(|(c, _)| c)
}

pub fn canonicalize_with_report(
    captures: &CaptureSet,
    rig: &CanonicalRig,
    config: &FitConfig,
) -> Result<(CanonicalSet, FitResult)> {
    let fit = fit_scene(captures, config)?;
    Ok((CanonicalSet::from_scene(fit.scene.clone(), rig), fit))
}

/// Exponential moving average with factor `beta` (bias-corrected).
pub fn smoothed(values: &[f64], beta: f64) -> Vec<f64> {
    let mut ema = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            ema = beta * ema + (1.0 - beta) * v;
            ema / (1.0 - beta.powi(i as i32 + 1))
        })
        .collect()
}

#[doc(hidden)]
pub fn unit_quat(q: &Vector4<f32>) -> bool {
    (q.norm() - 1.0).abs() < 1e-6
}
