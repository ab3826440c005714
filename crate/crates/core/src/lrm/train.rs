use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LrmInput, LrmModel};
use crate::camera::{orbit_camera, Camera, CanonicalRig};
use crate::fit::CanonicalSet;
use crate::loss::{total_loss, LossReport, LossWeights};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use crate::raster::{render, render_backward, SceneGradients, Upstream};
use crate::splat::SplatScene;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub lr_final_fraction: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Supervision cameras drawn from the canonical rig each step.
    pub rig_supervision: usize,
    /// Supervision cameras at random azimuths off the rig each step.
    pub novel_supervision: usize,
    /// Elevation range in degrees for the novel supervision cameras.
    pub novel_elevation: [f64; 2],
    /// Canonical view indices fed to the model; all rig views when absent.
    pub input_views: Option<Vec<usize>>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            warmup: 25,
            lr_final_fraction: 0.1,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            rig_supervision: 2,
            novel_supervision: 2,
            novel_elevation: [-10.0, 25.0],
            input_views: None,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr must be >= 0 and clip_norm > 0");
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return bad("lr_final_fraction must lie in [0, 1]");
        }
        if self.rig_supervision + self.novel_supervision == 0 {
            return bad("at least one supervision camera is required");
        }
        if !(self.novel_elevation[0] <= self.novel_elevation[1]) {
            return bad("novel_elevation must be an ordered range");
        }
        Ok(())
    }
}

/// A training or test subject: its canonical views and the ground-truth scene
/// used to render supervision targets from any camera.
#[derive(Debug, Clone)]
pub struct TrainSubject {
    pub id: String,
    pub canonical: CanonicalSet,
    pub gt: SplatScene<f32>,
}

impl TrainSubject {
    pub fn input(&self, views: Option<&[usize]>) -> Result<LrmInput> {
        LrmInput::from_canonical(&self.canonical, views)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    pub last: LossReport,
}

/// `rig_supervision` distinct rig cameras followed by `novel_supervision`
/// cameras on the rig's orbit at random azimuths and elevations.
pub fn supervision_cameras<R: Rng>(
    rig: &CanonicalRig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Vec<Camera> {
    let k = cfg.rig_supervision.min(rig.len());
    let mut cams: Vec<Camera> = sample(rng, rig.len(), k)
        .into_iter()
        .map(|i| rig.cameras[i])
        .collect();
    let intrinsics = rig.cameras[0].intrinsics;
    let [e0, e1] = cfg.novel_elevation;
    for _ in 0..cfg.novel_supervision {
        let az = rng.random_range(0.0..360.0);
        let el = if e1 > e0 {
            rng.random_range(e0..e1)
        } else {
            e0
        };
        cams.push(orbit_camera(intrinsics, rig.radius, az, el));
    }
    cams
}

/// Objective and its gradient with respect to every model parameter, for one
/// subject seen through `cameras`.
pub fn loss_and_gradient<T: Real>(
    model: &LrmModel<T>,
    input: &LrmInput,
    gt: &SplatScene<f32>,
    cameras: &[Camera],
    weights: &LossWeights,
) -> Result<(LossReport, Vec<T>)> {
    let pred = model.forward(input)?;
    let gt: SplatScene<T> = gt.cast();
    let renders: Vec<_> = cameras.iter().map(|c| render(&pred.scene, c)).collect();
    let (targets, masks): (Vec<_>, Vec<_>) = cameras
        .iter()
        .map(|c| {
            let o = render(&gt, c);
            (o.rgb, o.alpha)
        })
        .unzip();
    let (report, lg) = total_loss(&renders, &targets, &masks, &pred.scene, weights)?;
    let mut sg = SceneGradients::zeros(pred.scene.len());
    for (cam, v) in cameras.iter().zip(&lg.views) {
        let g = render_backward(
            &pred.scene,
            cam,
            Upstream {
                d_rgb: &v.d_rgb,
                d_alpha: &v.d_alpha,
            },
        );
        sg.add_scaled(&g, T::one());
    }
    for (a, b) in sg.log_scale.iter_mut().zip(&lg.log_scale) {
        *a += *b;
    }
    let mut grads = vec![T::zero(); model.params.len()];
    model.backward(&pred, &input.cameras, &sg, &mut grads);
    Ok((report, grads))
}

/// Trains `model` in place. `on_step` sees every step's loss report.
pub fn train(
    model: &mut LrmModel<f32>,
    data: &[TrainSubject],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut adam = Adam::<f32>::new(model.params.len(), cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last = None;
    for step in 0..cfg.steps {
        let subject = &data[rng.random_range(0..data.len())];
        let input = subject.input(cfg.input_views.as_deref())?;
        let cams = supervision_cameras(&subject.canonical.rig, cfg, &mut rng);
        let (report, mut grads) =
            loss_and_gradient(model, &input, &subject.gt, &cams, &cfg.weights)?;
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !report.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                stage: "train",
                step,
                loss: report.total,
            });
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.lr_final_fraction) as f32;
        adam.next_step();
        for (i, (p, g)) in model.params.iter_mut().zip(&grads).enumerate() {
            *p += adam.delta(i, *g, lr);
        }
        if !model.all_finite() {
            return Err(Error::Diverged {
                stage: "train",
                step,
                loss: report.total,
            });
        }
        on_step(step, &report);
        losses.push(report.total);
        last = Some(report);
    }
    Ok(TrainReport {
        losses,
        last: last.expect("steps >= 1"),
    })
}
