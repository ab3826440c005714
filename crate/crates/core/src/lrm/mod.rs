//! Multi-view reconstruction model.
//!
//! Every input view is concatenated with its per-pixel Plücker ray map, cut
//! into `p × p` patches and embedded as tokens. A pre-norm transformer attends
//! across the tokens of all views, and a linear head un-patchifies back to
//! twelve channels per input pixel, each decoded to one Gaussian sitting on
//! that pixel's ray. Gradients are hand-written end to end, through the
//! rasterizer and into the transformer.

mod checkpoint;
mod eval;
mod net;
mod train;

use nalgebra::{DMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use eval::{comparison_grid, eval_cameras, evaluate, EvalReport, SubjectScore};
pub use train::{
    loss_and_gradient, supervision_cameras, train, TrainConfig, TrainReport, TrainSubject,
};

use crate::camera::{pixel_ray_map, Camera};
use crate::fit::CanonicalSet;
use crate::imageio::ImageBuf;
use crate::raster::SceneGradients;
use crate::splat::{
    max_log_scale, min_log_scale, normalize_quat, normalize_quat_backward, sigmoid, Gaussian3D,
    SplatScene, OPACITY_LOGIT_LIMIT,
};
use crate::{Error, Real, Result};
use net::{Cache, Layout};

/// RGB plus the six Plücker coordinates.
pub const INPUT_CHANNELS: usize = 9;
/// Ray distance, 3 log-scales, 4 quaternion, 3 color, 1 opacity.
pub const CHANNELS: usize = 12;
/// Overlapping views stack many Gaussians along each ray; starting them
/// faint keeps every layer reachable by the gradient.
const INIT_OPACITY_LOGIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrmConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of input views M.
    pub views: usize,
    /// Ray distance range covered by the depth channel.
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

impl Default for LrmConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 128,
            layers: 4,
            heads: 4,
            views: 8,
            near: 1.4,
            far: 3.2,
            seed: 0,
        }
    }
}

impl LrmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "patch {} must divide image size {}",
                self.patch, self.image_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.views == 0 {
            return bad("at least one input view is required".into());
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return bad(format!(
                "need 0 < near < far (got {}, {})",
                self.near, self.far
            ));
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn num_tokens(&self) -> usize {
        self.views * self.tokens_per_view()
    }

    /// Gaussians per forward pass, `M·H·W`.
    pub fn num_gaussians(&self) -> usize {
        self.views * self.image_size * self.image_size
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).total
    }
}

/// Posed input views for one forward pass.
#[derive(Debug, Clone)]
pub struct LrmInput {
    pub views: Vec<ImageBuf<f32>>,
    pub cameras: Vec<Camera>,
}

impl LrmInput {
    pub fn new(views: Vec<ImageBuf<f32>>, cameras: Vec<Camera>) -> Result<Self> {
        if views.len() != cameras.len() || views.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} views for {} cameras",
                views.len(),
                cameras.len()
            )));
        }
        for (v, c) in views.iter().zip(&cameras) {
            if (v.width, v.height, v.channels) != (c.width(), c.height(), 3) {
                return Err(Error::ShapeMismatch(format!(
                    "{}x{}x{} view for a {}x{} camera",
                    v.width,
                    v.height,
                    v.channels,
                    c.width(),
                    c.height()
                )));
            }
        }
        Ok(Self { views, cameras })
    }

    /// The canonical views at `indices` (all of them when `None`).
    pub fn from_canonical(set: &CanonicalSet, indices: Option<&[usize]>) -> Result<Self> {
        let all: Vec<usize> = (0..set.views.len()).collect();
        let idx = indices.unwrap_or(&all);
        if let Some(&bad) = idx.iter().find(|&&i| i >= set.views.len()) {
            return Err(Error::ShapeMismatch(format!(
                "view {bad} of a {}-view set",
                set.views.len()
            )));
        }
        Self::new(
            idx.iter().map(|&i| set.views[i].clone()).collect(),
            idx.iter().map(|&i| set.rig.cameras[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrmModel<T: Real = f32> {
    pub config: LrmConfig,
    pub params: Vec<T>,
}

/// Head outputs with the state needed to backpropagate through decoding.
pub struct Prediction<T: Real> {
    pub scene: SplatScene<T>,
    raw: DMatrix<T>,
    cache: Cache<T>,
    rays: Vec<(Vector3<T>, Vector3<T>)>,
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl LrmModel<f32> {
    /// Randomly initialized model. The head bias decodes, before any
    /// training, to mid-range depths, pixel-sized isotropic Gaussians with
    /// identity rotation, gray color and low opacity.
    pub fn new(config: LrmConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let p2 = config.patch * config.patch;
        let mut bias = vec![0.0; CHANNELS * p2];
        for px in 0..p2 {
            bias[px * CHANNELS] = softplus_inv(0.5);
            bias[px * CHANNELS + 4] = 1.0;
            bias[px * CHANNELS + 11] = INIT_OPACITY_LOGIT;
        }
        let params = net::init_params(&config, &layout, &bias);
        Ok(Self { config, params })
    }
}

impl<T: Real> LrmModel<T> {
    pub fn from_params(config: LrmConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let n = config.num_params();
        if params.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, config needs {n}",
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> LrmModel<U> {
        LrmModel {
            config: self.config.clone(),
            params: self.params.iter().map(|v| U::lit(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, input: &LrmInput) -> Result<()> {
        let c = &self.config;
        if input.views.len() != c.views {
            return Err(Error::ShapeMismatch(format!(
                "{} input views, model expects {}",
                input.views.len(),
                c.views
            )));
        }
        for v in &input.views {
            if v.width != c.image_size || v.height != c.image_size {
                return Err(Error::ShapeMismatch(format!(
                    "{}x{} view, model expects {}x{}",
                    v.width, v.height, c.image_size, c.image_size
                )));
            }
        }
        Ok(())
    }

    /// `M·(H/p)² × 9·p²` patch matrix. Token blocks follow view order; within
    /// a view, patches are row-major, and within a patch each pixel
    /// contributes `[r, g, b, d, o × d]`.
    pub fn patchify(&self, input: &LrmInput) -> Result<DMatrix<T>> {
        self.check_input(input)?;
        let c = &self.config;
        let (s, p) = (c.image_size, c.patch);
        let per_row = s / p;
        let mut out = DMatrix::zeros(c.num_tokens(), INPUT_CHANNELS * p * p);
        for (v, (img, cam)) in input.views.iter().zip(&input.cameras).enumerate() {
            let rays = pixel_ray_map(cam);
            for y in 0..s {
                for x in 0..s {
                    let token = v * c.tokens_per_view() + (y / p) * per_row + x / p;
                    let base = ((y % p) * p + x % p) * INPUT_CHANNELS;
                    for ch in 0..3 {
                        out[(token, base + ch)] = T::lit(img.get(x, y, ch) as f64);
                    }
                    for (k, val) in rays.at(x, y).plucker.iter().enumerate() {
                        out[(token, base + 3 + k)] = T::lit(*val);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Embedded tokens, `M·(H/p)² × d`.
    pub fn tokenize(&self, input: &LrmInput) -> Result<DMatrix<T>> {
        let layout = Layout::new(&self.config);
        Ok(net::embed(&layout, &self.params, &self.patchify(input)?))
    }

    /// Predicts the scene for the given input views.
    pub fn predict(&self, input: &LrmInput) -> Result<SplatScene<T>> {
        Ok(self.forward(input)?.scene)
    }

    pub fn forward(&self, input: &LrmInput) -> Result<Prediction<T>> {
        let layout = Layout::new(&self.config);
        let patches = self.patchify(input)?;
        let tokens = net::embed(&layout, &self.params, &patches);
        let (raw, cache) = net::trunk(&self.config, &layout, &self.params, patches, tokens);
        let rays: Vec<(Vector3<T>, Vector3<T>)> = input
            .cameras
            .iter()
            .flat_map(|cam| {
                pixel_ray_map(cam)
                    .rays
                    .into_iter()
                    .map(|r| (r.origin.map(T::lit), r.direction.map(T::lit)))
            })
            .collect();
        let scene = self.decode(&raw, &rays, &input.cameras);
        Ok(Prediction {
            scene,
            raw,
            cache,
            rays,
        })
    }

    /// Head row and column of the twelve channels of Gaussian `g`.
    fn locate(&self, g: usize) -> (usize, usize) {
        let c = &self.config;
        let (s, p) = (c.image_size, c.patch);
        let v = g / (s * s);
        let (y, x) = ((g % (s * s)) / s, g % s);
        let token = v * c.tokens_per_view() + (y / p) * (s / p) + x / p;
        (token, ((y % p) * p + x % p) * CHANNELS)
    }

    /// Log-scale offset making a zero head output one pixel wide at mid depth.
    fn scale_offset(&self, cam: &Camera) -> T {
        let mid = 0.5 * (self.config.near + self.config.far);
        T::lit((mid / cam.intrinsics.fx).ln())
    }

    fn decode(
        &self,
        raw: &DMatrix<T>,
        rays: &[(Vector3<T>, Vector3<T>)],
        cameras: &[Camera],
    ) -> SplatScene<T> {
        let c = &self.config;
        let (near, span) = (T::lit(c.near), T::lit(c.far - c.near));
        let lim = T::lit(OPACITY_LOGIT_LIMIT);
        let per_view = c.image_size * c.image_size;
        let offsets: Vec<T> = cameras.iter().map(|cam| self.scale_offset(cam)).collect();
        let gaussians = (0..c.num_gaussians())
            .map(|g| {
                let (row, col) = self.locate(g);
                let r = |k: usize| raw[(row, col + k)];
                let (o, d) = rays[g];
                let t = near + softplus(r(0)) * span;
                let off = offsets[g / per_view];
                let log_scale = Vector3::new(r(1), r(2), r(3))
                    .map(|v| (v + off).clamp(min_log_scale::<T>(), max_log_scale::<T>()));
                Gaussian3D {
                    position: o + d * t,
                    log_scale,
                    rotation: normalize_quat(Vector4::new(r(4), r(5), r(6), r(7))),
                    color: Vector3::new(sigmoid(r(8)), sigmoid(r(9)), sigmoid(r(10))),
                    opacity_logit: r(11).clamp(-lim, lim),
                }
            })
            .collect();
        SplatScene::new(gaussians, Vector3::repeat(T::one()))
    }

    /// Gradient with respect to the head output given scene gradients.
    fn decode_backward(
        &self,
        pred: &Prediction<T>,
        cameras: &[Camera],
        g: &SceneGradients<T>,
    ) -> DMatrix<T> {
        let c = &self.config;
        let span = T::lit(c.far - c.near);
        let lim = T::lit(OPACITY_LOGIT_LIMIT);
        let per_view = c.image_size * c.image_size;
        let offsets: Vec<T> = cameras.iter().map(|cam| self.scale_offset(cam)).collect();
        let raw = &pred.raw;
        let mut d = DMatrix::zeros(raw.nrows(), raw.ncols());
        for i in 0..c.num_gaussians() {
            let (row, col) = self.locate(i);
            let r = |k: usize| raw[(row, col + k)];
            let (_, dir) = pred.rays[i];
            d[(row, col)] = g.position[i].dot(&dir) * span * sigmoid(r(0));
            let off = offsets[i / per_view];
            for k in 0..3 {
                let v = r(1 + k) + off;
                if v > min_log_scale::<T>() && v < max_log_scale::<T>() {
                    d[(row, col + 1 + k)] = g.log_scale[i][k];
                }
            }
            let q = Vector4::new(r(4), r(5), r(6), r(7));
            let dq = normalize_quat_backward(&q, &g.rotation[i]);
            for k in 0..4 {
                d[(row, col + 4 + k)] = dq[k];
            }
            let col_c = &pred.scene.gaussians[i].color;
            for k in 0..3 {
                d[(row, col + 8 + k)] = g.color[i][k] * col_c[k] * (T::one() - col_c[k]);
            }
            if r(11) > -lim && r(11) < lim {
                d[(row, col + 11)] = g.opacity_logit[i];
            }
        }
        d
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂scene`.
    pub fn backward(
        &self,
        pred: &Prediction<T>,
        cameras: &[Camera],
        g: &SceneGradients<T>,
        grads: &mut [T],
    ) {
        let d_raw = self.decode_backward(pred, cameras, g);
        let layout = Layout::new(&self.config);
        net::backward(
            &self.config,
            &layout,
            &self.params,
            &pred.cache,
            &d_raw,
            grads,
        );
    }
}

#[cfg(test)]
mod tests;
