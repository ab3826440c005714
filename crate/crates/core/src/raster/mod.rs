//! Differentiable EWA splatting.
//!
//! Forward: Gaussians are projected with the local affine approximation of
//! the pinhole model, binned into 16×16 tiles by the axis-aligned box of their
//! 3σ ellipse, globally sorted by depth and composited front to back. The 2D
//! kernel is a Gaussian truncated at Mahalanobis radius 3 and shifted so it is
//! continuous (zero) at the cutoff, which makes the tile bounding boxes exact.
//!
//! Backward: each pixel's contributor list is rebuilt, then walked in reverse
//! with running "color behind" and "transmittance behind" accumulators, so no
//! division by `1 - a` is ever needed.

mod project;
mod reference;

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

pub use project::{project_gaussian, Projected};
pub use reference::render_reference;

use crate::camera::Camera;
use crate::imageio::ImageBuf;
use crate::splat::SplatScene;
use crate::Real;

use project::{project_backward, project_splat, CameraT, ProjectionGrad, Splat};

pub const TILE_SIZE: usize = 16;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Isotropic dilation added to every projected covariance, in pixels².
pub const LOW_PASS: f64 = 0.3;
/// Kernel support in Mahalanobis distance².
pub const CUTOFF_SQ: f64 = 9.0;
/// Projected means further than this fraction outside the image are culled.
pub const GUARD_BAND: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T: Real = f32> {
    pub rgb: ImageBuf<T>,
    pub alpha: ImageBuf<T>,
    /// Final per-pixel transmittance; `alpha = 1 - transmittance`.
    pub transmittance: ImageBuf<T>,
}

/// Partial derivatives with respect to the stored (raw) Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients<T: Real = f32> {
    pub position: Vec<Vector3<T>>,
    pub log_scale: Vec<Vector3<T>>,
    pub rotation: Vec<Vector4<T>>,
    pub color: Vec<Vector3<T>>,
    pub opacity_logit: Vec<T>,
}

impl<T: Real> SceneGradients<T> {
    pub fn zeros(k: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); k],
            log_scale: vec![Vector3::zeros(); k],
            rotation: vec![Vector4::zeros(); k],
            color: vec![Vector3::zeros(); k],
            opacity_logit: vec![T::zero(); k],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// `self += other * w`
    pub fn add_scaled(&mut self, other: &SceneGradients<T>, w: T) {
        for i in 0..self.len() {
            self.position[i] += other.position[i] * w;
            self.log_scale[i] += other.log_scale[i] * w;
            self.rotation[i] += other.rotation[i] * w;
            self.color[i] += other.color[i] * w;
            self.opacity_logit[i] += other.opacity_logit[i] * w;
        }
    }

    pub fn all_finite(&self) -> bool {
        let f = |v: T| v.is_finite();
        self.position.iter().all(|v| v.iter().all(|x| f(*x)))
            && self.log_scale.iter().all(|v| v.iter().all(|x| f(*x)))
            && self.rotation.iter().all(|v| v.iter().all(|x| f(*x)))
            && self.color.iter().all(|v| v.iter().all(|x| f(*x)))
            && self.opacity_logit.iter().all(|x| f(*x))
    }
}

/// Gradient with respect to a small correction of the camera:
/// `R ← exp([ω]ₓ)·R`, `t ← t + τ`, `(fx, fy) ← (fx, fy)·e^φ`, evaluated at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraGradients<T: Real = f32> {
    pub rotation: Vector3<T>,
    pub translation: Vector3<T>,
    pub log_focal: T,
}

/// `∂L/∂rgb` (3 channels) and `∂L/∂alpha` (1 channel).
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a, T: Real> {
    pub d_rgb: &'a ImageBuf<T>,
    pub d_alpha: &'a ImageBuf<T>,
}

#[inline]
fn cutoff_offset<T: Real>() -> T {
    T::lit((-0.5 * CUTOFF_SQ).exp())
}

#[inline]
fn kernel_norm<T: Real>() -> T {
    T::lit(1.0 - (1.0 + 0.5 * CUTOFF_SQ) * (-0.5 * CUTOFF_SQ).exp())
}

/// Truncated kernel value and `exp(-q/2)`, or `None` outside the support.
/// The tangent of `exp(-q/2)` at the cutoff is subtracted so the kernel and
/// its slope both reach zero there, then the result is rescaled to peak at 1.
#[inline(always)]
fn kernel<T: Real>(s: &Splat<T>, px: T, py: T) -> Option<(T, T, T, T)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = s.conic[0] * dx * dx + T::lit(2.0) * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if !(q <= T::lit(CUTOFF_SQ)) {
        return None;
    }
    let e = (T::lit(-0.5) * q).exp();
    let off = cutoff_offset::<T>();
    let tangent = off * (T::one() - T::lit(0.5) * (q - T::lit(CUTOFF_SQ)));
    let g = ((e - tangent) / kernel_norm::<T>()).max(T::zero());
    Some((g, e, dx, dy))
}

struct Prepared<T: Real> {
    splats: Vec<Option<Splat<T>>>,
    /// Visible splat ids, sorted by (depth, id).
    order: Vec<usize>,
    tiles_x: usize,
    /// Per tile: splat ids in depth order.
    tiles: Vec<Vec<u32>>,
}

fn prepare<T: Real>(scene: &SplatScene<T>, cam: &CameraT<T>) -> Prepared<T> {
    let splats: Vec<Option<Splat<T>>> = scene
        .gaussians
        .par_iter()
        .map(|g| project_splat(cam, g, true))
        .collect();
    let order = depth_order(&splats);
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let ts = T::lit(TILE_SIZE as f64);
    for &id in &order {
        let s = splats[id].as_ref().unwrap();
        let x0 = ((s.mean[0] - s.extent[0]) / ts).floor().to_f64();
        let x1 = ((s.mean[0] + s.extent[0]) / ts).floor().to_f64();
        let y0 = ((s.mean[1] - s.extent[1]) / ts).floor().to_f64();
        let y1 = ((s.mean[1] + s.extent[1]) / ts).floor().to_f64();
        if x1 < 0.0 || y1 < 0.0 || x0 >= tiles_x as f64 || y0 >= tiles_y as f64 {
            continue;
        }
        let (x0, y0) = (x0.max(0.0) as usize, y0.max(0.0) as usize);
        let (x1, y1) = (
            (x1 as usize).min(tiles_x - 1),
            (y1 as usize).min(tiles_y - 1),
        );
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(id as u32);
            }
        }
    }
    Prepared {
        splats,
        order,
        tiles_x,
        tiles,
    }
}

fn depth_order<T: Real>(splats: &[Option<Splat<T>>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (
            splats[a].as_ref().unwrap().depth,
            splats[b].as_ref().unwrap().depth,
        );
        da.partial_cmp(&db)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Pixels per side of the blocks each tile list is refined into before
/// compositing. A Gaussian whose box misses a block has zero kernel on every
/// pixel of it, so the refinement changes no result.
const BLOCK: usize = 4;

/// Slots of `list` (kept in depth order) per `BLOCK × BLOCK` block of the
/// tile spanning `[x0, x1) × [y0, y1)`.
fn block_lists<T: Real>(
    splats: &[Option<Splat<T>>],
    list: &[u32],
    (x0, y0, x1, y1): (usize, usize, usize, usize),
) -> Vec<((usize, usize, usize, usize), Vec<u32>)> {
    let mut blocks = Vec::new();
    for by in (y0..y1).step_by(BLOCK) {
        for bx in (x0..x1).step_by(BLOCK) {
            let (ex, ey) = ((bx + BLOCK).min(x1), (by + BLOCK).min(y1));
            let (lx, hx) = (T::lit(bx as f64), T::lit((ex - 1) as f64));
            let (ly, hy) = (T::lit(by as f64), T::lit((ey - 1) as f64));
            let slots = list
                .iter()
                .enumerate()
                .filter(|(_, &id)| {
                    let s = splats[id as usize].as_ref().unwrap();
                    s.mean[0] + s.extent[0] >= lx
                        && s.mean[0] - s.extent[0] <= hx
                        && s.mean[1] + s.extent[1] >= ly
                        && s.mean[1] - s.extent[1] <= hy
                })
                .map(|(slot, _)| slot as u32)
                .collect();
            blocks.push(((bx, by, ex, ey), slots));
        }
    }
    blocks
}

fn tile_pixels(tile: usize, tiles_x: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(w), (y0 + TILE_SIZE).min(h))
}

/// Front-to-back compositing of one pixel. Returns `(rgb, T)`.
#[inline]
fn composite_pixel<T: Real>(
    splats: &[Option<Splat<T>>],
    list: impl Iterator<Item = usize>,
    px: T,
    py: T,
    mut trace: Option<&mut Vec<T>>,
) -> ([T; 3], T) {
    let mut t = T::one();
    let mut c = [T::zero(); 3];
    let eps = T::lit(TRANSMITTANCE_EPS);
    for id in list {
        let s = splats[id].as_ref().unwrap();
        let Some((g, ..)) = kernel(s, px, py) else {
            continue;
        };
        let a = s.opacity * g;
        let w = a * t;
        for k in 0..3 {
            c[k] += s.color[k] * w;
        }
        let t_next = t * (T::one() - a);
        debug_assert!(t_next <= t, "transmittance increased");
        t = t_next;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(t);
        }
        if t < eps {
            break;
        }
    }
    (c, t)
}

/// Tile-based forward render. Deterministic for fixed inputs, independent of
/// the number of worker threads.
pub fn render<T: Real>(scene: &SplatScene<T>, camera: &Camera) -> RenderOutput<T> {
    let cam = CameraT::new(camera);
    let prep = prepare(scene, &cam);
    let (w, h) = (cam.width, cam.height);
    let bg = scene.background;
    let tiles: Vec<(usize, Vec<([T; 3], T)>)> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = tile_pixels(tile, prep.tiles_x, w, h);
            let list = &prep.tiles[tile];
            let tw = x1 - x0;
            let mut out = vec![([T::zero(); 3], T::one()); tw * (y1 - y0)];
            for ((bx0, by0, bx1, by1), slots) in block_lists(&prep.splats, list, (x0, y0, x1, y1)) {
                for y in by0..by1 {
                    for x in bx0..bx1 {
                        out[(y - y0) * tw + x - x0] = composite_pixel(
                            &prep.splats,
                            slots.iter().map(|&s| list[s as usize] as usize),
                            T::lit(x as f64),
                            T::lit(y as f64),
                            None,
                        );
                    }
                }
            }
            (tile, out)
        })
        .collect();
    assemble(tiles, prep.tiles_x, w, h, bg)
}

fn assemble<T: Real>(
    tiles: Vec<(usize, Vec<([T; 3], T)>)>,
    tiles_x: usize,
    w: usize,
    h: usize,
    bg: Vector3<T>,
) -> RenderOutput<T> {
    let mut rgb = ImageBuf::new(w, h, 3);
    let mut alpha = ImageBuf::new(w, h, 1);
    let mut trans = ImageBuf::new(w, h, 1);
    for (tile, px) in tiles {
        let (x0, y0, x1, _) = tile_pixels(tile, tiles_x, w, h);
        let tw = x1 - x0;
        for (k, (c, t)) in px.into_iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            let p = y * w + x;
            for ch in 0..3 {
                rgb.data[p * 3 + ch] = c[ch] + t * bg[ch];
            }
            alpha.data[p] = T::one() - t;
            trans.data[p] = t;
        }
    }
    RenderOutput {
        rgb,
        alpha,
        transmittance: trans,
    }
}

/// Transmittance after each contributing Gaussian at pixel `(x, y)`, following
/// exactly the tiled compositing order.
pub fn transmittance_trace<T: Real>(
    scene: &SplatScene<T>,
    camera: &Camera,
    x: usize,
    y: usize,
) -> Vec<T> {
    let cam = CameraT::new(camera);
    let prep = prepare(scene, &cam);
    let tile = (y / TILE_SIZE) * prep.tiles_x + x / TILE_SIZE;
    let mut trace = Vec::new();
    composite_pixel(
        &prep.splats,
        prep.tiles[tile].iter().map(|&i| i as usize),
        T::lit(x as f64),
        T::lit(y as f64),
        Some(&mut trace),
    );
    trace
}

/// Number of Gaussians that survive culling.
pub fn visible_count<T: Real>(scene: &SplatScene<T>, camera: &Camera) -> usize {
    let cam = CameraT::new(camera);
    prepare(scene, &cam).order.len()
}

#[derive(Clone, Copy, Default)]
struct PixelGrad<T: Real> {
    mean: [T; 2],
    conic: [T; 3],
    color: [T; 3],
    opacity: T,
}

struct Contribution<T: Real> {
    slot: usize,
    a: T,
    g: T,
    e: T,
    dx: T,
    dy: T,
    t: T,
}

/// Analytic gradients of `Σ d_rgb·rgb + Σ d_alpha·alpha` with respect to the
/// scene parameters.
pub fn render_backward<T: Real>(
    scene: &SplatScene<T>,
    camera: &Camera,
    upstream: Upstream<'_, T>,
) -> SceneGradients<T> {
    render_backward_with_camera(scene, camera, upstream).0
}

/// [`render_backward`] plus the gradient with respect to a camera correction.
pub fn render_backward_with_camera<T: Real>(
    scene: &SplatScene<T>,
    camera: &Camera,
    upstream: Upstream<'_, T>,
) -> (SceneGradients<T>, CameraGradients<T>) {
    let cam = CameraT::new(camera);
    let (w, h) = (cam.width, cam.height);
    assert_eq!(
        (
            upstream.d_rgb.width,
            upstream.d_rgb.height,
            upstream.d_rgb.channels
        ),
        (w, h, 3)
    );
    assert_eq!(
        (
            upstream.d_alpha.width,
            upstream.d_alpha.height,
            upstream.d_alpha.channels
        ),
        (w, h, 1)
    );
    let prep = prepare(scene, &cam);
    let bg = scene.background;

    let per_tile: Vec<Vec<PixelGrad<T>>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            let mut acc = vec![PixelGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (x0, y0, x1, y1) = tile_pixels(tile, prep.tiles_x, w, h);
            let mut contrib: Vec<Contribution<T>> = Vec::new();
            let eps = T::lit(TRANSMITTANCE_EPS);
            for ((bx0, by0, bx1, by1), slots) in block_lists(&prep.splats, list, (x0, y0, x1, y1)) {
                for y in by0..by1 {
                    for x in bx0..bx1 {
                        let p = y * w + x;
                        let up_c = [
                            upstream.d_rgb.data[p * 3],
                            upstream.d_rgb.data[p * 3 + 1],
                            upstream.d_rgb.data[p * 3 + 2],
                        ];
                        let up_a = upstream.d_alpha.data[p];
                        if up_c.iter().all(|v| *v == T::zero()) && up_a == T::zero() {
                            continue;
                        }
                        let (pxf, pyf) = (T::lit(x as f64), T::lit(y as f64));
                        contrib.clear();
                        let mut t = T::one();
                        for &slot in &slots {
                            let slot = slot as usize;
                            let s = prep.splats[list[slot] as usize].as_ref().unwrap();
                            let Some((g, e, dx, dy)) = kernel(s, pxf, pyf) else {
                                continue;
                            };
                            let a = s.opacity * g;
                            contrib.push(Contribution {
                                slot,
                                a,
                                g,
                                e,
                                dx,
                                dy,
                                t,
                            });
                            t = t * (T::one() - a);
                            if t < eps {
                                break;
                            }
                        }
                        // reverse sweep
                        let mut behind = [T::zero(); 3];
                        let mut t_behind = T::one();
                        let (off, norm) = (cutoff_offset::<T>(), kernel_norm::<T>());
                        for c in contrib.iter().rev() {
                            let s = prep.splats[list[c.slot] as usize].as_ref().unwrap();
                            let mut d_a = up_a * c.t * t_behind;
                            for k in 0..3 {
                                d_a += up_c[k] * c.t * (s.color[k] - behind[k] - t_behind * bg[k]);
                            }
                            let pg = &mut acc[c.slot];
                            for k in 0..3 {
                                pg.color[k] += up_c[k] * c.a * c.t;
                            }
                            pg.opacity += d_a * c.g;
                            let d_g = d_a * s.opacity;
                            let d_q = d_g * (T::lit(-0.5) * (c.e - off) / norm);
                            let (a_, b_, cc) = (s.conic[0], s.conic[1], s.conic[2]);
                            let two = T::lit(2.0);
                            pg.mean[0] -= d_q * (two * a_ * c.dx + two * b_ * c.dy);
                            pg.mean[1] -= d_q * (two * b_ * c.dx + two * cc * c.dy);
                            pg.conic[0] += d_q * c.dx * c.dx;
                            pg.conic[1] += d_q * two * c.dx * c.dy;
                            pg.conic[2] += d_q * c.dy * c.dy;
                            for k in 0..3 {
                                behind[k] = s.color[k] * c.a + (T::one() - c.a) * behind[k];
                            }
                            t_behind = (T::one() - c.a) * t_behind;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    // deterministic merge in tile order
    let k = scene.len();
    let mut merged = vec![PixelGrad::<T>::default(); k];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (slot, pg) in acc.iter().enumerate() {
            let m = &mut merged[prep.tiles[tile][slot] as usize];
            for i in 0..2 {
                m.mean[i] += pg.mean[i];
            }
            for i in 0..3 {
                m.conic[i] += pg.conic[i];
                m.color[i] += pg.color[i];
            }
            m.opacity += pg.opacity;
        }
    }

    let per_gaussian: Vec<Option<ProjectionGrad<T>>> = (0..k)
        .into_par_iter()
        .map(|i| {
            prep.splats[i].as_ref().map(|s| {
                let m = &merged[i];
                project_backward(
                    &cam,
                    &scene.gaussians[i],
                    s,
                    &m.mean,
                    &m.conic,
                    &m.color,
                    m.opacity,
                )
            })
        })
        .collect();

    let mut grads = SceneGradients::zeros(k);
    let mut cam_grad = CameraGradients {
        rotation: Vector3::zeros(),
        translation: Vector3::zeros(),
        log_focal: T::zero(),
    };
    for (i, pg) in per_gaussian.into_iter().enumerate() {
        if let Some(pg) = pg {
            grads.position[i] = pg.position;
            grads.log_scale[i] = pg.log_scale;
            grads.rotation[i] = pg.rotation;
            grads.color[i] = pg.color;
            grads.opacity_logit[i] = pg.opacity_logit;
            cam_grad.rotation += pg.cam_rotation;
            cam_grad.translation += pg.cam_translation;
            cam_grad.log_focal += pg.cam_log_focal;
        }
    }
    (grads, cam_grad)
}
