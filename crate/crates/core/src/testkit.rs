//! Random fixtures shared by unit, integration and acceptance tests.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{orbit_camera, Camera, CameraIntrinsics};
use crate::splat::{Gaussian3D, SplatScene};
use crate::Real;

pub struct SceneRanges {
    pub extent: f64,
    pub log_scale: (f64, f64),
    pub opacity_logit: (f64, f64),
    /// Minimum camera-depth gap between any two Gaussians.
    pub min_depth_gap: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            extent: 0.6,
            log_scale: (0.03f64.ln(), 0.25f64.ln()),
            opacity_logit: (-2.0, 3.0),
            min_depth_gap: 1e-4,
        }
    }
}

pub fn test_camera(size: usize, seed: u64) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let k = CameraIntrinsics::from_fov(size, size, 50.0).unwrap();
    orbit_camera(
        k,
        3.0,
        rng.random_range(0.0..360.0),
        rng.random_range(-20.0..20.0),
    )
}

pub fn random_quat<R: Rng>(rng: &mut R) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n: f64 = q.norm();
        if n > 0.2 && n < 1.0 {
            return q / n;
        }
    }
}

/// Random scene in front of `camera` whose Gaussians are pairwise separated
/// in camera depth by at least `ranges.min_depth_gap`.
pub fn random_scene<T: Real>(
    n: usize,
    camera: &Camera,
    ranges: &SceneRanges,
    seed: u64,
) -> SplatScene<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths: Vec<f64> = Vec::new();
    let mut gaussians = Vec::with_capacity(n);
    while gaussians.len() < n {
        let e = ranges.extent;
        let p = Vector3::new(
            rng.random_range(-e..e),
            rng.random_range(-e..e),
            rng.random_range(-e..e),
        );
        let z = camera.world_to_camera(&p).z;
        if depths.iter().any(|d| (d - z).abs() < ranges.min_depth_gap) {
            continue;
        }
        depths.push(z);
        let ls = Vector3::from_fn(|_, _| rng.random_range(ranges.log_scale.0..ranges.log_scale.1));
        let g = Gaussian3D::<f64>::new(
            p,
            ls,
            random_quat(&mut rng),
            Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            rng.random_range(ranges.opacity_logit.0..ranges.opacity_logit.1),
        );
        gaussians.push(g.cast());
    }
    let bg = Vector3::from_fn(|_, _| T::lit(rng.random_range(0.0..1.0)));
    SplatScene::new(gaussians, bg)
}

use crate::imageio::ImageBuf;
use crate::raster::{render, RenderOutput, SceneGradients};

/// Random upstream gradients for `Σ d_rgb·rgb + Σ d_alpha·alpha`.
pub fn random_upstream(w: usize, h: usize, seed: u64) -> (ImageBuf<f64>, ImageBuf<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d_rgb = ImageBuf::new(w, h, 3);
    let mut d_alpha = ImageBuf::new(w, h, 1);
    d_rgb
        .data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    d_alpha
        .data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    (d_rgb, d_alpha)
}

pub fn linear_objective(
    out: &RenderOutput<f64>,
    d_rgb: &ImageBuf<f64>,
    d_alpha: &ImageBuf<f64>,
) -> f64 {
    let a: f64 = out
        .rgb
        .data
        .iter()
        .zip(&d_rgb.data)
        .map(|(x, y)| x * y)
        .sum();
    let b: f64 = out
        .alpha
        .data
        .iter()
        .zip(&d_alpha.data)
        .map(|(x, y)| x * y)
        .sum();
    a + b
}

/// Central finite differences of [`linear_objective`] over every raw
/// parameter, using only the forward renderer.
pub fn finite_difference_gradients(
    scene: &SplatScene<f64>,
    camera: &Camera,
    d_rgb: &ImageBuf<f64>,
    d_alpha: &ImageBuf<f64>,
    h: f64,
) -> SceneGradients<f64> {
    let f = |s: &SplatScene<f64>| linear_objective(&render(s, camera), d_rgb, d_alpha);
    let mut out = SceneGradients::zeros(scene.len());
    let mut work = scene.clone();
    for i in 0..scene.len() {
        for p in 0..14 {
            let orig = get_param(&work.gaussians[i], p);
            set_param(&mut work.gaussians[i], p, orig + h);
            let fp = f(&work);
            set_param(&mut work.gaussians[i], p, orig - h);
            let fm = f(&work);
            set_param(&mut work.gaussians[i], p, orig);
            let d = (fp - fm) / (2.0 * h);
            match p {
                0..=2 => out.position[i][p] = d,
                3..=5 => out.log_scale[i][p - 3] = d,
                6..=9 => out.rotation[i][p - 6] = d,
                10..=12 => out.color[i][p - 10] = d,
                _ => out.opacity_logit[i] = d,
            }
        }
    }
    out
}

pub fn get_param(g: &Gaussian3D<f64>, p: usize) -> f64 {
    match p {
        0..=2 => g.position[p],
        3..=5 => g.log_scale[p - 3],
        6..=9 => g.rotation[p - 6],
        10..=12 => g.color[p - 10],
        _ => g.opacity_logit,
    }
}

pub fn set_param(g: &mut Gaussian3D<f64>, p: usize, v: f64) {
    match p {
        0..=2 => g.position[p] = v,
        3..=5 => g.log_scale[p - 3] = v,
        6..=9 => g.rotation[p - 6] = v,
        10..=12 => g.color[p - 10] = v,
        _ => g.opacity_logit = v,
    }
}

pub fn flatten(g: &SceneGradients<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(g.len() * 14);
    for i in 0..g.len() {
        v.extend(g.position[i].iter());
        v.extend(g.log_scale[i].iter());
        v.extend(g.rotation[i].iter());
        v.extend(g.color[i].iter());
        v.push(g.opacity_logit[i]);
    }
    v
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}
