use super::project::{project_splat, CameraT};
use super::{depth_order, kernel, RenderOutput};
use crate::camera::Camera;
use crate::imageio::ImageBuf;
use crate::splat::SplatScene;
use crate::Real;

/// Exhaustive renderer used as a test oracle: every pixel visits every
/// Gaussian in front of the near plane in depth order. No tiling, no guard
/// band, no early termination.
pub fn render_reference<T: Real>(scene: &SplatScene<T>, camera: &Camera) -> RenderOutput<T> {
    let cam = CameraT::new(camera);
    let splats: Vec<_> = scene
        .gaussians
        .iter()
        .map(|g| project_splat(&cam, g, false))
        .collect();
    let order = depth_order(&splats);
    let (w, h) = (cam.width, cam.height);
    let mut rgb = ImageBuf::new(w, h, 3);
    let mut alpha = ImageBuf::new(w, h, 1);
    let mut trans = ImageBuf::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (T::lit(x as f64), T::lit(y as f64));
            let mut t = T::one();
            let mut c = [T::zero(); 3];
            for &id in &order {
                let s = splats[id].as_ref().unwrap();
                if let Some((g, ..)) = kernel(s, px, py) {
                    let a = s.opacity * g;
                    let w = a * t;
                    for k in 0..3 {
                        c[k] += s.color[k] * w;
                    }
                    t = t * (T::one() - a);
                }
            }
            let p = y * w + x;
            for k in 0..3 {
                rgb.data[p * 3 + k] = c[k] + t * scene.background[k];
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
