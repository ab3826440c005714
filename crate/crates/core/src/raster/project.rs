use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::{CUTOFF_SQ, GUARD_BAND, LOW_PASS};
use crate::camera::{Camera, FAR_PLANE, NEAR_PLANE};
use crate::splat::{
    covariance3d, max_log_scale, min_log_scale, normalize_quat_backward, quat_to_matrix,
    quat_to_matrix_backward, Gaussian3D, OPACITY_LOGIT_LIMIT,
};
use crate::Real;

/// Camera converted to the working precision.
pub(crate) struct CameraT<T: Real> {
    pub r: Matrix3<T>,
    pub t: Vector3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraT<T> {
    pub fn new(c: &Camera) -> Self {
        let k = &c.intrinsics;
        let l = |v: f64| T::lit(v);
        Self {
            r: c.pose.rotation_matrix().map(l),
            t: c.pose.translation.map(l),
            fx: l(k.fx),
            fy: l(k.fy),
            cx: l(k.cx),
            cy: l(k.cy),
            width: k.width,
            height: k.height,
        }
    }
}

/// Screen-space Gaussian as used by the compositor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat<T: Real> {
    pub mean: [T; 2],
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub cov: Matrix2<T>,
    pub opacity: T,
    pub color: [T; 3],
    pub depth: T,
    /// Half-widths of the axis-aligned box around the 3σ ellipse.
    pub extent: [T; 2],
    pub p_cam: Vector3<T>,
    pub cov_cam: Matrix3<T>,
    pub jac: Matrix2x3<T>,
}

/// Public view of a projected Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected<T: Real = f32> {
    pub mean2d: Vector2<T>,
    /// Includes the low-pass dilation.
    pub cov2d: Matrix2<T>,
    pub depth: T,
}

/// EWA projection of one Gaussian. `None` means culled: behind the near plane,
/// beyond the far plane, or with its center outside the guard band.
pub fn project_gaussian<T: Real>(camera: &Camera, g: &Gaussian3D<T>) -> Option<Projected<T>> {
    let cam = CameraT::new(camera);
    project_splat(&cam, g, true).map(|s| Projected {
        mean2d: Vector2::new(s.mean[0], s.mean[1]),
        cov2d: s.cov,
        depth: s.depth,
    })
}

pub(crate) fn project_splat<T: Real>(
    cam: &CameraT<T>,
    g: &Gaussian3D<T>,
    guard: bool,
) -> Option<Splat<T>> {
    let pc = cam.r * g.position + cam.t;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    if !(z > T::lit(NEAR_PLANE)) {
        return None;
    }
    let mx = cam.fx * x / z + cam.cx;
    let my = cam.fy * y / z + cam.cy;
    if guard {
        if z > T::lit(FAR_PLANE) {
            return None;
        }
        let (w, h) = (T::lit(cam.width as f64), T::lit(cam.height as f64));
        let band = T::lit(GUARD_BAND);
        if mx < -band * w
            || mx > (T::one() + band) * w
            || my < -band * h
            || my > (T::one() + band) * h
        {
            return None;
        }
    }
    let z2 = z * z;
    let jac = Matrix2x3::new(
        cam.fx / z,
        T::zero(),
        -cam.fx * x / z2,
        T::zero(),
        cam.fy / z,
        -cam.fy * y / z2,
    );
    let sigma = covariance3d(g);
    let cov_cam = cam.r * sigma * cam.r.transpose();
    let mut cov = jac * cov_cam * jac.transpose();
    cov[(0, 1)] = cov[(1, 0)];
    cov[(0, 0)] += T::lit(LOW_PASS);
    cov[(1, 1)] += T::lit(LOW_PASS);
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > T::zero()) || !det.is_finite() {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let r = T::lit(CUTOFF_SQ).sqrt();
    // small outward margin so rounding can never clip the kernel support
    let margin = |v: T| v * T::lit(1.0 + 1e-4) + T::lit(1e-3);
    let extent = [
        margin(r * cov[(0, 0)].sqrt()),
        margin(r * cov[(1, 1)].sqrt()),
    ];
    Some(Splat {
        mean: [mx, my],
        conic,
        cov,
        opacity: g.opacity(),
        color: [g.color.x, g.color.y, g.color.z],
        depth: z,
        extent,
        p_cam: pc,
        cov_cam,
        jac,
    })
}

pub(crate) struct ProjectionGrad<T: Real> {
    pub position: Vector3<T>,
    pub log_scale: Vector3<T>,
    pub rotation: Vector4<T>,
    pub color: Vector3<T>,
    pub opacity_logit: T,
    pub cam_rotation: Vector3<T>,
    pub cam_translation: Vector3<T>,
    pub cam_log_focal: T,
}

/// Chain rule from screen-space partials back to the stored parameters and
/// to the camera correction.
pub(crate) fn project_backward<T: Real>(
    cam: &CameraT<T>,
    g: &Gaussian3D<T>,
    s: &Splat<T>,
    d_mean: &[T; 2],
    d_conic: &[T; 3],
    d_color: &[T; 3],
    d_opacity: T,
) -> ProjectionGrad<T> {
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    // conic = cov⁻¹, symmetric-matrix gradients throughout
    let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let gq = Matrix2::new(d_conic[0], d_conic[1] * half, d_conic[1] * half, d_conic[2]);
    let g_cov2d = -(q * gq * q);

    let j = &s.jac;
    let g_cov_cam = j.transpose() * g_cov2d * j;
    let g_jac: Matrix2x3<T> = g_cov2d * j * s.cov_cam * two;

    let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
    let (z2, z3) = (z * z, z * z * z);
    let mut d_pc = Vector3::zeros();
    // Jacobian entries
    d_pc.x += g_jac[(0, 2)] * (-cam.fx / z2);
    d_pc.y += g_jac[(1, 2)] * (-cam.fy / z2);
    d_pc.z += g_jac[(0, 0)] * (-cam.fx / z2)
        + g_jac[(0, 2)] * (two * cam.fx * x / z3)
        + g_jac[(1, 1)] * (-cam.fy / z2)
        + g_jac[(1, 2)] * (two * cam.fy * y / z3);
    // mean
    d_pc.x += d_mean[0] * cam.fx / z;
    d_pc.y += d_mean[1] * cam.fy / z;
    d_pc.z -= d_mean[0] * cam.fx * x / z2 + d_mean[1] * cam.fy * y / z2;

    let w = &cam.r;
    let position = w.transpose() * d_pc;
    let g_sigma = w.transpose() * g_cov_cam * w;
    let sigma = covariance3d(g);
    let g_w: Matrix3<T> = g_cov_cam * w * sigma * two + d_pc * g.position.transpose();

    // Σ = M Mᵀ with M = R·diag(s)
    let unit = g.unit_rotation();
    let rot = quat_to_matrix(&unit);
    let scales = g.scales();
    let m = rot * Matrix3::from_diagonal(&scales);
    let g_m = g_sigma * m * two;
    let mut log_scale = Vector3::zeros();
    let mut g_rot = Matrix3::zeros();
    for col in 0..3 {
        let mut ds = T::zero();
        for row in 0..3 {
            ds += g_m[(row, col)] * rot[(row, col)];
            g_rot[(row, col)] = g_m[(row, col)] * scales[col];
        }
        let inside =
            g.log_scale[col] > min_log_scale::<T>() && g.log_scale[col] < max_log_scale::<T>();
        log_scale[col] = if inside { ds * scales[col] } else { T::zero() };
    }
    let rotation = normalize_quat_backward(&g.rotation, &quat_to_matrix_backward(&unit, &g_rot));

    let lim = T::lit(OPACITY_LOGIT_LIMIT);
    let opacity_logit = if g.opacity_logit > -lim && g.opacity_logit < lim {
        d_opacity * s.opacity * (T::one() - s.opacity)
    } else {
        T::zero()
    };

    // camera correction
    let a = g_w * w.transpose();
    let cam_rotation = Vector3::new(
        a[(2, 1)] - a[(1, 2)],
        a[(0, 2)] - a[(2, 0)],
        a[(1, 0)] - a[(0, 1)],
    );
    let d_fx = d_mean[0] * x / z + (g_jac[(0, 0)] * j[(0, 0)] + g_jac[(0, 2)] * j[(0, 2)]) / cam.fx;
    let d_fy = d_mean[1] * y / z + (g_jac[(1, 1)] * j[(1, 1)] + g_jac[(1, 2)] * j[(1, 2)]) / cam.fy;

    ProjectionGrad {
        position,
        log_scale,
        rotation,
        color: Vector3::new(d_color[0], d_color[1], d_color[2]),
        opacity_logit,
        cam_rotation,
        cam_translation: d_pc,
        cam_log_focal: cam.fx * d_fx + cam.fy * d_fy,
    }
}
