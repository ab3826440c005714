//! The 3D Gaussian scene representation.
//!
//! Each Gaussian stores an unconstrained parameterization: log-scales,
//! an opacity logit and a (normalized-on-decode) quaternion, so optimizer
//! steps can never leave the valid domain.

mod ply;

use nalgebra::{Matrix3, Vector3, Vector4};

pub use ply::{ply_read, ply_read_bytes, ply_write, ply_write_bytes};

use crate::Real;

pub const MIN_SCALE: f64 = 1e-6;
pub const MAX_SCALE: f64 = 10.0;
/// Opacity logits are clamped to ±this on decode, keeping α strictly inside (0, 1)
/// even in 32-bit arithmetic.
pub const OPACITY_LOGIT_LIMIT: f64 = 13.8;

#[inline]
pub fn min_log_scale<T: Real>() -> T {
    T::lit(MIN_SCALE.ln())
}

#[inline]
pub fn max_log_scale<T: Real>() -> T {
    T::lit(MAX_SCALE.ln())
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D<T: Real = f32> {
    pub position: Vector3<T>,
    pub log_scale: Vector3<T>,
    /// `(w, x, y, z)`
    pub rotation: Vector4<T>,
    pub color: Vector3<T>,
    pub opacity_logit: T,
}

impl<T: Real> Gaussian3D<T> {
    pub fn new(
        position: Vector3<T>,
        log_scale: Vector3<T>,
        rotation: Vector4<T>,
        color: Vector3<T>,
        opacity_logit: T,
    ) -> Self {
        Self {
            position,
            log_scale,
            rotation: normalize_quat(rotation),
            color,
            opacity_logit,
        }
    }

    pub fn isotropic(position: Vector3<T>, scale: T, color: Vector3<T>, opacity: T) -> Self {
        let p = opacity.to_f64().clamp(1e-6, 1.0 - 1e-6);
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Vector4::new(T::one(), T::zero(), T::zero(), T::zero()),
            color,
            opacity_logit: T::lit(logit(p)),
        }
    }

    /// Clamped log-scales.
    pub fn clamped_log_scale(&self) -> Vector3<T> {
        self.log_scale
            .map(|v| v.clamp(min_log_scale::<T>(), max_log_scale::<T>()))
    }

    pub fn scales(&self) -> Vector3<T> {
        self.clamped_log_scale().map(|v| v.exp())
    }

    pub fn clamped_opacity_logit(&self) -> T {
        let lim = T::lit(OPACITY_LOGIT_LIMIT);
        self.opacity_logit.clamp(-lim, lim)
    }

    pub fn opacity(&self) -> T {
        sigmoid(self.clamped_opacity_logit())
    }

    pub fn unit_rotation(&self) -> Vector4<T> {
        normalize_quat(self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        quat_to_matrix(&self.unit_rotation())
    }

    pub fn cast<U: Real>(&self) -> Gaussian3D<U> {
        let c = |v: T| U::lit(v.to_f64());
        Gaussian3D {
            position: self.position.map(c),
            log_scale: self.log_scale.map(c),
            rotation: self.rotation.map(c),
            color: self.color.map(c),
            opacity_logit: c(self.opacity_logit),
        }
    }
}

/// `Σ = R·diag(s²)·Rᵀ`
pub fn covariance3d<T: Real>(g: &Gaussian3D<T>) -> Matrix3<T> {
    let r = g.rotation_matrix();
    let s = g.scales();
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // symmetrize exactly
    Matrix3::from_fn(|i, j| if i <= j { cov[(i, j)] } else { cov[(j, i)] })
}

pub fn normalize_quat<T: Real>(q: Vector4<T>) -> Vector4<T> {
    let n = q.norm();
    if n > T::lit(1e-30) {
        q / n
    } else {
        Vector4::new(T::one(), T::zero(), T::zero(), T::zero())
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix<T: Real>(q: &Vector4<T>) -> Matrix3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Pull back `∂L/∂R` to `∂L/∂q` for a unit quaternion `q`.
pub fn quat_to_matrix_backward<T: Real>(q: &Vector4<T>, g: &Matrix3<T>) -> Vector4<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::lit(2.0);
    let dw = -z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)];
    let dx = y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - two * x * g[(1, 1)] - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)]
        - two * x * g[(2, 2)];
    let dy = -two * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
        - w * g[(2, 0)]
        + z * g[(2, 1)]
        - two * y * g[(2, 2)];
    let dz = -two * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
        - two * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)];
    Vector4::new(dw, dx, dy, dz) * two
}

/// Pull back a gradient on `q/|q|` to the raw quaternion `q`.
pub fn normalize_quat_backward<T: Real>(raw: &Vector4<T>, d_unit: &Vector4<T>) -> Vector4<T> {
    let n = raw.norm();
    if !(n > T::lit(1e-30)) {
        return Vector4::zeros();
    }
    let u = raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatScene<T: Real = f32> {
    pub gaussians: Vec<Gaussian3D<T>>,
    pub background: Vector3<T>,
}

impl<T: Real> SplatScene<T> {
    pub fn new(gaussians: Vec<Gaussian3D<T>>, background: Vector3<T>) -> Self {
        Self {
            gaussians,
            background,
        }
    }

    pub fn empty(background: Vector3<T>) -> Self {
        Self::new(Vec::new(), background)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn cast<U: Real>(&self) -> SplatScene<U> {
        SplatScene {
            gaussians: self.gaussians.iter().map(|g| g.cast()).collect(),
            background: self.background.map(|v| U::lit(v.to_f64())),
        }
    }
}
