//! Pinhole cameras, the canonical capture rig and capture perturbations.
//!
//! Poses are world→camera: `p_cam = R·p_world + t`. The camera looks down +z,
//! image x grows to the right and image y grows downwards.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NEAR_PLANE: f64 = 0.01;
pub const FAR_PLANE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at `(width/2, height/2)`.
    pub fn from_fov(width: usize, height: usize, fov_y_deg: f64) -> Result<Self> {
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.width >= 8
            && self.height >= 8;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid intrinsics {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pose of a camera at `eye` looking at `target`, with `up` pointing
    /// (roughly) towards image-up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-12 {
            // looking straight along `up`; any perpendicular works
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&rot);
        let translation = -(rotation * eye);
        Self {
            rotation,
            translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * p + self.pose.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.inverse() * (p - self.pose.translation)
    }

    /// Pinhole projection. Returns the pixel position and the camera-frame depth.
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let pc = self.world_to_camera(point);
        if !(pc.z > NEAR_PLANE) {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let k = &self.intrinsics;
        Ok((
            Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
            pc.z,
        ))
    }

    /// Unit direction (world frame) of the ray through image coordinate `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let dc = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.pose.rotation.inverse() * dc).normalize()
    }

    pub fn to_json(&self) -> CameraJson {
        let q = self.pose.rotation.quaternion();
        let t = self.pose.translation;
        CameraJson {
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
            width: self.intrinsics.width,
            height: self.intrinsics.height,
            quat: [q.w, q.i, q.j, q.k],
            trans: [t.x, t.y, t.z],
        }
    }

    pub fn from_json(j: &CameraJson) -> Result<Self> {
        let intrinsics = CameraIntrinsics::new(j.fx, j.fy, j.cx, j.cy, j.width, j.height)?;
        let [w, x, y, z] = j.quat;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 0.0) || j.trans.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("degenerate camera pose".into()));
        }
        Ok(Self {
            intrinsics,
            pose: CameraPose {
                // already-unit quaternions are kept verbatim so JSON round-trips exactly
                rotation: if (q.norm_squared() - 1.0).abs() < 1e-12 {
                    UnitQuaternion::new_unchecked(q)
                } else {
                    UnitQuaternion::from_quaternion(q)
                },
                translation: Vector3::from(j.trans),
            },
        })
    }
}

/// On-disk camera record: `{fx, fy, cx, cy, width, height, quat: [w,x,y,z], trans: [x,y,z]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = CameraJson::deserialize(d)?;
        Camera::from_json(&j).map_err(serde::de::Error::custom)
    }
}

/// The fixed set of canonical cameras on an azimuth ring around the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalRig {
    #[serde(rename = "M")]
    pub m: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub cameras: Vec<Camera>,
}

impl CanonicalRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Azimuth (degrees) of camera `j`.
    pub fn azimuth_deg(&self, j: usize) -> f64 {
        360.0 * j as f64 / self.m as f64
    }

    /// A rig restricted to the listed camera indices (e.g. the front view only).
    pub fn subset(&self, indices: &[usize]) -> CanonicalRig {
        CanonicalRig {
            m: indices.len(),
            radius: self.radius,
            elevation_deg: self.elevation_deg,
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
        }
    }
}

/// Camera on the ring at `azimuth_deg` (0° = subject front on +z, 90° = +x side).
pub fn orbit_camera(
    intrinsics: CameraIntrinsics,
    radius: f64,
    azimuth_deg: f64,
    elevation_deg: f64,
) -> Camera {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = Vector3::new(
        radius * az.sin() * el.cos(),
        radius * el.sin(),
        radius * az.cos() * el.cos(),
    );
    Camera::new(
        intrinsics,
        CameraPose::look_at(eye, Vector3::zeros(), Vector3::y()),
    )
}

/// `M` cameras looking at the origin from equally spaced azimuths starting at
/// the subject front. Index 0 is the front, index `M/2` the back for even `M`.
pub fn make_canonical_rig(
    m: usize,
    radius: f64,
    elevation_deg: f64,
    intrinsics: CameraIntrinsics,
) -> Result<CanonicalRig> {
    if m == 0 || !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rig needs M >= 1 and radius > 0 (got M={m}, radius={radius})"
        )));
    }
    intrinsics.validate()?;
    let cameras = (0..m)
        .map(|j| {
            orbit_camera(
                intrinsics,
                radius,
                360.0 * j as f64 / m as f64,
                elevation_deg,
            )
        })
        .collect();
    Ok(CanonicalRig {
        m,
        radius,
        elevation_deg,
        cameras,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub sigma_pos: f64,
    pub sigma_rot_deg: f64,
    pub sigma_focal_rel: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn zero() -> Self {
        Self {
            sigma_pos: 0.0,
            sigma_rot_deg: 0.0,
            sigma_focal_rel: 0.0,
            seed: 0,
        }
    }

    /// Hand-held defaults for a rig of the given radius: σ_pos = 0.05·radius,
    /// σ_rot = 5°, σ_focal = 5 %.
    pub fn handheld(radius: f64, seed: u64) -> Self {
        Self {
            sigma_pos: 0.05 * radius,
            sigma_rot_deg: 5.0,
            sigma_focal_rel: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.sigma_pos, self.sigma_rot_deg, self.sigma_focal_rel]
            .iter()
            .all(|s| *s >= 0.0 && s.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "negative perturbation sigma in {self:?}"
            )))
        }
    }
}

/// Simulates a hand-held capture of `camera`: the phone is moved by an
/// orbit-style rotation about the world origin, its position is jittered and
/// its focal length rescaled. Deterministic for a fixed seed.
pub fn perturb_camera(camera: &Camera, spec: &PerturbationSpec) -> Camera {
    perturb_camera_stream(camera, spec, 0)
}

/// Like [`perturb_camera`] but draws from an independent RNG stream, so many
/// captures can share one spec.
pub fn perturb_camera_stream(camera: &Camera, spec: &PerturbationSpec, stream: u64) -> Camera {
    if spec.sigma_pos == 0.0 && spec.sigma_rot_deg == 0.0 && spec.sigma_focal_rel == 0.0 {
        return *camera;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let angle = (spec.sigma_rot_deg * normal()).to_radians();
    let axis = loop {
        let v = Vector3::new(normal(), normal(), normal());
        if v.norm() > 1e-9 {
            break Unit::new_normalize(v);
        }
    };
    let delta = UnitQuaternion::from_axis_angle(&axis, angle);
    let jitter = Vector3::new(normal(), normal(), normal()) * spec.sigma_pos;
    let focal = (spec.sigma_focal_rel * normal()).exp();

    // world-side rotation: cam→world becomes delta·(cam→world)
    let rotation = camera.pose.rotation * delta.inverse();
    let center = delta * camera.center() + jitter;
    let translation = -(rotation * center);

    let mut intrinsics = camera.intrinsics;
    intrinsics.fx *= focal;
    intrinsics.fy *= focal;
    Camera::new(
        intrinsics,
        CameraPose {
            rotation,
            translation,
        },
    )
}

/// One pixel's viewing ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRay {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// `(d, o × d)`
    pub plucker: [f64; 6],
}

/// Row-major `height × width` grid of pixel rays.
#[derive(Debug, Clone)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<PixelRay>,
}

impl RayMap {
    pub fn at(&self, x: usize, y: usize) -> &PixelRay {
        &self.rays[y * self.width + x]
    }
}

pub fn pixel_ray_map(camera: &Camera) -> RayMap {
    let (w, h) = (camera.width(), camera.height());
    let origin = camera.center();
    let mut rays = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = camera.ray_direction(x as f64, y as f64);
            let m = origin.cross(&d);
            rays.push(PixelRay {
                origin,
                direction: d,
                plucker: [d.x, d.y, d.z, m.x, m.y, m.z],
            });
        }
    }
    RayMap {
        width: w,
        height: h,
        rays,
    }
}

/// Uniform random unit vector, used by callers that need random view directions.
pub fn random_unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n: f64 = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}
