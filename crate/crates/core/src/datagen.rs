//! Procedural ground-truth subjects and the on-disk training corpus.
//!
//! A subject is a mannequin built from 6–9 ellipsoids whose surfaces are
//! covered with flattened Gaussians. The high-fidelity variant adds
//! multi-octave color noise and thin hair strands on the head; the
//! low-fidelity variant uses a quarter of the Gaussians at twice the size,
//! each part painted in its average color, so both share one silhouette but
//! only the high-fidelity variant shows hair and the print on the back of the
//! shirt.
//!
//! Corpus layout under the output directory:
//!
//! ```text
//! manifest.json
//! subjects/{id}/gt.ply
//! subjects/{id}/canon/canon_{j:02}.png, mask_{j:02}.png
//! subjects/{id}/capture/capture_{i:02}.png, mask_{i:02}.png, cameras.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{orbit_camera, perturb_camera_stream, Camera, CanonicalRig, PerturbationSpec};
use crate::fit::{CanonicalSet, CaptureSet};
use crate::imageio::{load_png, png_bytes, ImageBuf};
use crate::raster::render;
use crate::splat::{ply_read, ply_write_bytes, Gaussian3D, SplatScene};
use crate::{Error, Result};

pub const GENERATOR_VERSION: &str = "splatlift-corpus/1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Unstructured captures per subject: front, right, back, left.
pub const CAPTURES_PER_SUBJECT: usize = 4;
pub const MIN_GAUSSIANS: usize = 50;
/// Tangential disk σ relative to the square root of its lattice patch area.
const DISK_SIGMA: f64 = 0.75;
const NOISE_FREQUENCY: f64 = 8.0;
/// Torso surface directions with z below this carry the back print.
const BACK_PRINT_Z: f64 = -0.3;
/// Child offset along each tangent axis and child σ, relative to the parent σ.
const CHILD_OFFSET: f64 = 0.8;
const CHILD_SIGMA: f64 = 0.7;
/// Low-fidelity disks sit this many σ below the surface; compensates for the
/// wider footprint of a flat disk on a curved part.
const LOW_INSET: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub seed: u64,
    pub fidelity: Fidelity,
    /// Gaussian count of the high-fidelity variant; the low-fidelity variant
    /// uses a quarter of it.
    pub count: usize,
    pub noise_octaves: u32,
    pub noise_amplitude: f64,
}

impl SubjectSpec {
    pub fn new(seed: u64, fidelity: Fidelity, count: usize) -> Self {
        Self {
            seed,
            fidelity,
            count,
            noise_octaves: 4,
            noise_amplitude: 0.6,
        }
    }

    pub fn with_fidelity(&self, fidelity: Fidelity) -> Self {
        Self { fidelity, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < MIN_GAUSSIANS {
            return Err(Error::InvalidConfig(format!(
                "subject needs at least {MIN_GAUSSIANS} Gaussians, got {}",
                self.count
            )));
        }
        if !(self.noise_amplitude >= 0.0) || self.noise_octaves > 12 {
            return Err(Error::InvalidConfig("bad noise parameters".into()));
        }
        Ok(())
    }
}

/// Seeded trilinear value noise on the integer lattice.
struct ValueNoise {
    perm: Vec<u8>,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<u8> = (0..=255).collect();
        for i in (1..256).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let values = (0..256).map(|_| rng.random::<f64>()).collect();
        Self { perm, values }
    }

    fn lattice(&self, x: i64, y: i64, z: i64) -> f64 {
        let p = |v: i64| self.perm[(v & 255) as usize] as i64;
        self.values[p(x + p(y + p(z))) as usize]
    }

    fn sample(&self, q: Vector3<f64>) -> f64 {
        let f = q.map(f64::floor);
        let t = (q - f).map(|v| v * v * (3.0 - 2.0 * v));
        let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
        let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
        let c = |dx, dy, dz| self.lattice(x + dx, y + dy, z + dz);
        let x00 = lerp(c(0, 0, 0), c(1, 0, 0), t.x);
        let x10 = lerp(c(0, 1, 0), c(1, 1, 0), t.x);
        let x01 = lerp(c(0, 0, 1), c(1, 0, 1), t.x);
        let x11 = lerp(c(0, 1, 1), c(1, 1, 1), t.x);
        lerp(lerp(x00, x10, t.y), lerp(x01, x11, t.y), t.z)
    }

    /// Sum of octaves normalized to [0, 1].
    fn fractal(&self, p: Vector3<f64>, octaves: u32, base_freq: f64) -> f64 {
        let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, base_freq);
        for o in 0..octaves {
            let shift = Vector3::repeat(17.31 * o as f64);
            sum += amp * self.sample(p * freq + shift);
            norm += amp;
            amp *= 0.8;
            freq *= 2.0;
        }
        if norm > 0.0 {
            sum / norm
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Material {
    Skin,
    Shirt,
    Pants,
}

#[derive(Debug, Clone)]
struct Part {
    center: Vector3<f64>,
    axes: Vector3<f64>,
    rotation: Matrix3<f64>,
    material: Material,
    is_head: bool,
    is_torso: bool,
}

impl Part {
    fn new(center: [f64; 3], axes: [f64; 3], tilt_z: f64, material: Material) -> Self {
        Self {
            center: Vector3::from(center),
            axes: Vector3::from(axes),
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), tilt_z).matrix(),
            material,
            is_head: false,
            is_torso: false,
        }
    }

    /// Approximate surface area (Knud Thomsen's formula).
    fn area(&self) -> f64 {
        let p = 1.6075;
        let (a, b, c) = (
            self.axes.x.powf(p),
            self.axes.y.powf(p),
            self.axes.z.powf(p),
        );
        4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
    }

    /// Point `i` of an `n`-point Fibonacci lattice mapped onto the surface:
    /// position, outward normal and the surface area it represents.
    fn lattice_point(&self, i: usize, n: usize) -> (Vector3<f64>, Vector3<f64>, f64) {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).max(0.0).sqrt();
        let phi = golden * i as f64;
        let u = Vector3::new(r * phi.cos(), y, r * phi.sin());
        self.map_unit(u, 4.0 * std::f64::consts::PI / n as f64)
    }

    /// Unit direction from the center in the part's frame (for region tests).
    fn direction(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * (p - self.center)).normalize()
    }

    /// Radial projection onto the surface, with the outward normal there.
    fn project(&self, p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let local = self.rotation.transpose() * (p - self.center);
        let u = local.component_div(&self.axes).normalize();
        let (pos, normal, _) = self.map_unit(u, 0.0);
        (pos, normal)
    }

    fn map_unit(&self, u: Vector3<f64>, solid_angle: f64) -> (Vector3<f64>, Vector3<f64>, f64) {
        let (a, b, c) = (self.axes.x, self.axes.y, self.axes.z);
        let stretch =
            ((b * c * u.x).powi(2) + (a * c * u.y).powi(2) + (a * b * u.z).powi(2)).sqrt();
        let local = u.component_mul(&self.axes);
        let n_local = Vector3::new(u.x / a, u.y / b, u.z / c).normalize();
        (
            self.center + self.rotation * local,
            self.rotation * n_local,
            stretch * solid_angle,
        )
    }
}

struct Body {
    parts: Vec<Part>,
    skin: Vector3<f64>,
    shirt: Vector3<f64>,
    pants: Vector3<f64>,
    hair: Vector3<f64>,
    /// Print on the back of the shirt.
    back: Vector3<f64>,
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, rel: f64) -> f64 {
    v * (1.0 + rng.random_range(-rel..rel))
}

fn hue_color(rng: &mut ChaCha8Rng, sat: (f64, f64), val: (f64, f64)) -> Vector3<f64> {
    let h: f64 = rng.random_range(0.0..6.0);
    let sat = rng.random_range(sat.0..sat.1);
    let val = rng.random_range(val.0..val.1);
    let f = h - h.floor();
    let (p, q, t) = (
        val * (1.0 - sat),
        val * (1.0 - sat * f),
        val * (1.0 - sat * (1.0 - f)),
    );
    match h as u32 {
        0 => Vector3::new(val, t, p),
        1 => Vector3::new(q, val, p),
        2 => Vector3::new(p, val, t),
        3 => Vector3::new(p, q, val),
        4 => Vector3::new(t, p, val),
        _ => Vector3::new(val, p, q),
    }
}

fn build_body(rng: &mut ChaCha8Rng) -> Body {
    let s = jitter(rng, 0.86, 0.05);
    let torso_w = jitter(rng, 0.26, 0.12);
    let torso_h = jitter(rng, 0.33, 0.08);
    let head_r = jitter(rng, 0.13, 0.1);
    let limb = jitter(rng, 0.075, 0.15);
    let arm_tilt = rng.random_range(0.05..0.3);
    let arm_x = torso_w + limb * 0.9;
    let arm_material = if rng.random::<bool>() {
        Material::Skin
    } else {
        Material::Shirt
    };
    let mut parts = vec![
        Part::new(
            [0.0, 0.15 * s, 0.0],
            [torso_w * s, torso_h * s, 0.15 * s],
            0.0,
            Material::Shirt,
        ),
        Part::new(
            [0.0, (0.15 + torso_h + head_r + 0.05) * s, 0.0],
            [head_r * 0.9 * s, head_r * 1.12 * s, head_r * s],
            0.0,
            Material::Skin,
        ),
        Part::new(
            [arm_x * s, 0.12 * s, 0.0],
            [limb * 0.85 * s, 0.3 * s, limb * 0.85 * s],
            arm_tilt,
            arm_material,
        ),
        Part::new(
            [-arm_x * s, 0.12 * s, 0.0],
            [limb * 0.85 * s, 0.3 * s, limb * 0.85 * s],
            -arm_tilt,
            arm_material,
        ),
        Part::new(
            [0.11 * s, -0.45 * s, 0.0],
            [limb * 1.15 * s, 0.36 * s, limb * 1.15 * s],
            0.0,
            Material::Pants,
        ),
        Part::new(
            [-0.11 * s, -0.45 * s, 0.0],
            [limb * 1.15 * s, 0.36 * s, limb * 1.15 * s],
            0.0,
            Material::Pants,
        ),
    ];
    parts[0].is_torso = true;
    parts[1].is_head = true;
    let head = parts[1].center;
    let hand_y = 0.12 * s - 0.3 * s * arm_tilt.cos();
    let hand_dx = 0.3 * s * arm_tilt.sin();
    let optional = [
        Part::new(
            [0.0, head.y - head_r * s, 0.0],
            [0.055 * s, 0.08 * s, 0.055 * s],
            0.0,
            Material::Skin,
        ),
        Part::new(
            [0.0, head.y - 0.01 * s, head_r * s],
            [0.025 * s, 0.035 * s, 0.035 * s],
            0.0,
            Material::Skin,
        ),
        Part::new(
            [(arm_x + hand_dx) * s, hand_y, 0.0],
            [0.05 * s, 0.06 * s, 0.04 * s],
            0.0,
            Material::Skin,
        ),
        Part::new(
            [-(arm_x + hand_dx) * s, hand_y, 0.0],
            [0.05 * s, 0.06 * s, 0.04 * s],
            0.0,
            Material::Skin,
        ),
    ];
    let extra = rng.random_range(0..=3);
    parts.extend(optional.into_iter().take(extra));

    let tone = rng.random_range(0.35..0.9);
    let skin = Vector3::new(tone, tone * 0.78, tone * 0.62);
    let shirt = hue_color(rng, (0.4, 0.9), (0.45, 0.95));
    let pants = hue_color(rng, (0.2, 0.7), (0.15, 0.55));
    let h = rng.random_range(0.05..0.35);
    let hair = Vector3::new(h * 1.2, h, h * 0.8);
    let back = hue_color(rng, (0.5, 0.9), (0.3, 0.9));
    Body {
        parts,
        skin,
        shirt,
        pants,
        hair,
        back,
    }
}

/// Hair covers the top and back of the head.
fn is_hair(normal: &Vector3<f64>) -> bool {
    normal.y > 0.15 || (normal.z < -0.1 && normal.y > -0.55)
}

/// Rotation (as a w-first quaternion) whose columns are `(t1, t2, n)`.
fn frame_quat(t1: Vector3<f64>, n: Vector3<f64>) -> Vector4<f64> {
    let t1 = (t1 - n * n.dot(&t1)).normalize();
    let t2 = n.cross(&t1);
    let m = Matrix3::from_columns(&[t1, t2, n]);
    let q = nalgebra::UnitQuaternion::from_matrix(&m);
    Vector4::new(q.w, q.i, q.j, q.k)
}

fn tangent_hint(n: &Vector3<f64>) -> Vector3<f64> {
    if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    }
}

/// Builds the subject scene. Deterministic per spec.
///
/// Both variants start from the same lattice of `count/4` surface disks. The
/// low-fidelity subject uses those disks, each part in its average color. The
/// high-fidelity subject splits every disk into four half-size children that
/// follow the surface, colors them with multi-octave noise and turns the ones
/// on the scalp into thin hair strands.
pub fn gen_subject(spec: &SubjectSpec) -> Result<SplatScene<f32>> {
    spec.validate()?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k);
        r
    };
    let body = build_body(&mut stream(0));
    let noise = ValueNoise::new(&mut stream(1));
    let hair_noise = ValueNoise::new(&mut stream(2));
    let mut rng = stream(3);
    let high = spec.fidelity == Fidelity::High;
    let n_parent = spec.count / 4;
    let opacity = 0.95;
    let total_area: f64 = body.parts.iter().map(Part::area).sum();

    // per-part counts proportional to area, remainders to the largest parts
    let mut counts: Vec<usize> = body
        .parts
        .iter()
        .map(|p| (p.area() / total_area * n_parent as f64).floor() as usize)
        .collect();
    let mut by_area: Vec<usize> = (0..body.parts.len()).collect();
    by_area.sort_by(|&i, &j| body.parts[j].area().total_cmp(&body.parts[i].area()));
    let mut missing = n_parent - counts.iter().sum::<usize>();
    for &i in by_area.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }

    let mut gaussians = Vec::with_capacity(if high { 4 * n_parent } else { n_parent });
    for (part, &n) in body.parts.iter().zip(&counts) {
        let base = match part.material {
            Material::Skin => body.skin,
            Material::Shirt => body.shirt,
            Material::Pants => body.pants,
        };
        let color_at = |pos: &Vector3<f64>| {
            let d = part.direction(pos);
            if part.is_head && is_hair(&d) {
                body.hair
            } else if part.is_torso && d.z < BACK_PRINT_Z {
                body.back
            } else {
                base
            }
        };
        // low-fidelity parts are painted in their average color
        let flat = (0..n)
            .map(|i| color_at(&part.lattice_point(i, n).0))
            .fold(Vector3::zeros(), |a, c| a + c)
            / n.max(1) as f64;
        for i in 0..n {
            let (pos, normal, patch) = part.lattice_point(i, n);
            let sigma = DISK_SIGMA * patch.sqrt();
            let (t1, t2) = tangent_frame(&normal);
            if !high {
                let q = frame_quat(t1, normal);
                let ls = Vector3::new(sigma.ln(), sigma.ln(), (0.25 * sigma).ln());
                gaussians.push(make_gaussian(
                    pos - normal * LOW_INSET * sigma,
                    ls,
                    q,
                    flat,
                    opacity,
                ));
                continue;
            }
            for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let guess = pos + (t1 * sx + t2 * sy) * (CHILD_OFFSET * sigma);
                let (cp, cn) = part.project(&guess);
                let sc = CHILD_SIGMA * sigma;
                if part.is_head && is_hair(&part.direction(&cp)) {
                    // strands run down and backwards along the scalp
                    let flow = Vector3::new(rng.random_range(-0.3..0.3), -1.0, -0.6);
                    let len = sc * rng.random_range(1.6..2.6);
                    let thick = sc * 0.35;
                    let shade = 0.4 + 1.0 * hair_noise.fractal(cp, 3, 24.0);
                    let q = frame_quat(flow, cn);
                    let ls = Vector3::new(len.ln(), thick.ln(), (0.5 * thick).ln());
                    gaussians.push(make_gaussian(cp, ls, q, body.hair * shade, opacity));
                } else {
                    let v = noise.fractal(cp, spec.noise_octaves, NOISE_FREQUENCY) - 0.5;
                    let color =
                        color_at(&cp) * (1.0 + spec.noise_amplitude * (4.0 * v).clamp(-1.0, 1.0));
                    let (c1, _) = tangent_frame(&cn);
                    let q = frame_quat(c1, cn);
                    let ls = Vector3::new(sc.ln(), sc.ln(), (0.25 * sc).ln());
                    gaussians.push(make_gaussian(cp, ls, q, color, opacity));
                }
            }
        }
    }
    Ok(SplatScene::new(gaussians, Vector3::repeat(1.0)))
}

fn tangent_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let h = tangent_hint(n);
    let t1 = (h - n * n.dot(&h)).normalize();
    (t1, n.cross(&t1))
}

fn make_gaussian(
    pos: Vector3<f64>,
    log_scale: Vector3<f64>,
    q: Vector4<f64>,
    color: Vector3<f64>,
    opacity: f64,
) -> Gaussian3D<f32> {
    Gaussian3D::new(
        pos.cast(),
        log_scale.cast(),
        q.cast(),
        color.map(|c| c.clamp(0.0, 1.0)).cast(),
        crate::splat::logit(opacity) as f32,
    )
}

/// Rendered RGB images and alpha masks of `scene` from each camera.
pub fn render_views(
    scene: &SplatScene<f32>,
    cameras: &[Camera],
) -> (Vec<ImageBuf<f32>>, Vec<ImageBuf<f32>>) {
    cameras
        .iter()
        .map(|c| {
            let out = render(scene, c);
            (out.rgb, out.alpha)
        })
        .unzip()
}

/// Nominal front/right/back/left capture cameras sharing the rig's intrinsics,
/// radius and elevation.
pub fn capture_cameras(rig: &CanonicalRig) -> Vec<Camera> {
    let k = rig.cameras[0].intrinsics;
    (0..CAPTURES_PER_SUBJECT)
        .map(|i| orbit_camera(k, rig.radius, 90.0 * i as f64, rig.elevation_deg))
        .collect()
}

/// Simulated hand-held captures of `scene`: images come from perturbed
/// cameras, the returned set carries the nominal cameras. Also returns the
/// actual (perturbed) cameras.
pub fn simulate_captures(
    scene: &SplatScene<f32>,
    nominal: &[Camera],
    perturbation: &PerturbationSpec,
    subject_seed: u64,
) -> Result<(CaptureSet, Vec<Camera>)> {
    let spec = PerturbationSpec {
        seed: perturbation.seed ^ subject_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..*perturbation
    };
    let actual: Vec<Camera> = nominal
        .iter()
        .enumerate()
        .map(|(i, c)| perturb_camera_stream(c, &spec, i as u64))
        .collect();
    let (images, masks) = render_views(scene, &actual);
    Ok((CaptureSet::new(images, masks, nominal.to_vec())?, actual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub spec: SubjectSpec,
}

/// `n` subjects with seeds drawn from `global_seed`.
pub fn subject_entries(
    n: usize,
    fidelity: Fidelity,
    count: usize,
    global_seed: u64,
) -> Vec<SubjectEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    (0..n)
        .map(|i| SubjectEntry {
            id: format!("s{i:04}"),
            spec: SubjectSpec::new(rng.random(), fidelity, count),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub spec: SubjectSpec,
    pub gt_ply: String,
    pub canonical_dir: String,
    pub capture_dir: String,
    /// Path relative to the corpus root → hex sha256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub global_seed: u64,
    pub rig: CanonicalRig,
    pub perturbation: PerturbationSpec,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureCameras {
    /// What the capturing device believes; used as the starting point for fitting.
    pub nominal: Vec<Camera>,
    /// The cameras the images were actually rendered from.
    pub actual: Vec<Camera>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_tracked(
    root: &Path,
    rel: &str,
    bytes: &[u8],
    files: &mut BTreeMap<String, String>,
) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, bytes)?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn render_subject(
    root: &Path,
    entry: &SubjectEntry,
    rig: &CanonicalRig,
    perturbation: &PerturbationSpec,
) -> Result<ManifestSubject> {
    let scene = gen_subject(&entry.spec)?;
    let base = format!("subjects/{}", entry.id);
    let mut files = BTreeMap::new();
    write_tracked(
        root,
        &format!("{base}/gt.ply"),
        &ply_write_bytes(&scene),
        &mut files,
    )?;
    let (views, masks) = render_views(&scene, &rig.cameras);
    for (j, (v, m)) in views.iter().zip(&masks).enumerate() {
        write_tracked(
            root,
            &format!("{base}/canon/canon_{j:02}.png"),
            &png_bytes(v)?,
            &mut files,
        )?;
        write_tracked(
            root,
            &format!("{base}/canon/mask_{j:02}.png"),
            &png_bytes(m)?,
            &mut files,
        )?;
    }
    write_tracked(
        root,
        &format!("{base}/canon/rig.json"),
        &serde_json::to_vec_pretty(rig)?,
        &mut files,
    )?;
    let nominal = capture_cameras(rig);
    let (captures, actual) = simulate_captures(&scene, &nominal, perturbation, entry.spec.seed)?;
    for (i, (v, m)) in captures.images.iter().zip(&captures.masks).enumerate() {
        write_tracked(
            root,
            &format!("{base}/capture/capture_{i:02}.png"),
            &png_bytes(v)?,
            &mut files,
        )?;
        write_tracked(
            root,
            &format!("{base}/capture/mask_{i:02}.png"),
            &png_bytes(m)?,
            &mut files,
        )?;
    }
    let cams = CaptureCameras { nominal, actual };
    write_tracked(
        root,
        &format!("{base}/capture/cameras.json"),
        &serde_json::to_vec_pretty(&cams)?,
        &mut files,
    )?;
    Ok(ManifestSubject {
        id: entry.id.clone(),
        spec: entry.spec,
        gt_ply: format!("{base}/gt.ply"),
        canonical_dir: format!("{base}/canon"),
        capture_dir: format!("{base}/capture"),
        files,
    })
}

/// Generates and renders every subject, then writes `manifest.json` last.
///
/// An existing corpus of the same generator version is overwritten; one of a
/// different version is refused with [`Error::ManifestConflict`].
pub fn render_corpus(
    subjects: &[SubjectEntry],
    rig: &CanonicalRig,
    perturbation: &PerturbationSpec,
    global_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let root = out_dir.as_ref();
    perturbation.validate()?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let old: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        if old.get("version").and_then(|v| v.as_str()) != Some(GENERATOR_VERSION) {
            return Err(Error::ManifestConflict(manifest_path));
        }
        // a crash from here on must not leave a manifest that looks complete
        std::fs::remove_file(&manifest_path)?;
    }
    std::fs::create_dir_all(root)?;
    let entries: Vec<ManifestSubject> = subjects
        .par_iter()
        .map(|e| render_subject(root, e, rig, perturbation))
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        version: GENERATOR_VERSION.to_string(),
        global_seed,
        rig: rig.clone(),
        perturbation: *perturbation,
        subjects: entries,
    };
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(&tmp, &manifest_path)?;
    Ok(manifest)
}

/// Loads `manifest.json` and checks that every listed file exists with the
/// recorded checksum.
pub fn validate_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(root.join(MANIFEST_FILE))?)?;
    if manifest.version != GENERATOR_VERSION {
        return Err(Error::ManifestConflict(root.join(MANIFEST_FILE)));
    }
    for s in &manifest.subjects {
        for (rel, sum) in &s.files {
            let path = root.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::ManifestInvalid {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if sha256_hex(&bytes) != *sum {
                return Err(Error::ManifestInvalid {
                    path,
                    reason: "checksum mismatch".into(),
                });
            }
        }
    }
    Ok(manifest)
}

fn subject_dir(root: &Path, id: &str) -> PathBuf {
    root.join("subjects").join(id)
}

pub fn load_gt_scene(root: impl AsRef<Path>, id: &str) -> Result<SplatScene<f32>> {
    ply_read(subject_dir(root.as_ref(), id).join("gt.ply"))
}

pub fn load_capture_set(root: impl AsRef<Path>, id: &str) -> Result<CaptureSet> {
    let dir = subject_dir(root.as_ref(), id).join("capture");
    let cams: CaptureCameras = serde_json::from_slice(&std::fs::read(dir.join("cameras.json"))?)?;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for i in 0..cams.nominal.len() {
        images.push(load_png(dir.join(format!("capture_{i:02}.png")), 3)?);
        masks.push(load_png(dir.join(format!("mask_{i:02}.png")), 1)?);
    }
    CaptureSet::new(images, masks, cams.nominal)
}

/// Canonical views and masks as stored (8-bit quantized) plus the rig; the
/// `scene` field holds the ground-truth subject.
pub fn load_canonical_set(root: impl AsRef<Path>, id: &str) -> Result<CanonicalSet> {
    let dir = subject_dir(root.as_ref(), id).join("canon");
    let rig: CanonicalRig = serde_json::from_slice(&std::fs::read(dir.join("rig.json"))?)?;
    let mut views = Vec::new();
    let mut masks = Vec::new();
    for j in 0..rig.len() {
        views.push(load_png(dir.join(format!("canon_{j:02}.png")), 3)?);
        masks.push(load_png(dir.join(format!("mask_{j:02}.png")), 1)?);
    }
    let scene = load_gt_scene(root, id)?;
    Ok(CanonicalSet {
        views,
        masks,
        rig,
        scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_canonical_rig, CameraIntrinsics};
    use crate::metrics::{laplacian_variance, mask_iou};

    fn rig(size: usize) -> CanonicalRig {
        make_canonical_rig(
            8,
            2.6,
            0.0,
            CameraIntrinsics::from_fov(size, size, 40.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn subject_is_deterministic() {
        let spec = SubjectSpec::new(11, Fidelity::High, 400);
        let a = gen_subject(&spec).unwrap();
        assert_eq!(a, gen_subject(&spec).unwrap());
        assert_eq!(a.len(), 400);
        assert_eq!(
            gen_subject(&spec.with_fidelity(Fidelity::Low))
                .unwrap()
                .len(),
            100
        );
    }

    #[test]
    fn part_count_in_range() {
        for seed in 0..20 {
            let body = build_body(&mut ChaCha8Rng::seed_from_u64(seed));
            assert!((6..=9).contains(&body.parts.len()));
        }
    }

    #[test]
    fn fidelity_variants_share_silhouette() {
        let r = rig(64);
        for seed in [1u64, 2, 3] {
            let spec = SubjectSpec::new(seed, Fidelity::High, 2000);
            let hi = render(&gen_subject(&spec).unwrap(), &r.cameras[0]);
            let lo = render(
                &gen_subject(&spec.with_fidelity(Fidelity::Low)).unwrap(),
                &r.cameras[0],
            );
            assert_ne!(hi.rgb, lo.rgb);
            let iou = mask_iou(&hi.alpha, &lo.alpha).unwrap();
            assert!(iou >= 0.95, "seed {seed}: IoU {iou}");
            assert!(laplacian_variance(&hi.rgb) > laplacian_variance(&lo.rgb));
        }
    }

    #[test]
    fn subject_fits_in_frame() {
        let r = rig(64);
        let scene = gen_subject(&SubjectSpec::new(5, Fidelity::High, 1000)).unwrap();
        for cam in &r.cameras {
            let a = render(&scene, cam).alpha;
            let w = a.width;
            for y in 0..a.height {
                assert!(a.get(0, y, 0) < 0.5 && a.get(w - 1, y, 0) < 0.5);
            }
            for x in 0..w {
                assert!(a.get(x, 0, 0) < 0.5 && a.get(x, a.height - 1, 0) < 0.5);
            }
        }
    }

    #[test]
    fn too_few_gaussians_rejected() {
        assert!(gen_subject(&SubjectSpec::new(1, Fidelity::High, 49)).is_err());
    }
}
