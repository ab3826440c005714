//! Binary little-endian PLY in the usual 3DGS property naming.
//!
//! Layout written by [`ply_write`]:
//!
//! ```text
//! ply
//! format binary_little_endian 1.0
//! comment background <r> <g> <b>
//! element vertex <K>
//! property float x            (y, z)
//! property float scale_0      (scale_1, scale_2)   log scale
//! property float rot_0        (rot_1..rot_3)       quaternion w, x, y, z
//! property float f_dc_0       (f_dc_1, f_dc_2)     linear RGB in [0, 1]
//! property float opacity                           logit
//! end_header
//! <K records of 14 little-endian f32>
//! ```
//!
//! `f_dc_*` hold plain RGB rather than spherical-harmonic DC coefficients.
//! The reader locates properties by name, so extra vertex properties (normals,
//! `f_rest_*`) written by other tools are skipped.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use super::{Gaussian3D, SplatScene};
use crate::{Error, Result};

const FIELDS: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0",
    "f_dc_1", "f_dc_2", "opacity",
];

pub fn ply_write_bytes(scene: &SplatScene<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(512 + scene.len() * FIELDS.len() * 4);
    let bg = scene.background;
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!(
        "comment background {:08x} {:08x} {:08x}\n",
        bg.x.to_bits(),
        bg.y.to_bits(),
        bg.z.to_bits()
    );
    header += &format!("element vertex {}\n", scene.len());
    for f in FIELDS {
        header += &format!("property float {f}\n");
    }
    header += "end_header\n";
    out.extend_from_slice(header.as_bytes());
    for g in &scene.gaussians {
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.color.x,
            g.color.y,
            g.color.z,
            g.opacity_logit,
        ];
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn ply_write(scene: &SplatScene<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ply_write_bytes(scene))?;
    f.flush()?;
    Ok(())
}

pub fn ply_read(path: impl AsRef<Path>) -> Result<SplatScene<f32>> {
    ply_read_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f32 {
        match self {
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()) as f32,
            Self::I8 => b[0] as i8 as f32,
            Self::U8 => b[0] as f32,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f32,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f32,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedPly(msg.into())
}

pub fn ply_read_bytes(bytes: &[u8]) -> Result<SplatScene<f32>> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("missing end_header"))?
        + END.len();
    let header =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| malformed("header is not utf-8"))?;

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(malformed("missing ply magic"));
    }
    let mut background = Vector3::new(1.0f32, 1.0, 1.0);
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(malformed(format!("unsupported format {other}"))),
            ["comment", "background", r, g, b] => {
                let bits = |s: &str| {
                    u32::from_str_radix(s, 16)
                        .map(f32::from_bits)
                        .map_err(|_| malformed("bad background comment"))
                };
                background = Vector3::new(bits(r)?, bits(g)?, bits(b)?);
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| malformed(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(malformed("list properties are not supported"));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?;
                let ty =
                    Scalar::parse(ty).ok_or_else(|| malformed(format!("unknown type {ty}")))?;
                el.props.push((name.to_string(), ty));
            }
            _ => return Err(malformed(format!("unexpected header line {line:?}"))),
        }
    }
    if !format_ok {
        return Err(malformed("missing format line"));
    }

    let mut offset = header_end;
    let mut gaussians = None;
    for el in &elements {
        let stride: usize = el.props.iter().map(|(_, t)| t.size()).sum();
        let len = stride
            .checked_mul(el.count)
            .ok_or_else(|| malformed("element too large"))?;
        if bytes.len() < offset + len {
            return Err(malformed(format!(
                "file truncated: element {} needs {} bytes, {} available",
                el.name,
                len,
                bytes.len().saturating_sub(offset)
            )));
        }
        if el.name == "vertex" {
            let mut slots = [(0usize, Scalar::F32); 14];
            for (k, field) in FIELDS.iter().enumerate() {
                let mut off = 0;
                let mut found = None;
                for (name, ty) in &el.props {
                    if name == field {
                        found = Some((off, *ty));
                    }
                    off += ty.size();
                }
                slots[k] = found.ok_or_else(|| malformed(format!("missing property {field}")))?;
            }
            let data = &bytes[offset..offset + len];
            let mut gs = Vec::with_capacity(el.count);
            for rec in data.chunks_exact(stride.max(1)).take(el.count) {
                let v: Vec<f32> = slots.iter().map(|(o, t)| t.read(&rec[*o..])).collect();
                gs.push(Gaussian3D {
                    position: Vector3::new(v[0], v[1], v[2]),
                    log_scale: Vector3::new(v[3], v[4], v[5]),
                    rotation: Vector4::new(v[6], v[7], v[8], v[9]),
                    color: Vector3::new(v[10], v[11], v[12]),
                    opacity_logit: v[13],
                });
            }
            gaussians = Some(gs);
        }
        offset += len;
    }
    let gaussians = gaussians.ok_or_else(|| malformed("no vertex element"))?;
    Ok(SplatScene {
        gaussians,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_scene(n: usize, seed: u64) -> SplatScene<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = || rng.random_range(-3.0f32..3.0);
        let gaussians = (0..n)
            .map(|_| Gaussian3D {
                position: Vector3::new(v(), v(), v()),
                log_scale: Vector3::new(v(), v(), v()),
                rotation: Vector4::new(v(), v(), v(), v()),
                color: Vector3::new(v(), v(), v()),
                opacity_logit: v(),
            })
            .collect();
        SplatScene::new(gaussians, Vector3::new(0.25, 0.5, 1.0))
    }

    fn bits(s: &SplatScene<f32>) -> Vec<u32> {
        let mut out = vec![];
        for g in &s.gaussians {
            out.extend(g.position.iter().map(|v| v.to_bits()));
            out.extend(g.log_scale.iter().map(|v| v.to_bits()));
            out.extend(g.rotation.iter().map(|v| v.to_bits()));
            out.extend(g.color.iter().map(|v| v.to_bits()));
            out.push(g.opacity_logit.to_bits());
        }
        out.extend(s.background.iter().map(|v| v.to_bits()));
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ply");
        let scene = random_scene(100, 5);
        ply_write(&scene, &path).unwrap();
        let back = ply_read(&path).unwrap();
        assert_eq!(bits(&back), bits(&scene));
    }

    #[test]
    fn empty_scene() {
        let scene = SplatScene::<f32>::empty(Vector3::new(1.0, 1.0, 1.0));
        let bytes = ply_write_bytes(&scene);
        assert!(std::str::from_utf8(&bytes)
            .unwrap()
            .contains("element vertex 0\n"));
        let back = ply_read_bytes(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncation_is_malformed() {
        let bytes = ply_write_bytes(&random_scene(10, 1));
        let err = ply_read_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::MalformedPly(_)));
    }

    #[test]
    fn missing_field_is_malformed() {
        let bytes = ply_write_bytes(&random_scene(2, 1));
        let text = String::from_utf8_lossy(&bytes).replace("property float opacity\n", "");
        let err = ply_read_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::MalformedPly(m) if m.contains("opacity")));
    }

    #[test]
    fn extra_properties_are_skipped() {
        // normals first, as the reference 3DGS exporter writes them
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n".to_vec();
        let props = [
            "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
            "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        ];
        for p in props {
            bytes.extend_from_slice(format!("property float {p}\n").as_bytes());
        }
        bytes.extend_from_slice(b"end_header\n");
        for i in 0..props.len() {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let s = ply_read_bytes(&bytes).unwrap();
        let g = &s.gaussians[0];
        assert_eq!(g.position, Vector3::new(0.0, 1.0, 2.0));
        assert_eq!(g.color, Vector3::new(6.0, 7.0, 8.0));
        assert_eq!(g.opacity_logit, 9.0);
        assert_eq!(g.log_scale, Vector3::new(10.0, 11.0, 12.0));
        assert_eq!(g.rotation, Vector4::new(13.0, 14.0, 15.0, 16.0));
    }

    #[test]
    fn io_error_on_missing_file() {
        assert!(matches!(
            ply_read("/nonexistent/dir/x.ply"),
            Err(Error::Io(_))
        ));
    }
}
