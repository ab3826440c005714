//! Planar-interleaved float images plus PNG and NPY persistence.

use std::io::Write;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::{Error, Real, Result};

/// Row-major, channel-interleaved image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T = f32> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageBuf<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.idx(x, y, c)]
    }

    pub fn same_shape<U>(&self, other: &ImageBuf<U>) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape<U>(&self, other: &ImageBuf<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn cast<U: Real>(&self) -> ImageBuf<U> {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64())).collect(),
        }
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> ImageBuf<T> {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG bytes. 1 channel → gray, 3 → RGB, 4 → RGBA.
pub fn png_bytes(img: &ImageBuf<f32>) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        4 => ExtendedColorType::Rgba8,
        c => {
            return Err(Error::ShapeMismatch(format!(
                "cannot write {c}-channel PNG"
            )))
        }
    };
    let raw: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(&raw, img.width as u32, img.height as u32, color)?;
    Ok(out)
}

pub fn save_png(img: &ImageBuf<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, png_bytes(img)?)?;
    Ok(())
}

/// RGB and alpha packed into one RGBA image.
pub fn rgba(rgb: &ImageBuf<f32>, alpha: &ImageBuf<f32>) -> Result<ImageBuf<f32>> {
    if rgb.channels != 3
        || alpha.channels != 1
        || rgb.width != alpha.width
        || rgb.height != alpha.height
    {
        return Err(Error::ShapeMismatch("rgba packing".into()));
    }
    let mut data = Vec::with_capacity(rgb.width * rgb.height * 4);
    for (px, a) in rgb.data.chunks_exact(3).zip(&alpha.data) {
        data.extend_from_slice(px);
        data.push(*a);
    }
    ImageBuf::from_vec(rgb.width, rgb.height, 4, data)
}

/// Loads a PNG as floats in [0, 1] with the requested channel count (1 or 3).
pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<ImageBuf<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::ShapeMismatch(format!("cannot load {c}-channel PNG"))),
    }
    .into_iter()
    .map(|v| v as f32 / 255.0)
    .collect();
    ImageBuf::from_vec(w, h, channels, data)
}

/// Horizontal concatenation of equally tall RGB images (comparison grids).
pub fn hstack(images: &[&ImageBuf<f32>]) -> Result<ImageBuf<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::ShapeMismatch("empty image list".into()));
    };
    let (h, c) = (first.height, first.channels);
    if images.iter().any(|i| i.height != h || i.channels != c) {
        return Err(Error::ShapeMismatch("hstack needs equal heights".into()));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = ImageBuf::new(w, h, c);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            let src = &img.data[y * img.width * c..(y + 1) * img.width * c];
            let dst = (y * w + x0) * c;
            out.data[dst..dst + src.len()].copy_from_slice(src);
        }
        x0 += img.width;
    }
    Ok(out)
}

/// Vertical concatenation of equally wide images.
pub fn vstack(images: &[&ImageBuf<f32>]) -> Result<ImageBuf<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::ShapeMismatch("empty image list".into()));
    };
    let (w, c) = (first.width, first.channels);
    if images.iter().any(|i| i.width != w || i.channels != c) {
        return Err(Error::ShapeMismatch("vstack needs equal widths".into()));
    }
    let h = images.iter().map(|i| i.height).sum();
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    ImageBuf::from_vec(w, h, c, data)
}

/// Writes a `.npy` (format 1.0) little-endian f32 array of shape `[h, w, c]`.
///
/// Header: magic `\x93NUMPY`, version `1 0`, u16 header length, then an ASCII
/// dict `{'descr': '<f4', 'fortran_order': False, 'shape': (h, w, c), }`
/// space-padded so the payload starts on a 64-byte boundary.
pub fn write_npy(img: &ImageBuf<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        img.height, img.width, img.channels
    );
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"\x93NUMPY\x01\x00")?;
    f.write_all(&(dict.len() as u16).to_le_bytes())?;
    f.write_all(dict.as_bytes())?;
    for v in &img.data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuf::<f32>::new(9, 7, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p, 3).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let img = ImageBuf::<f32>::filled(16, 16, 1, 0.3);
        assert_eq!(png_bytes(&img).unwrap(), png_bytes(&img).unwrap());
    }

    #[test]
    fn npy_header_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let img = ImageBuf::<f32>::filled(5, 4, 3, 1.5);
        write_npy(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes.len(), 10 + hlen + 5 * 4 * 3 * 4);
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(header.contains("'shape': (4, 5, 3)"));
    }

    #[test]
    fn shape_checks() {
        let a = ImageBuf::<f32>::new(4, 4, 3);
        let b = ImageBuf::<f32>::new(4, 5, 3);
        assert!(a.check_shape(&b).is_err());
        assert!(ImageBuf::<f32>::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
