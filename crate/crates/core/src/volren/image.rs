//! RGB images in `[0, 1]`, 8-bit PNG I/O and a lossless float container.

use std::io::Cursor;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::{Error, Result};

/// Row-major RGB image, three `f64` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB needs {} values, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in self.pixels() {
            for k in 0..3 {
                m[k] += p[k];
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        m.map(|v| v / n)
    }

    /// Box-filter down to `width x height`; both must divide the current size.
    pub fn downsample(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || self.width % width != 0 || self.height % height != 0 {
            return Err(Error::invalid(format!(
                "cannot box-downsample {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (self.width / width, self.height / height);
        let norm = (fx * fy) as f64;
        let mut out = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0.0; 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = self.pixel(x * fx + dx, y * fy + dy);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                out.set_pixel(x, y, acc.map(|v| v / norm));
            }
        }
        Ok(out)
    }

    /// Planar `[1, 3, H, W]` tensor with values mapped `[0,1] -> [-1,1]`.
    pub fn to_signed_chw(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, p) in self.pixels().enumerate() {
            for k in 0..3 {
                out[k * plane + i] = 2.0 * p[k] - 1.0;
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], out).expect("sized")
    }

    /// Inverse of [`Image::to_signed_chw`] for one item of an `[N,3,H,W]`
    /// tensor, clamped into `[0, 1]`.
    pub fn from_signed_chw(t: &Tensor, item: usize) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [_, 3, h, w] => (h, w),
            ref s => return Err(Error::shape("image", format!("expected [N,3,H,W], got {s:?}"))),
        };
        let plane = h * w;
        let base = item * 3 * plane;
        if base + 3 * plane > t.len() {
            return Err(Error::shape("image", format!("item {item} out of range")));
        }
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for k in 0..3 {
                data[i * 3 + k] = ((t.data()[base + k * plane + i] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Image::new(w, h, data)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape("image", "size mismatch"));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    /// Quantise to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, bytes.iter().map(|b| *b as f64 / 255.0).collect())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let fmt = |e: png::EncodingError| Error::Format {
                what: "png",
                detail: e.to_string(),
            };
            let mut w = enc.write_header().map_err(fmt)?;
            w.write_image_data(&self.to_rgb8()).map_err(fmt)?;
        }
        Ok(out)
    }

    /// Decode an 8-bit RGB, RGBA or greyscale PNG.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let fmt = |e: png::DecodingError| Error::Format {
            what: "png",
            detail: e.to_string(),
        };
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND);
        let mut reader = dec.read_info().map_err(fmt)?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::Format {
            what: "png",
            detail: "image too large".into(),
        })?;
        if size > 1 << 28 {
            return Err(Error::Format {
                what: "png",
                detail: "image too large".into(),
            });
        }
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let (w, h) = (info.width as usize, info.height as usize);
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format {
                what: "png",
                detail: format!("unsupported bit depth {:?}", info.bit_depth),
            });
        }
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            c => {
                return Err(Error::Format {
                    what: "png",
                    detail: format!("unsupported colour type {c:?}"),
                })
            }
        };
        let mut rgb = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks_exact(channels).take(w * h) {
            match channels {
                1 | 2 => rgb.extend([px[0]; 3]),
                _ => rgb.extend(&px[..3]),
            }
        }
        Image::from_rgb8(w, h, &rgb)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    /// Lossless float container: `VTFI`, version, width, height, then
    /// little-endian `f64` RGB values.
    pub fn encode_float(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend_from_slice(FLOAT_MAGIC);
        out.extend_from_slice(&FLOAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode_float(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "float image";
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                what: WHAT,
                detail: format!("{} byte header", bytes.len()),
            });
        }
        if &bytes[..4] != FLOAT_MAGIC {
            return Err(Error::Format {
                what: WHAT,
                detail: "bad magic".into(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FLOAT_VERSION {
            return Err(Error::Version {
                what: WHAT,
                found: version,
                expected: FLOAT_VERSION,
            });
        }
        let (w, h) = (word(8) as usize, word(12) as usize);
        let need = w
            .checked_mul(h)
            .and_then(|n| n.checked_mul(24))
            .ok_or_else(|| Error::Format {
                what: WHAT,
                detail: "size overflow".into(),
            })?;
        let body = &bytes[16..];
        if body.len() < need {
            return Err(Error::Truncated {
                what: WHAT,
                detail: format!("payload {} of {need} bytes", body.len()),
            });
        }
        if body.len() > need {
            return Err(Error::Format {
                what: WHAT,
                detail: format!("{} trailing bytes", body.len() - need),
            });
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Image::new(w, h, data)
    }

    pub fn save_float(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_float()).map_err(|e| Error::io(path, e))
    }

    pub fn load_float(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_float(&bytes)
    }
}

const FLOAT_MAGIC: &[u8; 4] = b"VTFI";
const FLOAT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::SeedRng;

    fn random(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = SeedRng::new(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = random(6, 4, 3);
        assert_eq!(img.downsample(6, 4).unwrap(), img);
        let d = img.downsample(3, 2).unwrap();
        let want: f64 = [(2, 2), (3, 2), (2, 3), (3, 3)].iter().map(|&(x, y)| img.pixel(x, y)[1]).sum::<f64>() / 4.0;
        assert!((d.pixel(1, 1)[1] - want).abs() < 1e-15);
        assert!(img.downsample(4, 4).is_err());
        assert!(img.downsample(0, 2).is_err());
    }

    #[test]
    fn png_round_trip_is_byte_exact_after_quantisation() {
        let img = random(7, 5, 1);
        let q = Image::from_rgb8(7, 5, &img.to_rgb8()).unwrap();
        let back = Image::decode_png(&q.encode_png().unwrap()).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let img = random(9, 4, 2);
        assert_eq!(Image::decode_float(&img.encode_float()).unwrap(), img);
    }

    #[test]
    fn float_container_rejects_corruption() {
        let bytes = random(3, 3, 3).encode_float();
        assert!(matches!(Image::decode_float(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Image::decode_float(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Image::decode_float(&bad), Err(Error::Version { found: 9, .. })));
        assert!(Image::decode_png(&bytes).is_err());
    }

    #[test]
    fn signed_chw_round_trip() {
        let img = random(4, 6, 4);
        let t = img.to_signed_chw();
        assert_eq!(t.shape(), &[1, 3, 6, 4]);
        let back = Image::from_signed_chw(&t, 0).unwrap();
        assert!(back.mean_abs_diff(&img).unwrap() < 1e-15);
    }
}
