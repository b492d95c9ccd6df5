//! 8-bit RGB PNG and grayscale PGM reading and writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Vec3;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec3>,
}

/// Row-major single-channel image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<Vec3>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> Vec3 {
        self.pixels[v * self.width + u]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(e.to_string()))?;
        let data: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|p| [to_byte(p.x), to_byte(p.y), to_byte(p.z)])
            .collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }

    /// Load an 8-bit PNG; gray and alpha channels are expanded or dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let mut dec = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let ch = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::Image(format!("unsupported PNG color type {other:?}"))),
        };
        let px = |i: usize| -> Vec3 {
            let b = &buf[i * ch..];
            let f = |x: u8| x as f64 / 255.0;
            if ch < 3 {
                Vec3::repeat(f(b[0]))
            } else {
                Vec3::new(f(b[0]), f(b[1]), f(b[2]))
            }
        };
        Self::new(w, h, (0..w * h).map(px).collect())
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Binary (P5) 8-bit PGM.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let data: Vec<u8> = self.pixels.iter().map(|&p| to_byte(p)).collect();
        w.write_all(&data)?;
        w.flush()?;
        Ok(())
    }

    /// Binary (P5) or ASCII (P2) PGM with any maxval up to 65535.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PGM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let num = |s: String| -> Result<usize> {
            s.parse().map_err(|_| Error::Image(format!("bad PGM header field {s:?}")))
        };
        let w = num(token()?)?;
        let h = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Image(format!("bad PGM maxval {maxval}")));
        }
        let scale = 1.0 / maxval as f64;
        let pixels = match magic.as_str() {
            "P5" => {
                let start = pos + 1;
                let bpp = if maxval > 255 { 2 } else { 1 };
                let data = bytes
                    .get(start..start + w * h * bpp)
                    .ok_or_else(|| Error::Image("truncated PGM data".into()))?;
                if bpp == 1 {
                    data.iter().map(|&b| b as f64 * scale).collect()
                } else {
                    data.chunks(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
                        .collect()
                }
            }
            "P2" => (0..w * h)
                .map(|_| token().and_then(num).map(|v| v as f64 * scale))
                .collect::<Result<_>>()?,
            other => return Err(Error::Image(format!("not a PGM file (magic {other:?})"))),
        };
        Self::new(w, h, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let px: Vec<Vec3> = (0..6)
            .map(|i| Vec3::new(i as f64 / 5.0, 1.0 - i as f64 / 5.0, 0.5))
            .collect();
        let img = RgbImage::new(3, 2, px).unwrap();
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).amax() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_roundtrip_and_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        img.save_pgm(&path).unwrap();
        assert_eq!(GrayImage::load_pgm(&path).unwrap(), img);
        let ascii = dir.path().join("a.pgm");
        std::fs::write(&ascii, "P2\n# comment\n2 1\n4\n0 4\n").unwrap();
        assert_eq!(GrayImage::load_pgm(&ascii).unwrap().pixels, vec![0.0, 1.0]);
        std::fs::write(&ascii, "P6\n1 1\n255\n").unwrap();
        assert!(GrayImage::load_pgm(&ascii).is_err());
    }

    #[test]
    fn size_mismatch_is_an_error() {
        assert!(RgbImage::new(2, 2, vec![Vec3::zeros(); 3]).is_err());
        assert!(GrayImage::new(1, 2, vec![0.0]).is_err());
    }
}
