//! Grayscale image buffer and portable graymap / pixmap files.
//!
//! Images are stored as `f64` intensities in `[0, 1]` and serialized as
//! binary 8-bit PGM (`P5`); heatmap renderings go out as binary PPM (`P6`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Intensity at integer pixel (x, y); out-of-image reads are 0.
    #[inline]
    pub fn get(&self, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            0.0
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// 8-bit binary PGM encoding; intensities are clamped then rounded.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_token = |bytes: &[u8]| -> Result<String> {
            // skip whitespace and '#' comment lines
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
                return Err(Error::Format("truncated PGM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };

        let magic = next_token(bytes)?;
        if magic != "P5" {
            return Err(Error::Format(format!("expected P5 graymap, got {magic:?}")));
        }
        let width: usize = next_token(bytes)?
            .parse()
            .map_err(|_| Error::Format("bad PGM width".into()))?;
        let height: usize = next_token(bytes)?
            .parse()
            .map_err(|_| Error::Format("bad PGM height".into()))?;
        let maxval: usize = next_token(bytes)?
            .parse()
            .map_err(|_| Error::Format("bad PGM maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height;
        if bytes.len() < pos + need {
            return Err(Error::Format(format!(
                "PGM payload too short: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        let pixels = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }
}

/// Binary PPM encoding of an RGB buffer (row-major, length `width * height`).
pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(width, height, rgb))?;
    Ok(())
}
