//! Binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Raw P5 content.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for &s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_token = || -> Result<String> {
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
        let magic = next_token()?;
        if magic != "P5" {
            return Err(Error::Format(format!("expected P5 magic, found {magic:?}")));
        }
        let mut number = |what: &str| -> Result<usize> {
            let t = next_token()?;
            t.parse()
                .map_err(|_| Error::Format(format!("bad PGM {what} {t:?}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!(
                "invalid PGM header {width}x{height} maxval {maxval}"
            )));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let data = bytes.get(pos..).unwrap_or(&[]);
        let n = width * height;
        let wide = maxval > 255;
        let expected = if wide { 2 * n } else { n };
        if data.len() != expected {
            return Err(Error::Format(format!(
                "PGM raster has {} bytes, header implies {expected}",
                data.len()
            )));
        }
        let samples: Vec<u16> = if wide {
            data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            data.iter().map(|&b| b as u16).collect()
        };
        if let Some(bad) = samples.iter().find(|&&s| s as usize > maxval) {
            return Err(Error::Format(format!("sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Pgm::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

fn write(path: &Path, pgm: &Pgm) -> Result<()> {
    fs::write(path, pgm.to_bytes()).map_err(|e| Error::io(path, e))
}

/// 16-bit image, `round(v * 65535)` after clamping to [0, 1].
pub fn image_to_pgm(height: usize, width: usize, pixels: &[f32]) -> Result<Pgm> {
    if pixels.len() != height * width {
        return Err(Error::Shape(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    Ok(Pgm {
        width,
        height,
        maxval: 65535,
        samples: pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
            .collect(),
    })
}

/// 8-bit mask with values 0 and 255.
pub fn mask_to_pgm(height: usize, width: usize, mask: &[bool]) -> Result<Pgm> {
    if mask.len() != height * width {
        return Err(Error::Shape(format!("{} mask pixels for {height}x{width}", mask.len())));
    }
    Ok(Pgm {
        width,
        height,
        maxval: 255,
        samples: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    })
}

pub fn write_image(path: &Path, height: usize, width: usize, pixels: &[f32]) -> Result<()> {
    write(path, &image_to_pgm(height, width, pixels)?)
}

pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    write(path, &mask_to_pgm(height, width, mask)?)
}

/// Image file as `(height, width, pixels in [0, 1])`, any maxval.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let p = read_pgm(path)?;
    let scale = p.maxval as f32;
    Ok((p.height, p.width, p.samples.iter().map(|&s| s as f32 / scale).collect()))
}

/// Mask file; any nonzero sample is foreground.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let p = read_pgm(path)?;
    Ok((p.height, p.width, p.samples.iter().map(|&s| s != 0).collect()))
}
