//! Image and label-map payloads plus binary PPM (P6) serialisation.

use crate::error::{IonError, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Colourspace tag for [`Image`] storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    /// Hue stored as a fraction of a turn in [0,1), saturation and value
    /// in [0,1].
    Hsv,
}

/// H x W x 3 image with f32 components in [0,1], channel-interleaved
/// row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub space: ColorSpace,
}

impl Image {
    pub fn new(height: usize, width: usize, space: ColorSpace) -> Self {
        Image { height, width, pixels: vec![0.0; height * width * 3], space }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(height, width, ColorSpace::Rgb);
        for px in img.pixels.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(y, x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [f32; 3]) {
        let i = self.idx(y, x);
        self.pixels[i..i + 3].copy_from_slice(&px);
    }

    pub fn clamp_unit(&mut self) {
        for v in self.pixels.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Encodes as binary PPM (P6, maxval 255) with round-half-up
    /// quantisation.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.pixels.len());
        out.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend(self.pixels.iter().map(|&v| quantise_u8(v)));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_token = || -> Result<String> {
            // skip whitespace and '#' comments
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
                return Err(IonError::Format("ppm: unexpected end of header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = next_token()?;
        if magic != "P6" {
            return Err(IonError::Format(format!("ppm: expected P6, got {magic}")));
        }
        let width: usize = next_token()?
            .parse()
            .map_err(|_| IonError::Format("ppm: bad width".into()))?;
        let height: usize = next_token()?
            .parse()
            .map_err(|_| IonError::Format("ppm: bad height".into()))?;
        let maxval: usize = next_token()?
            .parse()
            .map_err(|_| IonError::Format("ppm: bad maxval".into()))?;
        if maxval != 255 {
            return Err(IonError::Format(format!("ppm: only maxval 255 supported, got {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(IonError::Format(format!(
                "ppm: truncated payload, need {need} bytes at offset {pos}, have {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        let pixels = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Image { height, width, pixels, space: ColorSpace::Rgb })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Image::from_ppm(&buf)
    }
}

#[inline]
pub fn quantise_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// H x W integer class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        LabelMap { height, width, ids: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        self.ids[y * self.width + x] = id;
    }
}
