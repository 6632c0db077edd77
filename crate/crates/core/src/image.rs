//! Real-valued pixel grids and their binary PPM/PGM serialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{IntentError, Result};

/// Smallest accepted height or width.
pub const MIN_SIDE: usize = 8;

/// An `H x W x C` image with interleaved channels, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if pixels.len() != height * width * channels {
            return Err(IntentError::InvalidImage(format!(
                "expected {} pixel values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(IntentError::InvalidImage(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image by clamping arbitrary finite values into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let pixels = values
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Image::new(height, width, channels, pixels)
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.index(y, x, c)]
    }

    /// Sets a pixel value, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.pixels[i] = value.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// One channel as a row-major `H x W` plane.
    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        self.pixels
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let plane = self.channel_plane(c);
        plane.iter().sum::<f64>() / plane.len() as f64
    }

    /// Snaps every value onto the 8-bit grid `k / 255`.
    pub fn quantized(&self) -> Image {
        let pixels = self.pixels.iter().map(|v| to_byte(*v) as f64 / 255.0).collect();
        Image::from_parts_unchecked(self.height, self.width, self.channels, pixels)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Encodes as binary PPM (P6, 3 channels) or PGM (P5, 1 channel).
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| to_byte(*v)));
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> std::result::Result<Image, String> {
        let mut pos = 0usize;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match header[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(format!("unsupported magic {other:?}; only P5/P6 are read")),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let width = parse(&header[1])?;
        let height = parse(&header[2])?;
        let maxval = parse(&header[3])?;
        if maxval != 255 {
            return Err(format!("only 8-bit rasters are supported, maxval = {maxval}"));
        }
        let n = width * height * channels;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| format!("raster truncated: need {n} bytes"))?;
        let pixels = raster.iter().map(|b| *b as f64 / 255.0).collect();
        Image::new(height, width, channels, pixels).map_err(|e| e.to_string())
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| IntentError::io(path, e))?;
        f.write_all(&self.to_pnm_bytes())
            .map_err(|e| IntentError::io(path, e))
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| IntentError::io(path, e))?;
        Image::from_pnm_bytes(&bytes).map_err(|msg| IntentError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(IntentError::InvalidImage(format!(
            "image is {height}x{width}; both sides must be at least {MIN_SIDE}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(IntentError::InvalidImage(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    Ok(())
}

#[inline]
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small() {
        assert!(Image::new(8, 8, 1, vec![1.5; 64]).is_err());
        assert!(Image::new(4, 8, 1, vec![0.0; 32]).is_err());
        assert!(Image::new(8, 8, 2, vec![0.0; 128]).is_err());
        assert!(Image::new(8, 8, 1, vec![f64::NAN; 64]).is_err());
    }

    #[test]
    fn pnm_round_trip_on_8bit_grid() {
        let pixels: Vec<f64> = (0..8 * 9 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(9, 8, 3, pixels).unwrap();
        let bytes = img.to_pnm_bytes();
        assert!(bytes.starts_with(b"P6\n8 9\n255\n"));
        assert_eq!(Image::from_pnm_bytes(&bytes).unwrap(), img);

        let gray = Image::filled(8, 8, 1, 0.2).unwrap().quantized();
        let back = Image::from_pnm_bytes(&gray.to_pnm_bytes()).unwrap();
        assert_eq!(back, gray);
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n8 8\n255\n".to_vec();
        bytes.extend(std::iter::repeat(255u8).take(64));
        let img = Image::from_pnm_bytes(&bytes).unwrap();
        assert_eq!(img.shape(), (8, 8, 1));
        assert!(img.pixels().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = b"P5 8 8 255\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(10));
        assert!(Image::from_pnm_bytes(&bytes).is_err());
    }
}
