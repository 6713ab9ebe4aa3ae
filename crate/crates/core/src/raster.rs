//! RGB rasters, binary PPM I/O, image pyramids and sliding-window tiling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per pixel. Every image in the pipeline is interleaved RGB.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM: expected magic `P6`")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    BadHeader(&'static str),
    #[error("unsupported PPM maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated PPM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the PPM payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("pixel buffer holds {found} samples, {width}x{height} RGB needs {expected}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        found: usize,
    },
    #[error("down-sampling ratio must lie in (0, 1), got {0}")]
    Ratio(f64),
}

/// An 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image {
    /// A black image.
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        Self::from_raw(width, height, vec![0; width * height * CHANNELS])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, RasterError> {
        let mut img = Self::new(width, height)?;
        for px in img.pixels.chunks_exact_mut(CHANNELS) {
            px.copy_from_slice(&rgb);
        }
        Ok(img)
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage { width, height });
        }
        let expected = width * height * CHANNELS;
        if pixels.len() != expected {
            return Err(RasterError::BufferSize {
                width,
                height,
                expected,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Copies a `width`×`height` window whose top-left corner sits at
    /// (`x0`, `y0`). Samples falling outside this image are zero.
    pub fn crop_padded(&self, x0: i64, y0: i64, width: usize, height: usize) -> Image {
        let mut out = vec![0u8; width * height * CHANNELS];
        let src_x0 = x0.max(0);
        let src_x1 = (x0 + width as i64).min(self.width as i64);
        if src_x1 > src_x0 {
            let run = (src_x1 - src_x0) as usize * CHANNELS;
            let dst_off = (src_x0 - x0) as usize * CHANNELS;
            for row in 0..height {
                let sy = y0 + row as i64;
                if sy < 0 || sy >= self.height as i64 {
                    continue;
                }
                let src = (sy as usize * self.width + src_x0 as usize) * CHANNELS;
                let dst = row * width * CHANNELS + dst_off;
                out[dst..dst + run].copy_from_slice(&self.pixels[src..src + run]);
            }
        }
        Image {
            width,
            height,
            pixels: out,
        }
    }
}

/// Parses a binary P6 PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        skip_whitespace_and_comments(bytes, &mut pos)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::BadHeader("expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PpmError::BadHeader("number out of range"))?;
    }
    // Exactly one whitespace byte separates maxval from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PpmError::BadHeader("missing separator after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader("zero image dimension"));
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(CHANNELS))
        .ok_or(PpmError::BadHeader("image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(PpmError::TrailingBytes(payload.len() - expected));
    }
    Ok(Image {
        width,
        height,
        pixels: payload.to_vec(),
    })
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) -> Result<(), PpmError> {
    let before = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(PpmError::BadHeader("header ends early")),
        }
    }
    if *pos == before {
        return Err(PpmError::BadHeader("missing whitespace between fields"));
    }
    Ok(())
}

/// Serializes as canonical P6: `P6\n<w> <h>\n255\n` followed by the samples.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.pixels);
    out
}

/// Shrinks `image` by `ratio` in each axis, flooring the output size.
///
/// A ratio of exactly one half uses a 2×2 box filter (mean rounded half up);
/// any other ratio samples bilinearly at `(dst + 0.5) / ratio - 0.5`.
pub fn downsample(image: &Image, ratio: f64) -> Result<Image, RasterError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(RasterError::Ratio(ratio));
    }
    let out_w = ((image.width as f64 * ratio).floor() as usize).max(1);
    let out_h = ((image.height as f64 * ratio).floor() as usize).max(1);
    if ratio == 0.5 {
        Ok(box_halve(image, out_w, out_h))
    } else {
        Ok(resize_bilinear(image, out_w, out_h, ratio, ratio))
    }
}

fn box_halve(image: &Image, out_w: usize, out_h: usize) -> Image {
    let mut out = vec![0u8; out_w * out_h * CHANNELS];
    let last_x = image.width - 1;
    let last_y = image.height - 1;
    for y in 0..out_h {
        let y0 = (2 * y).min(last_y);
        let y1 = (2 * y + 1).min(last_y);
        for x in 0..out_w {
            let x0 = (2 * x).min(last_x);
            let x1 = (2 * x + 1).min(last_x);
            let a = image.get(x0, y0);
            let b = image.get(x1, y0);
            let c = image.get(x0, y1);
            let d = image.get(x1, y1);
            let o = (y * out_w + x) * CHANNELS;
            for ch in 0..CHANNELS {
                let sum = a[ch] as u32 + b[ch] as u32 + c[ch] as u32 + d[ch] as u32;
                out[o + ch] = ((sum + 2) / 4) as u8;
            }
        }
    }
    Image {
        width: out_w,
        height: out_h,
        pixels: out,
    }
}

/// Bilinear resampling to `out_w`×`out_h` where destination pixel `d` maps to
/// source coordinate `(d + 0.5) / scale - 0.5`, clamped to the image.
pub fn resize_bilinear(image: &Image, out_w: usize, out_h: usize, scale_x: f64, scale_y: f64) -> Image {
    let src_coord = |d: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) / scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w)
        .map(|x| src_coord(x, scale_x, image.width))
        .collect();
    let mut out = vec![0u8; out_w * out_h * CHANNELS];
    for y in 0..out_h {
        let (y0, y1, fy) = src_coord(y, scale_y, image.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = image.get(x0, y0);
            let p10 = image.get(x1, y0);
            let p01 = image.get(x0, y1);
            let p11 = image.get(x1, y1);
            let o = (y * out_w + x) * CHANNELS;
            for ch in 0..CHANNELS {
                let top = p00[ch] as f64 * (1.0 - fx) + p10[ch] as f64 * fx;
                let bottom = p01[ch] as f64 * (1.0 - fx) + p11[ch] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[o + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image {
        width: out_w,
        height: out_h,
        pixels: out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Per-level down-sampling factor.
    pub ratio: f64,
    pub patch_side: usize,
    /// A level is kept while its area is at least `stop_fraction * patch_side^2`.
    pub stop_fraction: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            patch_side: 200,
            stop_fraction: 0.4,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(format!("pyramid.ratio must lie in (0,1), got {}", self.ratio));
        }
        if !(self.stop_fraction > 0.0) {
            return Err(format!(
                "pyramid.stop_fraction must be positive, got {}",
                self.stop_fraction
            ));
        }
        if self.patch_side < 8 {
            return Err(format!("pyramid.patch_side must be >= 8, got {}", self.patch_side));
        }
        Ok(())
    }

    pub fn min_area(&self) -> f64 {
        self.stop_fraction * (self.patch_side * self.patch_side) as f64
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub level: usize,
    /// `ratio^level`, accumulated by repeated multiplication.
    pub scale: f64,
    pub image: Image,
}

/// Level 0 is the input; each following level is the previous one
/// down-sampled, until a level's area drops below the stop threshold.
pub fn build_pyramid(image: &Image, config: &PyramidConfig) -> Vec<PyramidLevel> {
    let min_area = config.min_area();
    let mut levels = vec![PyramidLevel {
        level: 0,
        scale: 1.0,
        image: image.clone(),
    }];
    loop {
        let prev = levels.last().expect("level 0 present");
        let next = downsample(&prev.image, config.ratio).expect("ratio validated by config");
        let shrunk = next.width < prev.image.width || next.height < prev.image.height;
        if !shrunk || ((next.width * next.height) as f64) < min_area {
            break;
        }
        let level = PyramidLevel {
            level: prev.level + 1,
            scale: prev.scale * config.ratio,
            image: next,
        };
        levels.push(level);
    }
    levels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilerConfig {
    pub patch_width: usize,
    pub patch_height: usize,
    pub stride: usize,
}

impl Default for TilerConfig {
    fn default() -> Self {
        Self {
            patch_width: 200,
            patch_height: 200,
            stride: 180,
        }
    }
}

impl TilerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.stride == 0 || self.stride > self.patch_width || self.stride > self.patch_height {
            return Err(format!(
                "tiler.stride must lie in [1, patch side], got {} for {}x{} patches",
                self.stride, self.patch_width, self.patch_height
            ));
        }
        Ok(())
    }
}

/// A fixed-size window cut from one pyramid level.
#[derive(Debug, Clone)]
pub struct Patch {
    pub level: usize,
    pub scale: f64,
    pub origin_x: usize,
    pub origin_y: usize,
    pub image: Image,
}

/// Top-left corners of the patches `tile` emits for a `width`×`height`
/// level, in row-major order.
///
/// Columns step by the stride while the origin is inside the image (the
/// last one may overhang and is zero-padded). Rows step likewise but a row
/// that would overhang is dropped, unless the image is shorter than one
/// patch, in which case the single row at 0 is kept and padded.
pub fn tile_origins(width: usize, height: usize, config: &TilerConfig) -> Vec<(usize, usize)> {
    let xs: Vec<usize> = (0..width).step_by(config.stride).collect();
    let ys: Vec<usize> = if height < config.patch_height {
        vec![0]
    } else {
        (0..=height - config.patch_height)
            .step_by(config.stride)
            .collect()
    };
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect()
}

pub fn tile(level: &PyramidLevel, config: &TilerConfig) -> Vec<Patch> {
    tile_origins(level.image.width, level.image.height, config)
        .into_iter()
        .map(|(x, y)| Patch {
            level: level.level,
            scale: level.scale,
            origin_x: x,
            origin_y: y,
            image: level
                .image
                .crop_padded(x as i64, y as i64, config.patch_width, config.patch_height),
        })
        .collect()
}
