//! Pixel buffers, bilinear warping and binary PNM I/O.
//!
//! Pixel centres sit at integer coordinates. Warps use inverse mapping: each
//! output pixel is pulled back through the transform and sampled
//! bilinearly, with taps outside the source reading as 0. Intensities are
//! kept as `f32` in `[0, 255]` and only quantized to 8 bits when written.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::affine::{
    derive_template_landmarks, estimate_similarity, AffineError, BaseTemplate, LandmarkSet, SimilarityTransform,
};
use crate::exec::Execution;
use crate::geometry::{policy_to_box, AlignmentPolicy, CropBox};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive (got {width}x{height}x{channels})")]
    BadDimensions { width: usize, height: usize, channels: usize },
    #[error("pixel buffer holds {got} values, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("crop box {crop:?} is outside the {width}x{height} image")]
    BoxOutOfBounds { crop: CropBox, width: usize, height: usize },
    #[error("malformed PNM: {0}")]
    Malformed(String),
    #[error("truncated PNM payload: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("unsupported PNM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error(transparent)]
    Alignment(#[from] AffineError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major, channel-interleaved image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        Self::check_dims(width, height, channels)?;
        Ok(Self { width, height, channels, data: vec![0.0; width * height * channels] })
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        Self::check_dims(width, height, channels)?;
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::BufferLength { expected, got: data.len() });
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds an image from `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self, ImageError> {
        let mut img = Self::new(width, height, channels)?;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        Ok(img)
    }

    fn check_dims(width: usize, height: usize, channels: usize) -> Result<(), ImageError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::BadDimensions { width, height, channels });
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Single-channel copy of channel `c`.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImageBuffer { width: self.width, height: self.height, channels: 1, data }
    }

    /// Interleaves three single-channel planes of equal size.
    pub fn from_planes(planes: &[ImageBuffer; 3]) -> Result<Self, ImageError> {
        let (w, h) = (planes[0].width, planes[0].height);
        if planes.iter().any(|p| p.width != w || p.height != h || p.channels != 1) {
            return Err(ImageError::Malformed("planes must be single-channel and equal in size".into()));
        }
        Self::from_fn(w, h, 3, |x, y, c| planes[c].get(x, y, 0))
    }

    /// Values quantized to 8 bits, rounding half away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::from_vec(width, height, channels, bytes.iter().map(|&b| b as f32).collect())
    }

    /// `(max, mean)` absolute per-sample difference; `None` if shapes differ.
    pub fn abs_diff_stats(&self, other: &ImageBuffer) -> Option<(f32, f32)> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return None;
        }
        let (max, sum) = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold((0f32, 0f64), |(m, s), d| (m.max(d), s + d as f64));
        Some((max, (sum / self.data.len() as f64) as f32))
    }

    /// Bilinear sample of channel `c` at real coordinates; taps outside the
    /// image contribute 0.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let tap = |xi: i64, yi: i64| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.get(xi as usize, yi as usize, c)
            }
        };
        let top = if fx == 0.0 { tap(x0, y0) } else { tap(x0, y0) * (1.0 - fx) + tap(x0 + 1, y0) * fx };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 { tap(x0, y0 + 1) } else { tap(x0, y0 + 1) * (1.0 - fx) + tap(x0 + 1, y0 + 1) * fx };
        top * (1.0 - fy) + bottom * fy
    }
}

/// Warps `img` by `t` (source → output coordinates) into an
/// `out_w × out_h` image.
pub fn warp_affine(
    img: &ImageBuffer,
    t: &SimilarityTransform,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuffer, ImageError> {
    warp_affine_with(Execution::default(), img, t, out_w, out_h)
}

/// [`warp_affine`] with an explicit row scheduler.
pub fn warp_affine_with(
    exec: Execution,
    img: &ImageBuffer,
    t: &SimilarityTransform,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuffer, ImageError> {
    let mut out = ImageBuffer::new(out_w, out_h, img.channels)?;
    let inv = t.inverse();
    let ch = img.channels;
    exec.for_each_chunk_mut(&mut out.data, out_w * ch, |y, row| {
        let yf = y as f64;
        for x in 0..out_w {
            let xf = x as f64;
            let sx = inv.a * xf - inv.b * yf + inv.tx;
            let sy = inv.b * xf + inv.a * yf + inv.ty;
            for c in 0..ch {
                row[x * ch + c] = img.sample_bilinear(sx, sy, c);
            }
        }
    });
    Ok(out)
}

/// Crops `crop` and resizes it to `out_size²` in one resampling pass.
pub fn crop_resize(img: &ImageBuffer, crop: CropBox, out_size: usize) -> Result<ImageBuffer, ImageError> {
    let inside = crop.side > 0
        && crop.left >= 0
        && crop.top >= 0
        && crop.left + crop.side <= img.width as i64
        && crop.top + crop.side <= img.height as i64;
    if !inside {
        return Err(ImageError::BoxOutOfBounds { crop, width: img.width, height: img.height });
    }
    let k = out_size as f64 / crop.side as f64;
    let t = SimilarityTransform::new(k, 0.0, -(crop.left as f64) * k, -(crop.top as f64) * k);
    warp_affine(img, &t, out_size, out_size)
}

/// Aligns `img` straight to the template of policy `p` with a single warp.
pub fn align_direct(
    img: &ImageBuffer,
    landmarks: &LandmarkSet,
    p: AlignmentPolicy,
    base: &BaseTemplate,
) -> Result<ImageBuffer, ImageError> {
    let target = derive_template_landmarks(p, base)?;
    let t = estimate_similarity(landmarks, &target)?;
    let size = base.output_size as usize;
    warp_affine(img, &t, size, size)
}

/// Aligns `img` to the base canvas, then crops and resizes the policy's box.
pub fn align_via_canvas(
    img: &ImageBuffer,
    landmarks: &LandmarkSet,
    p: AlignmentPolicy,
    base: &BaseTemplate,
) -> Result<ImageBuffer, ImageError> {
    AlignedCanvas::new(img, landmarks, base)?.crop(p)
}

/// One face warped onto the base canvas, reusable for every policy.
#[derive(Debug, Clone)]
pub struct AlignedCanvas {
    canvas: ImageBuffer,
    base: BaseTemplate,
    transform: SimilarityTransform,
    crops: usize,
}

impl AlignedCanvas {
    pub fn new(img: &ImageBuffer, landmarks: &LandmarkSet, base: &BaseTemplate) -> Result<Self, ImageError> {
        let transform = estimate_similarity(landmarks, &base.landmarks)?;
        let side = base.canvas as usize;
        let canvas = warp_affine(img, &transform, side, side)?;
        Ok(Self { canvas, base: base.clone(), transform, crops: 0 })
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.canvas
    }

    /// Source-to-canvas transform.
    pub fn transform(&self) -> &SimilarityTransform {
        &self.transform
    }

    /// Number of crops served from this canvas.
    pub fn crops_served(&self) -> usize {
        self.crops
    }

    pub fn crop(&mut self, p: AlignmentPolicy) -> Result<ImageBuffer, ImageError> {
        let b = policy_to_box(p, self.base.canvas).map_err(AffineError::from)?;
        self.crops += 1;
        crop_resize(&self.canvas, b, self.base.output_size as usize)
    }
}

/// Encodes a binary PGM (1 channel) or PPM (3 channels) with maxval 255.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Decodes binary P5/P6 data with maxval 255. `#` comments are allowed
/// anywhere in the header.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ImageError::Malformed(format!("unsupported magic {other:?}"))),
    };
    let mut number = |what: &str| -> Result<u32, ImageError> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse().map_err(|_| ImageError::Malformed(format!("bad {what} {tok:?}")))
    };
    let width = number("width")? as usize;
    let height = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::Malformed("missing whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated { expected, got: payload.len() });
    }
    ImageBuffer::from_u8(width, height, channels, &payload[..expected])
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String, ImageError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(ImageError::Malformed("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_pnm(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    fs::write(path, encode_pnm(img))?;
    Ok(())
}
