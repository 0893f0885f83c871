//! Image decoding and the encoder input contract.
//!
//! Resampling is a separable convolution with antialiasing on downscale
//! (the filter support widens with the scale factor), evaluated in floating
//! point without intermediate 8-bit quantization.

use std::path::Path;

use image::ImageFormat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be nonempty".into()));
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(RawImage { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RawImage::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, u8> {
        self.data.chunks_exact_mut(3)
    }

    pub fn mean_color(&self) -> [u8; 3] {
        let n = (self.width as u64) * (self.height as u64);
        let mut sum = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as u64;
            }
        }
        sum.map(|s| ((s as f64 / n as f64).round()) as u8)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            ImageFormat::Png,
        )
        .map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))
    }
}

/// Reads a PNG or JPEG file into RGB.
pub fn decode(path: &Path) -> Result<RawImage> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| decode_err(e.to_string()))?;
    decode_bytes(&bytes).map_err(decode_err)
}

pub(crate) fn decode_bytes(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(format!("unsupported format {format:?}; PNG and JPEG only"));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(w, h, rgb.into_raw()).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResizeMode {
    ShorterSideThenCenterCrop,
    DirectResize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Bilinear,
    Bicubic,
}

impl Interpolation {
    fn support(self) -> f64 {
        match self {
            Interpolation::Bilinear => 1.0,
            Interpolation::Bicubic => 2.0,
        }
    }

    fn weight(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Interpolation::Bilinear => (1.0 - x).max(0.0),
            Interpolation::Bicubic => {
                const A: f64 = -0.5;
                if x < 1.0 {
                    ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * A
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: u32,
    pub resize_mode: ResizeMode,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    pub interpolation: Interpolation,
}

impl PreprocessSpec {
    pub fn new(target_size: u32, channel_mean: [f32; 3], channel_std: [f32; 3]) -> Result<Self> {
        let spec = PreprocessSpec {
            target_size,
            resize_mode: ResizeMode::ShorterSideThenCenterCrop,
            channel_mean,
            channel_std,
            interpolation: Interpolation::Bicubic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::InvalidArgument("target_size must be positive".into()));
        }
        if self.channel_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("channel_std must be positive".into()));
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("channel_mean must be finite".into()));
        }
        Ok(())
    }
}

/// Channel-major `3 × size × size` input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    size: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn from_chw(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != 3 * size * size {
            return Err(Error::InvalidArgument(format!(
                "tensor of size {size} needs {} values, got {}",
                3 * size * size,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tensor contains non-finite values".into()));
        }
        Ok(ImageTensor { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.size + y) * self.size + x]
    }
}

/// Planar float image used between resampling passes.
#[derive(Debug, Clone)]
pub(crate) struct Planes {
    pub width: usize,
    pub height: usize,
    /// three planes of `height * width`
    pub data: [Vec<f64>; 3],
}

impl Planes {
    fn from_raw(img: &RawImage) -> Self {
        let n = img.width as usize * img.height as usize;
        let mut data = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                data[c].push(px[c] as f64);
            }
        }
        Planes {
            width: img.width as usize,
            height: img.height as usize,
            data,
        }
    }
}

struct Taps {
    start: usize,
    weights: Vec<f64>,
}

fn taps(in_len: usize, out_len: usize, filter: Interpolation) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = scale.max(1.0);
    let support = filter.support() * filter_scale;
    let inv = 1.0 / filter_scale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).trunc().max(0.0)) as usize;
            let hi = ((center + support + 0.5).trunc() as usize).min(in_len);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| filter.weight((j as f64 - center + 0.5) * inv))
                .collect();
            let total: f64 = weights.iter().sum();
            if total != 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            Taps { start: lo, weights }
        })
        .collect()
}

pub(crate) fn resize_planes(src: &Planes, out_w: usize, out_h: usize, filter: Interpolation) -> Planes {
    let mut cur = src.clone();
    if out_w != cur.width {
        let t = taps(cur.width, out_w, filter);
        let mut data: [Vec<f64>; 3] = Default::default();
        for c in 0..3 {
            let plane = &cur.data[c];
            let mut out = Vec::with_capacity(out_w * cur.height);
            for y in 0..cur.height {
                let row = &plane[y * cur.width..(y + 1) * cur.width];
                for tap in &t {
                    out.push(
                        tap.weights
                            .iter()
                            .zip(&row[tap.start..])
                            .map(|(w, v)| w * v)
                            .sum(),
                    );
                }
            }
            data[c] = out;
        }
        cur = Planes {
            width: out_w,
            height: cur.height,
            data,
        };
    }
    if out_h != cur.height {
        let t = taps(cur.height, out_h, filter);
        let mut data: [Vec<f64>; 3] = Default::default();
        for c in 0..3 {
            let plane = &cur.data[c];
            let mut out = vec![0.0; out_w * out_h];
            for (y, tap) in t.iter().enumerate() {
                for (k, w) in tap.weights.iter().enumerate() {
                    let src_row = &plane[(tap.start + k) * out_w..(tap.start + k + 1) * out_w];
                    for (o, v) in out[y * out_w..(y + 1) * out_w].iter_mut().zip(src_row) {
                        *o += w * v;
                    }
                }
            }
            data[c] = out;
        }
        cur = Planes {
            width: out_w,
            height: out_h,
            data,
        };
    }
    cur
}

/// Resamples an 8-bit image to `width × height`; values stay on the 0..255 scale.
pub fn resize(img: &RawImage, width: usize, height: usize, filter: Interpolation) -> [Vec<f64>; 3] {
    resize_planes(&Planes::from_raw(img), width, height, filter).data
}

/// Size after scaling the shorter side to `target`, keeping aspect ratio.
fn shorter_side_size(width: usize, height: usize, target: usize) -> (usize, usize) {
    if width <= height {
        (target, (target as f64 * height as f64 / width as f64) as usize)
    } else {
        ((target as f64 * width as f64 / height as f64) as usize, target)
    }
}

fn crop_offset(len: usize, target: usize) -> usize {
    ((len - target) as f64 / 2.0).round_ties_even() as usize
}

pub fn preprocess(img: &RawImage, spec: &PreprocessSpec) -> ImageTensor {
    let size = spec.target_size as usize;
    let planes = Planes::from_raw(img);
    let (resized, left, top) = match spec.resize_mode {
        ResizeMode::DirectResize => (resize_planes(&planes, size, size, spec.interpolation), 0, 0),
        ResizeMode::ShorterSideThenCenterCrop => {
            let (w, h) = shorter_side_size(planes.width, planes.height, size);
            let resized = resize_planes(&planes, w.max(size), h.max(size), spec.interpolation);
            let left = crop_offset(resized.width, size);
            let top = crop_offset(resized.height, size);
            (resized, left, top)
        }
    };
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let mean = spec.channel_mean[c] as f64;
        let std = spec.channel_std[c] as f64;
        let plane = &resized.data[c];
        for y in 0..size {
            let row = &plane[(y + top) * resized.width + left..][..size];
            data.extend(row.iter().map(|v| ((v / 255.0 - mean) / std) as f32));
        }
    }
    ImageTensor { size, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(size: u32, mode: ResizeMode, interp: Interpolation) -> PreprocessSpec {
        PreprocessSpec {
            target_size: size,
            resize_mode: mode,
            channel_mean: [0.48, 0.46, 0.41],
            channel_std: [0.27, 0.26, 0.28],
            interpolation: interp,
        }
    }

    #[test]
    fn uniform_image_closed_form() {
        let img = RawImage::from_fn(37, 23, |_, _| [200, 10, 0]).unwrap();
        for mode in [ResizeMode::ShorterSideThenCenterCrop, ResizeMode::DirectResize] {
            for interp in [Interpolation::Bilinear, Interpolation::Bicubic] {
                let s = spec(16, mode, interp);
                let t = preprocess(&img, &s);
                assert_eq!(t.data().len(), 3 * 16 * 16);
                for (c, v) in [200.0f64, 10.0, 0.0].iter().enumerate() {
                    let expected = ((v / 255.0 - s.channel_mean[c] as f64) / s.channel_std[c] as f64) as f32;
                    for y in 0..16 {
                        for x in 0..16 {
                            assert!((t.at(c, y, x) - expected).abs() < 1e-5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn square_input_needs_no_crop() {
        let img = RawImage::from_fn(448, 448, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]).unwrap();
        let cropped = preprocess(&img, &spec(224, ResizeMode::ShorterSideThenCenterCrop, Interpolation::Bicubic));
        let direct = preprocess(&img, &spec(224, ResizeMode::DirectResize, Interpolation::Bicubic));
        assert_eq!(cropped, direct);
    }

    #[test]
    fn same_size_is_identity() {
        let img = RawImage::from_fn(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, 255]).unwrap();
        let out = resize(&img, 8, 8, Interpolation::Bicubic);
        assert_eq!(out[0][3 * 8 + 5], 150.0);
        assert_eq!(out[1][3 * 8 + 5], 90.0);
    }

    #[test]
    fn center_crop_offsets() {
        assert_eq!(shorter_side_size(300, 200, 224), (336, 224));
        assert_eq!(shorter_side_size(200, 301, 224), (224, 337));
        assert_eq!(crop_offset(337, 224), 56);
        // 113 / 2 = 56.5 rounds to even
        assert_eq!(crop_offset(225 + 112, 224), 56);
        assert_eq!(crop_offset(227, 224), 2);
    }

    #[test]
    fn extreme_values_stay_finite() {
        let img = RawImage::from_fn(9, 5, |x, _| if x % 2 == 0 { [255; 3] } else { [0; 3] }).unwrap();
        let t = preprocess(&img, &spec(7, ResizeMode::ShorterSideThenCenterCrop, Interpolation::Bicubic));
        assert!(t.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(0, ResizeMode::DirectResize, Interpolation::Bilinear);
        assert!(s.validate().is_err());
        s.target_size = 4;
        s.channel_std[1] = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn decode_png_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        RawImage::from_fn(2, 2, |_, _| [255; 3]).unwrap().save_png(&path).unwrap();
        let img = decode(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert!(img.data().iter().all(|&v| v == 255));

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("cut.png");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(decode(&truncated), Err(Error::Decode { .. })));

        let bmp = dir.path().join("x.bmp");
        std::fs::write(&bmp, b"BM\0\0\0\0").unwrap();
        assert!(matches!(decode(&bmp), Err(Error::Decode { .. })));
    }
}
