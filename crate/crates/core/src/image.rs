//! Dense floating-point images and the handful of resampling and I/O helpers
//! the losses need.
//!
//! Pixels are stored row-major with interleaved channels (`HWC`). Values are
//! linear and unclamped; the sRGB transfer and clamping happen only at PNG
//! export.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be nonzero, got {width}x{height}x{channels}")]
    ZeroSize {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("buffer length {got} does not match {width}x{height}x{channels}")]
    BufferLength {
        got: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("png codec error for {path}: {message}")]
    Codec { path: String, message: String },
}

/// Transfer curve applied when moving between 8-bit files and float buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transfer {
    /// Values are stored sRGB-encoded on disk and linear in memory.
    Srgb,
    /// Values are copied as `byte / 255`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// RGB image with every pixel set to `rgb`.
    pub fn solid(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height, 3);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::BufferLength {
                got: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.offset(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let o = self.offset(x, y, c);
        self.data[o] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = self.offset(x, y, 0);
        &self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `a*self + b*other`.
    pub fn axpby(&self, a: f64, other: &Image, b: f64) -> Result<Image, ImageError> {
        self.same_shape(other)?;
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.width * self.height;
        if n == 0 {
            return 0.0;
        }
        self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n as f64
    }

    pub fn mse(&self, other: &Image) -> Result<f64, ImageError> {
        self.same_shape(other)?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn dot(&self, other: &Image) -> Result<f64, ImageError> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let plan = ResamplePlan::bilinear(self.width, self.height, width, height);
        plan.apply(self)
    }

    /// Output size for a relative `scale`, never below one pixel per axis.
    pub fn scaled_dims(&self, scale: f64) -> (usize, usize) {
        scaled_dims(self.width, self.height, scale)
    }

    pub fn save_png(&self, path: &Path, transfer: Transfer) -> Result<(), ImageError> {
        let bytes = self.to_rgb8(transfer);
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| ImageError::Codec {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Quantizes to 8-bit RGB. Gray images are replicated, extra channels dropped.
    pub fn to_rgb8(&self, transfer: Transfer) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for px in self.data.chunks_exact(self.channels.max(1)) {
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                let encoded = match transfer {
                    Transfer::Srgb => linear_to_srgb(v.clamp(0.0, 1.0)),
                    Transfer::Identity => v.clamp(0.0, 1.0),
                };
                out.push((encoded * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn load_png(path: &Path, transfer: Transfer) -> Result<Image, ImageError> {
        let decoded = image::open(path).map_err(|e| ImageError::Codec {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|b| {
                let v = b as f64 / 255.0;
                match transfer {
                    Transfer::Srgb => srgb_to_linear(v),
                    Transfer::Identity => v,
                }
            })
            .collect();
        Image::from_vec(w, h, 3, data)
    }
}

pub fn scaled_dims(width: usize, height: usize, scale: f64) -> (usize, usize) {
    let w = ((width as f64) * scale).round().max(1.0) as usize;
    let h = ((height as f64) * scale).round().max(1.0) as usize;
    (w, h)
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// A linear resampling operator stored as per-output-pixel taps, so the same
/// plan gives both the forward resize and its adjoint.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    in_width: usize,
    in_height: usize,
    out_width: usize,
    out_height: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl ResamplePlan {
    /// Half-pixel-centred bilinear sampling (no antialiasing), edge-clamped.
    pub fn bilinear(in_width: usize, in_height: usize, out_width: usize, out_height: usize) -> Self {
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    let frac = (src - i0 as f64).clamp(0.0, 1.0);
                    (i0, i1, frac)
                })
                .collect()
        };
        let xs = axis(out_width, in_width);
        let ys = axis(out_height, in_height);
        let mut taps = Vec::with_capacity(out_width * out_height);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * in_width + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * in_width + x1, fx * (1.0 - fy)),
                    (y1 * in_width + x0, (1.0 - fx) * fy),
                    (y1 * in_width + x1, fx * fy),
                ]);
            }
        }
        Self {
            in_width,
            in_height,
            out_width,
            out_height,
            taps,
        }
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.out_width, self.out_height)
    }

    pub fn apply(&self, input: &Image) -> Image {
        debug_assert_eq!((input.width, input.height), (self.in_width, self.in_height));
        let ch = input.channels;
        let mut out = Image::zeros(self.out_width, self.out_height, ch);
        for (o, taps) in self.taps.iter().enumerate() {
            for &(src, w) in taps {
                for c in 0..ch {
                    out.data[o * ch + c] += w * input.data[src * ch + c];
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back.
    pub fn apply_transpose(&self, grad_out: &Image) -> Image {
        let ch = grad_out.channels;
        let mut grad_in = Image::zeros(self.in_width, self.in_height, ch);
        for (o, taps) in self.taps.iter().enumerate() {
            for &(src, w) in taps {
                for c in 0..ch {
                    grad_in.data[src * ch + c] += w * grad_out.data[o * ch + c];
                }
            }
        }
        grad_in
    }
}
