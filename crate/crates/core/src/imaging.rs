//! Image buffers and the pixel operations the estimators and losses share.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::warp::{point_jacobian, PixelWarp, WarpParams};

/// `width × height × channels` buffer of unit-interval intensities, stored
/// row-major with interleaved channels, plus a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}×{height}×{channels} image",
                data.len()
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            channels,
            data,
            mask: vec![true; width * height],
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImagePlane {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            mask: vec![true; width * height],
        }
    }

    /// Single-channel image from a function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ImagePlane {
            width,
            height,
            channels: 1,
            data,
            mask: vec![true; width * height],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.width * self.height {
            return Err(Error::ShapeMismatch("mask length differs from pixel count".into()));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &ImagePlane) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}×{}×{} vs {}×{}×{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// One channel as a single-channel image (mask kept).
    pub fn channel(&self, c: usize) -> ImagePlane {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
            mask: self.mask.clone(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImagePlane> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}×{h}+{x0}+{y0} exceeds {}×{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        let mut mask = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
            mask.extend_from_slice(&self.mask[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(ImagePlane {
            width: w,
            height: h,
            channels: c,
            data,
            mask,
        })
    }

    /// Centered `w × h` window; the source center `(W/2, H/2)` maps to the
    /// crop center `(w/2, h/2)` when the size differences are even.
    pub fn center_crop(&self, w: usize, h: usize) -> Result<ImagePlane> {
        if w > self.width || h > self.height {
            return Err(Error::InvalidArgument(format!(
                "center crop {w}×{h} larger than {}×{} image",
                self.width, self.height
            )));
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    /// 2×2 box downsampling; a coarse pixel is valid only if all four
    /// fine pixels are.
    pub fn downsample2(&self) -> ImagePlane {
        let (w, h, c) = (self.width / 2, self.height / 2, self.channels);
        let mut data = vec![0.0; w * h * c];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (2 * x, 2 * y);
                for ch in 0..c {
                    data[(y * w + x) * c + ch] = 0.25
                        * (self.get(fx, fy, ch)
                            + self.get(fx + 1, fy, ch)
                            + self.get(fx, fy + 1, ch)
                            + self.get(fx + 1, fy + 1, ch));
                }
                mask[y * w + x] = self.is_valid(fx, fy)
                    && self.is_valid(fx + 1, fy)
                    && self.is_valid(fx, fy + 1)
                    && self.is_valid(fx + 1, fy + 1);
            }
        }
        ImagePlane {
            width: w,
            height: h,
            channels: c,
            data,
            mask,
        }
    }

    /// Concatenates channels of equally sized images; masks are ANDed.
    pub fn stack(planes: &[&ImagePlane]) -> Result<ImagePlane> {
        let first = planes
            .first()
            .ok_or_else(|| Error::DegenerateInput("nothing to stack".into()))?;
        let (w, h) = (first.width, first.height);
        if planes.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::ShapeMismatch("stacked planes differ in size".into()));
        }
        let c: usize = planes.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * c);
        let mut mask = vec![true; w * h];
        for i in 0..w * h {
            for p in planes {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
                mask[i] &= p.mask[i];
            }
        }
        Ok(ImagePlane {
            width: w,
            height: h,
            channels: c,
            data,
            mask,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let path = path.as_ref();
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let to_unit = |v: u8| v as f64 / 255.0;
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            ImagePlane::new(w as usize, h as usize, 3, rgb.into_raw().into_iter().map(to_unit).collect())
        } else {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            ImagePlane::new(w as usize, h as usize, 1, gray.into_raw().into_iter().map(to_unit).collect())
        }
    }

    /// Quantizes to 8 bits (`round(255 v)`) and writes a PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = match self.channels {
            1 => ::image::ExtendedColorType::L8,
            3 => ::image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot write a {c}-channel image as PNG"
                )))
            }
        };
        ::image::save_buffer_with_format(path, &bytes, w, h, color, ::image::ImageFormat::Png).map_err(
            |source| Error::Image {
                path: path.to_path_buf(),
                source,
            },
        )
    }
}

/// Bilinear sample at `(x, y)` in channel `c`, or `None` when a tap falls
/// outside the image or on an invalid pixel. Valid range is `[0, W-1]`.
#[inline]
pub(crate) fn bilinear(src: &ImagePlane, c: usize, x: f64, y: f64) -> Option<f64> {
    let (x0, y0, fx, fy) = cell(src, x, y)?;
    let w = src.width;
    if !(src.mask[y0 * w + x0] && src.mask[y0 * w + x0 + 1] && src.mask[(y0 + 1) * w + x0] && src.mask[(y0 + 1) * w + x0 + 1]) {
        return None;
    }
    let v00 = src.get(x0, y0, c);
    let v10 = src.get(x0 + 1, y0, c);
    let v01 = src.get(x0, y0 + 1, c);
    let v11 = src.get(x0 + 1, y0 + 1, c);
    let top = v00 + fx * (v10 - v00);
    let bot = v01 + fx * (v11 - v01);
    Some(top + fy * (bot - top))
}

#[inline]
fn cell(src: &ImagePlane, x: f64, y: f64) -> Option<(usize, usize, f64, f64)> {
    let (wm, hm) = ((src.width - 1) as f64, (src.height - 1) as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= wm && y <= hm) {
        return None;
    }
    let x0 = (x.floor() as usize).min(src.width - 2);
    let y0 = (y.floor() as usize).min(src.height - 2);
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

/// Value and spatial derivative of the bilinear interpolant. At cell
/// boundaries the derivative is the mean of the one-sided slopes, which
/// is the central difference on the pixel grid.
#[inline]
pub(crate) fn bilinear_with_grad(src: &ImagePlane, c: usize, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    let value = bilinear(src, c, x, y)?;
    let gx = axis_slope(src, c, x, y, true);
    let gy = axis_slope(src, c, x, y, false);
    Some((value, gx, gy))
}

fn axis_slope(src: &ImagePlane, c: usize, x: f64, y: f64, along_x: bool) -> f64 {
    let (pos, lim) = if along_x {
        (x, src.width - 1)
    } else {
        (y, src.height - 1)
    };
    // slope of the linear piece on [k, k+1] evaluated at the other coordinate
    let piece = |k: usize| -> f64 {
        let at = |p: f64| -> f64 {
            if along_x {
                interp_fixed(src, c, p, y, true)
            } else {
                interp_fixed(src, c, x, p, false)
            }
        };
        at((k + 1) as f64) - at(k as f64)
    };
    let f = pos.floor();
    if pos == f {
        let k = f as usize;
        if k == 0 {
            piece(0)
        } else if k >= lim {
            piece(lim - 1)
        } else {
            0.5 * (piece(k - 1) + piece(k))
        }
    } else {
        piece((f as usize).min(lim - 1))
    }
}

/// Linear interpolation across the other axis at an integer coordinate
/// along the slope axis.
#[inline]
fn interp_fixed(src: &ImagePlane, c: usize, x: f64, y: f64, along_x: bool) -> f64 {
    if along_x {
        let xi = x as usize;
        let y0 = (y.floor() as usize).min(src.height - 2);
        let fy = y - y0 as f64;
        src.get(xi, y0, c) * (1.0 - fy) + src.get(xi, y0 + 1, c) * fy
    } else {
        let yi = y as usize;
        let x0 = (x.floor() as usize).min(src.width - 2);
        let fx = x - x0 as f64;
        src.get(x0, yi, c) * (1.0 - fx) + src.get(x0 + 1, yi, c) * fx
    }
}

/// Samples `src` at `m · x` for every output pixel `x`.
pub(crate) fn sample_at(src: &ImagePlane, m: &PixelWarp, width: usize, height: usize) -> ImagePlane {
    let c = src.channels;
    let mut data = vec![0.0; width * height * c];
    let mut mask = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = m.apply(x as f64, y as f64);
            let i = y * width + x;
            if let Some((x0, y0, _, _)) = cell(src, sx, sy) {
                let w = src.width;
                if !(src.mask[y0 * w + x0]
                    && src.mask[y0 * w + x0 + 1]
                    && src.mask[(y0 + 1) * w + x0]
                    && src.mask[(y0 + 1) * w + x0 + 1])
                {
                    continue;
                }
                for ch in 0..c {
                    // taps already checked
                    data[i * c + ch] = bilinear(src, ch, sx, sy).unwrap_or(0.0).clamp(0.0, 1.0);
                }
                mask[i] = true;
            }
        }
    }
    ImagePlane {
        width,
        height,
        channels: c,
        data,
        mask,
    }
}

/// Backward warp: `out(x) = src(w⁻¹ x)`. Pixels whose taps leave the
/// source (or hit invalid source pixels) are zero with a cleared mask.
pub fn sample_bilinear(src: &ImagePlane, w: &PixelWarp) -> ImagePlane {
    sample_at(src, &w.inverse(), src.width, src.height)
}

/// Warps `src` by normalized parameters (backward sampling at `W(h)⁻¹ x`).
pub fn warp_image(src: &ImagePlane, h: &WarpParams) -> Result<ImagePlane> {
    let w = crate::warp::params_to_pixel_warp(h, src.width, src.height)?;
    Ok(sample_bilinear(src, &w))
}

/// Per-pixel rows of `∂ src(W(x; h)) / ∂h`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpJacobian {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dof: usize,
    /// `(pixel * channels + channel) * dof + param`
    pub rows: Vec<f64>,
    /// Values `src(W(x; h))` in the same layout as an image.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl WarpJacobian {
    #[inline]
    pub fn row(&self, pixel: usize, channel: usize) -> &[f64] {
        let i = (pixel * self.channels + channel) * self.dof;
        &self.rows[i..i + self.dof]
    }
}

/// Image gradient of the interpolant at the forward-warped position times
/// the warp's point Jacobian.
pub fn warp_jacobian(src: &ImagePlane, h: &WarpParams) -> Result<WarpJacobian> {
    let (w, hgt, c) = (src.width, src.height, src.channels);
    let pw = crate::warp::params_to_pixel_warp(h, w, hgt)?;
    let dof = h.model().dof();
    let mut rows = vec![0.0; w * hgt * c * dof];
    let mut values = vec![0.0; w * hgt * c];
    let mut mask = vec![false; w * hgt];
    for y in 0..hgt {
        for x in 0..w {
            let (sx, sy) = pw.apply(x as f64, y as f64);
            let i = y * w + x;
            if bilinear(src, 0, sx, sy).is_none() {
                continue;
            }
            mask[i] = true;
            let pj = point_jacobian(h, x as f64, y as f64, w, hgt);
            for ch in 0..c {
                let (v, gx, gy) = bilinear_with_grad(src, ch, sx, sy).expect("taps checked");
                values[i * c + ch] = v;
                let base = (i * c + ch) * dof;
                for (k, d) in pj.iter().enumerate() {
                    rows[base + k] = gx * d[0] + gy * d[1];
                }
            }
        }
    }
    Ok(WarpJacobian {
        width: w,
        height: hgt,
        channels: c,
        dof,
        rows,
        values,
        mask,
    })
}

/// Input channel transforms used by the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preprocess {
    /// Unchanged input.
    Raw,
    Gray,
    /// `src − blur_σ=2(src) + 0.5`
    HighPass,
    /// Min-max normalized Harris response.
    Corner,
}

impl std::str::FromStr for Preprocess {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Preprocess::Raw),
            "gray" | "grey" | "grayscale" => Ok(Preprocess::Gray),
            "highpass" | "high-pass" => Ok(Preprocess::HighPass),
            "corner" | "cornerness" => Ok(Preprocess::Corner),
            other => Err(Error::InvalidArgument(format!("unknown input mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Preprocess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preprocess::Raw => "raw",
            Preprocess::Gray => "gray",
            Preprocess::HighPass => "highpass",
            Preprocess::Corner => "corner",
        })
    }
}

pub fn to_gray(src: &ImagePlane) -> ImagePlane {
    if src.channels == 1 {
        return src.clone();
    }
    let data = src
        .data
        .chunks_exact(src.channels)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    ImagePlane {
        width: src.width,
        height: src.height,
        channels: 1,
        data,
        mask: src.mask.clone(),
    }
}

pub fn preprocess(src: &ImagePlane, mode: Preprocess) -> ImagePlane {
    match mode {
        Preprocess::Raw => src.clone(),
        Preprocess::Gray => to_gray(src),
        Preprocess::HighPass => {
            let blurred = gaussian_blur(src, 2.0);
            let mut out = src.clone();
            for (o, b) in out.data.iter_mut().zip(&blurred.data) {
                *o = (*o - b + 0.5).clamp(0.0, 1.0);
            }
            out
        }
        Preprocess::Corner => harris(&to_gray(src), 0.04, 1.5),
    }
}

pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Zero-padded separable correlation of a `w × h` scalar field.
pub(crate) fn separable_filter(field: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &field[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = 0.0;
            for xx in lo..=hi {
                acc += kernel[xx + r - x] * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for yy in lo..=hi {
            let k = kernel[yy + r - y];
            let src = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

/// Mask-aware Gaussian blur: weights are renormalized over valid taps.
pub fn gaussian_blur(src: &ImagePlane, sigma: f64) -> ImagePlane {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(sigma, radius);
    let (w, h) = (src.width, src.height);
    let valid: Vec<f64> = src.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let norm = separable_filter(&valid, w, h, &kernel);
    let mut out = src.clone();
    for c in 0..src.channels {
        let field: Vec<f64> = (0..w * h).map(|i| src.data[i * src.channels + c] * valid[i]).collect();
        let num = separable_filter(&field, w, h, &kernel);
        for i in 0..w * h {
            out.data[i * src.channels + c] = if norm[i] > 0.0 { num[i] / norm[i] } else { 0.0 };
        }
    }
    out
}

fn central_gradients(src: &ImagePlane) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (src.width, src.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            gx[y * w + x] = (src.get(xr, y, 0) - src.get(xl, y, 0)) / (xr - xl).max(1) as f64;
            gy[y * w + x] = (src.get(x, yd, 0) - src.get(x, yu, 0)) / (yd - yu).max(1) as f64;
        }
    }
    (gx, gy)
}

/// Harris response `det − k·trace²` of the Gaussian-smoothed structure
/// tensor, min-max normalized to `[0, 1]` (all zeros when flat).
fn harris(gray: &ImagePlane, k: f64, sigma: f64) -> ImagePlane {
    let (w, h) = (gray.width, gray.height);
    let (gx, gy) = central_gradients(gray);
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(sigma, radius);
    let xx: Vec<f64> = gx.iter().map(|g| g * g).collect();
    let yy: Vec<f64> = gy.iter().map(|g| g * g).collect();
    let xy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let sxx = separable_filter(&xx, w, h, &kernel);
    let syy = separable_filter(&yy, w, h, &kernel);
    let sxy = separable_filter(&xy, w, h, &kernel);
    let resp: Vec<f64> = (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect();
    let lo = resp.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 1e-15 {
        resp.iter().map(|r| (r - lo) / span).collect()
    } else {
        vec![0.0; w * h]
    };
    ImagePlane {
        width: w,
        height: h,
        channels: 1,
        data,
        mask: gray.mask.clone(),
    }
}

/// Photometric augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Additive, in `[-0.2, 0.2]`.
    pub brightness: f64,
    /// Multiplicative about 0.5, in `[0.8, 1.2]`.
    pub contrast: f64,
    /// Chroma rotation in radians, in `[-0.1, 0.1]`.
    pub hue: f64,
    /// Chroma gain, in `[0.8, 1.2]`.
    pub saturation: f64,
    /// Additive Gaussian noise, in `[0, 0.05]`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            brightness: 0.0,
            contrast: 1.0,
            hue: 0.0,
            saturation: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("brightness", self.brightness, -0.2, 0.2),
            ("contrast", self.contrast, 0.8, 1.2),
            ("hue", self.hue, -0.1, 0.1),
            ("saturation", self.saturation, 0.8, 1.2),
            ("noise_sigma", self.noise_sigma, 0.0, 0.05),
        ];
        for (name, v, lo, hi) in checks {
            if !(v >= lo && v <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "augment {name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Uniform draw over the allowed ranges.
    pub fn random(rng: &mut impl rand::Rng) -> Self {
        AugmentParams {
            brightness: rng.random_range(-0.2..=0.2),
            contrast: rng.random_range(0.8..=1.2),
            hue: rng.random_range(-0.1..=0.1),
            saturation: rng.random_range(0.8..=1.2),
            noise_sigma: rng.random_range(0.0..=0.05),
            seed: rng.random(),
        }
    }
}

/// Contrast about 0.5, brightness, hue/saturation in YIQ chroma (3-channel
/// only), then seeded Gaussian noise; clamped to `[0, 1]`.
pub fn augment(src: &ImagePlane, p: &AugmentParams) -> Result<ImagePlane> {
    p.validate()?;
    let mut out = src.clone();
    for v in out.data.iter_mut() {
        *v = (*v - 0.5) * p.contrast + 0.5 + p.brightness;
    }
    if out.channels == 3 && (p.hue != 0.0 || p.saturation != 1.0) {
        let (sn, cs) = p.hue.sin_cos();
        for px in out.data.chunks_exact_mut(3) {
            let (r, g, b) = (px[0], px[1], px[2]);
            let yl = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.595_716 * r - 0.274_453 * g - 0.321_263 * b;
            let q = 0.211_456 * r - 0.522_591 * g + 0.311_135 * b;
            let i2 = p.saturation * (cs * i - sn * q);
            let q2 = p.saturation * (sn * i + cs * q);
            px[0] = yl + 0.956_3 * i2 + 0.621_0 * q2;
            px[1] = yl - 0.272_1 * i2 - 0.647_4 * q2;
            px[2] = yl - 1.107_0 * i2 + 1.704_6 * q2;
        }
    }
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let normal = Normal::new(0.0, p.noise_sigma).expect("sigma validated");
        for v in out.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in out.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub(crate) const SSIM_C1: f64 = 1e-4;
pub(crate) const SSIM_C2: f64 = 9e-4;
pub(crate) const SSIM_SIGMA: f64 = 1.5;
pub(crate) const SSIM_RADIUS: usize = 5;

/// Windowed local statistics of two single-channel fields over a mask.
pub(crate) struct SsimStats {
    pub norm: Vec<f64>,
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub var_a: Vec<f64>,
    pub var_b: Vec<f64>,
    pub cov: Vec<f64>,
}

pub(crate) fn ssim_stats(a: &[f64], b: &[f64], valid: &[f64], w: usize, h: usize) -> SsimStats {
    let kernel = gaussian_kernel(SSIM_SIGMA, SSIM_RADIUS);
    let norm = separable_filter(valid, w, h, &kernel);
    let filt = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let field: Vec<f64> = (0..w * h).map(|i| f(i) * valid[i]).collect();
        let raw = separable_filter(&field, w, h, &kernel);
        raw.iter().zip(&norm).map(|(r, z)| if *z > 0.0 { r / z } else { 0.0 }).collect()
    };
    let mu_a = filt(&|i| a[i]);
    let mu_b = filt(&|i| b[i]);
    let aa = filt(&|i| a[i] * a[i]);
    let bb = filt(&|i| b[i] * b[i]);
    let ab = filt(&|i| a[i] * b[i]);
    let n = w * h;
    let var_a = (0..n).map(|i| aa[i] - mu_a[i] * mu_a[i]).collect();
    let var_b = (0..n).map(|i| bb[i] - mu_b[i] * mu_b[i]).collect();
    let cov = (0..n).map(|i| ab[i] - mu_a[i] * mu_b[i]).collect();
    SsimStats {
        norm,
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

#[inline]
pub(crate) fn ssim_value(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Per-pixel SSIM (11×11 Gaussian window, σ = 1.5, unit range constants)
/// over the joint valid mask; invalid pixels are 0 with a cleared mask.
/// Multi-channel inputs give one SSIM channel per input channel.
pub fn ssim_map(a: &ImagePlane, b: &ImagePlane) -> Result<ImagePlane> {
    a.check_same_shape(b)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    let mask: Vec<bool> = a.mask.iter().zip(&b.mask).map(|(x, y)| *x && *y).collect();
    let valid: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut data = vec![0.0; w * h * c];
    for ch in 0..c {
        let ca: Vec<f64> = (0..w * h).map(|i| a.data[i * c + ch]).collect();
        let cb: Vec<f64> = (0..w * h).map(|i| b.data[i * c + ch]).collect();
        let st = ssim_stats(&ca, &cb, &valid, w, h);
        for i in 0..w * h {
            if mask[i] {
                data[i * c + ch] = ssim_value(st.mu_a[i], st.mu_b[i], st.var_a[i], st.var_b[i], st.cov[i]);
            }
        }
    }
    Ok(ImagePlane {
        width: w,
        height: h,
        channels: c,
        data,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{params_to_pixel_warp, WarpModel};
    use approx::assert_relative_eq;

    fn textured(w: usize, h: usize) -> ImagePlane {
        ImagePlane::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (x * 0.31).sin() * (y * 0.17).cos() + 0.15 * ((x + 2.0 * y) * 0.07).sin()
        })
    }

    #[test]
    fn identity_warp_is_exact() {
        let src = textured(40, 30);
        let out = sample_bilinear(&src, &PixelWarp::identity(40, 30));
        assert_eq!(out.data(), src.data());
        assert!(out.mask().iter().all(|&m| m));
    }

    #[test]
    fn integer_translation_shifts_without_interpolation() {
        let src = textured(128, 128);
        let h = WarpParams::pseudo_similarity(0.0, 2.0 / 64.0, 0.0);
        let out = sample_bilinear(&src, &params_to_pixel_warp(&h, 128, 128).unwrap());
        for y in 0..128 {
            for x in 0..128 {
                if x < 2 {
                    assert!(!out.is_valid(x, y));
                } else {
                    assert!(out.is_valid(x, y));
                    assert!((out.get(x, y, 0) - src.get(x - 2, y, 0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_image_stays_constant_under_warp() {
        let src = ImagePlane::constant(64, 64, 1, 0.37);
        let h = WarpParams::pseudo_similarity(0.13, -0.07, 0.21);
        let out = warp_image(&src, &h).unwrap();
        for (v, m) in out.data().iter().zip(out.mask()) {
            if *m {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_of_constant_is_zero() {
        let src = ImagePlane::constant(32, 32, 1, 0.8);
        let jac = warp_jacobian(&src, &WarpParams::pseudo_similarity(0.05, 0.1, 0.0)).unwrap();
        assert!(jac.rows.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_translation_jacobian() {
        let w = 64;
        let src = ImagePlane::from_fn(w, w, |x, _| x as f64 / w as f64);
        let jac = warp_jacobian(&src, &WarpParams::identity(WarpModel::Translation)).unwrap();
        for y in 1..w - 1 {
            for x in 1..w - 1 {
                let row = jac.row(y * w + x, 0);
                assert_relative_eq!(row[0], 0.5, epsilon = 1e-12);
                assert_relative_eq!(row[1], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn preprocess_constants() {
        let rgb = ImagePlane::constant(20, 20, 3, 0.3);
        let g = preprocess(&rgb, Preprocess::Gray);
        assert_eq!(g.channels(), 1);
        assert!(g.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let hp = preprocess(&g, Preprocess::HighPass);
        assert!(hp.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let cr = preprocess(&g, Preprocess::Corner);
        assert!(cr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_response_peaks_at_corner() {
        let img = ImagePlane::from_fn(40, 40, |x, y| if x >= 20 && y >= 20 { 1.0 } else { 0.0 });
        let cr = preprocess(&img, Preprocess::Corner);
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for y in 0..40 {
            for x in 0..40 {
                if cr.get(x, y, 0) > best {
                    best = cr.get(x, y, 0);
                    at = (x, y);
                }
            }
        }
        assert!((at.0 as i64 - 20).abs() <= 2 && (at.1 as i64 - 20).abs() <= 2, "{at:?}");
    }

    #[test]
    fn augment_examples() {
        let src = textured(16, 16);
        let same = augment(&src, &AugmentParams::default()).unwrap();
        assert_eq!(same.data(), src.data());

        let half = ImagePlane::constant(8, 8, 1, 0.5);
        let p = AugmentParams {
            brightness: 0.1,
            ..Default::default()
        };
        let out = augment(&half, &p).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-12));

        let rgb = ImagePlane::new(4, 4, 3, (0..48).map(|i| (i as f64) / 60.0).collect()).unwrap();
        let p = AugmentParams {
            brightness: -0.05,
            contrast: 1.1,
            hue: 0.07,
            saturation: 0.9,
            noise_sigma: 0.03,
            seed: 99,
        };
        let a = augment(&rgb, &p).unwrap();
        let b = augment(&rgb, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augment_rejects_out_of_range() {
        let src = ImagePlane::constant(4, 4, 1, 0.5);
        let p = AugmentParams {
            contrast: 2.0,
            ..Default::default()
        };
        assert!(augment(&src, &p).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = textured(32, 32);
        let s = ssim_map(&a, &a).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let a = ImagePlane::constant(24, 24, 1, 0.2);
        let b = ImagePlane::constant(24, 24, 1, 0.8);
        let expected = (2.0 * 0.16 + 1e-4) / (0.68 + 1e-4);
        let s = ssim_map(&a, &b).unwrap();
        assert!(s.data().iter().all(|v| (v - expected).abs() < 1e-9));
        assert_relative_eq!(expected, 0.4707, epsilon = 1e-4);

        let b = ImagePlane::from_fn(32, 32, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let a = textured(32, 32);
        assert_eq!(ssim_map(&a, &b).unwrap(), ssim_map(&b, &a).unwrap());
        assert!(ssim_map(&a, &b)
            .unwrap()
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn ssim_shape_mismatch() {
        let a = ImagePlane::constant(8, 8, 1, 0.1);
        let b = ImagePlane::constant(9, 8, 1, 0.1);
        assert!(matches!(ssim_map(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn png_round_trip_quantizes_to_255ths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImagePlane::from_fn(5, 3, |x, y| (x * 3 + y) as f64 / 255.0);
        img.save_png(&path).unwrap();
        let back = ImagePlane::load(&path).unwrap();
        assert_eq!(back.channels(), 1);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
