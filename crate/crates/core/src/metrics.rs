//! Image quality metrics (PSNR, SSIM), image file I/O and resampling.
//!
//! Metrics are computed on the delivered 8-bit surface. The default SR
//! evaluation convention is the luma channel (ITU-R BT.601 full-range
//! weights 0.299/0.587/0.114) with a border shave equal to the upscale
//! factor; both knobs are explicit parameters.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<ImageBuf> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArg(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "ImageBuf",
                format!("{} samples", width * height * channels),
                data.len().to_string(),
            ));
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luma plane via BT.601 full-range weights; gray images return their
    /// single plane unchanged.
    pub fn luma(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.channels == 1 {
                    f64::from(self.get(y, x, 0))
                } else {
                    0.299 * f64::from(self.get(y, x, 0))
                        + 0.587 * f64::from(self.get(y, x, 1))
                        + 0.114 * f64::from(self.get(y, x, 2))
                };
                out.push(v);
            }
        }
        out
    }

    /// One plane per channel as f64.
    pub fn channel_planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels)
            .map(|c| {
                let mut p = Vec::with_capacity(self.width * self.height);
                for y in 0..self.height {
                    for x in 0..self.width {
                        p.push(f64::from(self.get(y, x, c)));
                    }
                }
                p
            })
            .collect()
    }

    /// Crops `shave` pixels from every border.
    pub fn shaved(&self, shave: usize) -> Result<ImageBuf> {
        if shave == 0 {
            return Ok(self.clone());
        }
        if 2 * shave >= self.width.min(self.height) {
            return Err(Error::InvalidArg(format!(
                "shave {shave} too large for {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * shave, self.height - 2 * shave);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    data.push(self.get(y + shave, x + shave, c));
                }
            }
        }
        ImageBuf::new(w, h, self.channels, data)
    }
}

/// Channel convention for metric computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    YChannel,
    Rgb,
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Convention::YChannel => write!(f, "y"),
            Convention::Rgb => write!(f, "rgb"),
        }
    }
}

impl FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Convention> {
        match s {
            "y" | "y_channel" => Ok(Convention::YChannel),
            "rgb" => Ok(Convention::Rgb),
            other => Err(Error::InvalidArg(format!(
                "unknown metric convention '{other}' (expected y or rgb)"
            ))),
        }
    }
}

fn metric_planes(img: &ImageBuf, convention: Convention) -> Vec<Vec<f64>> {
    match convention {
        Convention::YChannel => vec![img.luma()],
        Convention::Rgb => img.channel_planes(),
    }
}

fn check_dims(a: &ImageBuf, b: &ImageBuf, context: &str) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::shape(
            context,
            format!("{}x{}x{}", a.width, a.height, a.channels),
            format!("{}x{}x{}", b.width, b.height, b.channels),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over 8-bit samples. Identical images
/// report `f64::INFINITY`.
pub fn psnr(a: &ImageBuf, b: &ImageBuf, convention: Convention, shave: usize) -> Result<f64> {
    check_dims(a, b, "psnr")?;
    let a = a.shaved(shave)?;
    let b = b.shaved(shave)?;
    let pa = metric_planes(&a, convention);
    let pb = metric_planes(&b, convention);
    let mut acc = 0.0;
    let mut count = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            let d = u - v;
            acc += d * d;
            count += 1;
        }
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let win = gaussian_window();
    let l = 255.0;
    let c1 = (SSIM_K1 * l) * (SSIM_K1 * l);
    let c2 = (SSIM_K2 * l) * (SSIM_K2 * l);
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=height - SSIM_WINDOW {
        for wx in 0..=width - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for y in 0..SSIM_WINDOW {
                for x in 0..SSIM_WINDOW {
                    let w = win[y * SSIM_WINDOW + x];
                    mu_a += w * a[(wy + y) * width + wx + x];
                    mu_b += w * b[(wy + y) * width + wx + x];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for y in 0..SSIM_WINDOW {
                for x in 0..SSIM_WINDOW {
                    let w = win[y * SSIM_WINDOW + x];
                    let da = a[(wy + y) * width + wx + x] - mu_a;
                    let db = b[(wy + y) * width + wx + x] - mu_b;
                    var_a += w * da * da;
                    var_b += w * db * db;
                    cov += w * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 255, averaged over valid windows.
pub fn ssim(a: &ImageBuf, b: &ImageBuf, convention: Convention, shave: usize) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let a = a.shaved(shave)?;
    let b = b.shaved(shave)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after shave, got {}x{}",
            a.width, a.height
        )));
    }
    let pa = metric_planes(&a, convention);
    let pb = metric_planes(&b, convention);
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        total += ssim_plane(x, y, a.width, a.height);
    }
    Ok(total / pa.len() as f64)
}

/// Clamp to [0, 1], scale by 255, round half away from zero.
pub fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------
// File I/O: 8-bit PNG plus binary PGM (P5) and PPM (P6).
// ---------------------------------------------------------------------

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn load_pnm(path: &Path, bytes: &[u8]) -> Result<ImageBuf> {
    let magic = bytes.get(0..2).ok_or_else(|| image_err(path, "truncated header"))?;
    let channels = match magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(image_err(path, "not a binary PGM/PPM file")),
    };
    // Header: three whitespace-separated tokens (width, height, maxval)
    // with '#' comments, then a single whitespace byte before the raster.
    let mut pos = 2usize;
    let mut tokens: Vec<usize> = Vec::new();
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| image_err(path, "malformed header token"))?;
        tokens.push(tok);
    }
    if pos >= bytes.len() {
        return Err(image_err(path, "truncated file"));
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval == 0 || maxval > 255 {
        return Err(image_err(path, format!("unsupported bit depth (maxval {maxval})")));
    }
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| image_err(path, "truncated file"))?;
    ImageBuf::new(w, h, channels, raster.to_vec())
}

fn save_pnm(path: &Path, img: &ImageBuf) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads an 8-bit PNG, PGM or PPM file by extension.
pub fn load_image(path: &Path) -> Result<ImageBuf> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" | "ppm" => load_pnm(path, &bytes),
        "png" => {
            let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
                .map_err(|e| image_err(path, e.to_string()))?;
            match decoded {
                DynamicImage::ImageLuma8(img) => {
                    ImageBuf::new(img.width() as usize, img.height() as usize, 1, img.into_raw())
                }
                DynamicImage::ImageRgb8(img) => {
                    ImageBuf::new(img.width() as usize, img.height() as usize, 3, img.into_raw())
                }
                other => Err(image_err(
                    path,
                    format!(
                        "unsupported bit depth or layout ({:?}); only 8-bit gray/RGB is supported",
                        other.color()
                    ),
                )),
            }
        }
        other => Err(image_err(path, format!("unsupported image extension '{other}'"))),
    }
}

/// Saves to PNG, PGM or PPM by extension. PGM requires 1 channel, PPM 3.
pub fn save_image(path: &Path, img: &ImageBuf) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" if img.channels == 1 => save_pnm(path, img),
        "ppm" if img.channels == 3 => save_pnm(path, img),
        "pgm" | "ppm" => Err(image_err(
            path,
            format!("{} channels do not fit {ext}", img.channels),
        )),
        "png" => {
            let dynimg = match img.channels {
                1 => DynamicImage::ImageLuma8(
                    image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
                        .expect("sized buffer"),
                ),
                _ => DynamicImage::ImageRgb8(
                    image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
                        .expect("sized buffer"),
                ),
            };
            dynimg
                .save_with_format(path, ImageFormat::Png)
                .map_err(|e| image_err(path, e.to_string()))
        }
        other => Err(image_err(path, format!("unsupported image extension '{other}'"))),
    }
}

// ---------------------------------------------------------------------
// Resampling (the documented degradation for HR-only datasets).
// ---------------------------------------------------------------------

fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

fn resample_axis(src: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    // Kernel support scales with the reduction ratio (antialiasing);
    // borders replicate. Weights are normalized per output sample.
    let ratio = n_in as f64 / n_out as f64;
    let fscale = ratio.max(1.0);
    let reach = (2.0 * fscale).ceil() as i64;
    let mut out = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let u = (o as f64 + 0.5) * ratio - 0.5;
        let m0 = u.floor() as i64 - reach + 1;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for m in m0..=u.floor() as i64 + reach {
            let w = catmull_rom((m as f64 - u) / fscale);
            if w == 0.0 {
                continue;
            }
            let idx = m.clamp(0, n_in as i64 - 1) as usize;
            acc += w * src[idx];
            wsum += w;
        }
        out.push(acc / wsum);
    }
    out
}

/// Separable Catmull-Rom resize to the given size, with kernel-width
/// antialiasing for downscales and replicated borders.
pub fn resize_bicubic(img: &ImageBuf, out_w: usize, out_h: usize) -> Result<ImageBuf> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArg("resize target must be non-empty".into()));
    }
    let mut out_data = vec![0u8; out_w * out_h * img.channels];
    for c in 0..img.channels {
        // Horizontal pass.
        let mut rows: Vec<f64> = Vec::with_capacity(out_w * img.height);
        let mut line = vec![0.0f64; img.width];
        for y in 0..img.height {
            for x in 0..img.width {
                line[x] = f64::from(img.get(y, x, c));
            }
            rows.extend(resample_axis(&line, img.width, out_w));
        }
        // Vertical pass.
        let mut col = vec![0.0f64; img.height];
        for x in 0..out_w {
            for y in 0..img.height {
                col[y] = rows[y * out_w + x];
            }
            let resized = resample_axis(&col, img.height, out_h);
            for (y, v) in resized.iter().enumerate() {
                out_data[(y * out_w + x) * img.channels + c] =
                    (v / 255.0).clamp(0.0, 1.0).mul_add(255.0, 0.0).round() as u8;
            }
        }
    }
    ImageBuf::new(out_w, out_h, img.channels, out_data)
}

/// Downscale by an integer factor (the standard LR degradation).
pub fn degrade_bicubic(img: &ImageBuf, factor: usize) -> Result<ImageBuf> {
    if factor == 0 || img.width < factor || img.height < factor {
        return Err(Error::InvalidArg(format!(
            "cannot downscale {}x{} by {factor}",
            img.width, img.height
        )));
    }
    resize_bicubic(img, img.width / factor, img.height / factor)
}
