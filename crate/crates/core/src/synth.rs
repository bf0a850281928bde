//! Deterministic synthetic images for desk-scale evaluation.
//!
//! Images are sums of seeded low-frequency cosines plus a smooth gradient,
//! which gives the spatial correlation that separable interpolation and SR
//! metrics rely on. The same seed reproduces identical samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::ImageBuf;

/// Smooth pseudo-natural image with values spanning `[lo, hi]` (8-bit).
pub fn synthetic_image_ranged(
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
    lo: u8,
    hi: u8,
) -> ImageBuf {
    assert!(lo < hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Low-frequency structure plus weaker texture bands, so that
    // interpolation accuracy matters the way it does on natural images.
    let mut waves: Vec<(f64, f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(0.3..3.0),           // cycles across width
                rng.gen_range(0.3..3.0),           // cycles across height
                rng.gen_range(0.0..std::f64::consts::TAU), // phase
                rng.gen_range(0.3..1.0),           // amplitude
                rng.gen_range(-0.5..0.5),          // channel skew
            )
        })
        .collect();
    waves.extend((0..4).map(|_| {
        (
            rng.gen_range(3.0..10.0),
            rng.gen_range(3.0..10.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.04..0.18),
            rng.gen_range(-0.2..0.2),
        )
    }));
    let gx = rng.gen_range(-0.8..0.8);
    let gy = rng.gen_range(-0.8..0.8);

    let mut field = vec![0.0f64; width * height * channels];
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64;
            let v = y as f64 / height as f64;
            let base: f64 = waves
                .iter()
                .map(|(fx, fy, ph, amp, _)| {
                    amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos()
                })
                .sum::<f64>()
                + gx * u
                + gy * v;
            for c in 0..channels {
                let skew: f64 = waves.iter().map(|w| w.4).nth(c % waves.len()).unwrap_or(0.0);
                let val = base + 0.15 * skew * ((c as f64 + 1.0) * (u - v));
                field[(y * width + x) * channels + c] = val;
                min = min.min(val);
                max = max.max(val);
            }
        }
    }
    let span = (max - min).max(1e-12);
    let data = field
        .iter()
        .map(|&v| {
            let unit = (v - min) / span;
            (f64::from(lo) + unit * f64::from(hi - lo)).round() as u8
        })
        .collect();
    ImageBuf::new(width, height, channels, data).unwrap()
}

/// Full-range synthetic image.
pub fn synthetic_image(width: usize, height: usize, channels: usize, seed: u64) -> ImageBuf {
    synthetic_image_ranged(width, height, channels, seed, 0, 255)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_samples() {
        let a = synthetic_image(24, 16, 1, 9);
        let b = synthetic_image(24, 16, 1, 9);
        assert_eq!(a, b);
        let c = synthetic_image(24, 16, 1, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn ranged_image_respects_bounds_and_spans_them() {
        let img = synthetic_image_ranged(32, 32, 1, 4, 64, 192);
        let lo = *img.data.iter().min().unwrap();
        let hi = *img.data.iter().max().unwrap();
        assert_eq!((lo, hi), (64, 192));
    }
}
