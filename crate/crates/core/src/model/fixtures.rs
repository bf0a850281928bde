//! Analytic and synthetic fixture models.
//!
//! The analytic models implement classical separable interpolation as a
//! single conv (one kernel per sub-pixel phase) followed by pixel-shuffle,
//! so they upscale meaningfully without any training. The synthetic
//! generator emits seeded residual-block graphs for exercising the
//! optimizer and analysis passes on deeper models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticKind {
    Bilinear,
    Bicubic,
}

impl AnalyticKind {
    pub fn name(&self) -> &'static str {
        match self {
            AnalyticKind::Bilinear => "bilinear",
            AnalyticKind::Bicubic => "bicubic",
        }
    }

    fn kernel_size(&self) -> usize {
        match self {
            AnalyticKind::Bilinear => 3,
            AnalyticKind::Bicubic => 5,
        }
    }

    /// Interpolation kernel value at (signed) distance `d`.
    pub fn kernel(&self, d: f64) -> f64 {
        let x = d.abs();
        match self {
            AnalyticKind::Bilinear => {
                if x < 1.0 {
                    1.0 - x
                } else {
                    0.0
                }
            }
            // Catmull-Rom (a = -0.5), the classical bicubic convention.
            AnalyticKind::Bicubic => {
                if x <= 1.0 {
                    (1.5 * x - 2.5) * x * x + 1.0
                } else if x < 2.0 {
                    ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Sub-pixel offset of HR phase `i` relative to the LR grid.
pub fn phase_offset(i: usize, s: usize) -> f64 {
    (i as f64 + 0.5) / s as f64 - 0.5
}

struct Builder {
    layers: Vec<LayerSpec>,
    blob: Vec<f32>,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            layers: Vec::new(),
            blob: Vec::new(),
        }
    }

    fn conv(&mut self, c_in: usize, c_out: usize, kernel: usize, weights: &[f32], bias: &[f32]) {
        assert_eq!(weights.len(), c_out * c_in * kernel * kernel);
        assert_eq!(bias.len(), c_out);
        let weight_offset = self.blob.len();
        self.blob.extend_from_slice(weights);
        let bias_offset = self.blob.len();
        self.blob.extend_from_slice(bias);
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::Conv {
                c_in,
                c_out,
                kernel,
                stride: 1,
                padding: (kernel - 1) / 2,
                weight_offset,
                bias_offset,
                quantizable: true,
            },
        });
    }

    fn relu(&mut self) {
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::Relu,
        });
    }

    fn residual_add(&mut self, source: usize) {
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::ResidualAdd { source },
        });
    }

    fn pixel_shuffle(&mut self, scale: usize) {
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::PixelShuffle { scale },
        });
    }

    fn finish(self, name: String, upscale: usize) -> Result<ModelGraph> {
        ModelGraph::new(name, upscale, self.layers, self.blob)
    }
}

/// Single-channel interpolation model: one conv producing the `s^2`
/// sub-pixel phases, then pixel-shuffle. Forward equals classical
/// separable interpolation with zero-extended borders.
pub fn make_analytic_model(kind: AnalyticKind, scale: usize) -> Result<ModelGraph> {
    if !(2..=4).contains(&scale) {
        return Err(Error::InvalidArg(format!(
            "analytic models support scales 2..4, got {scale}"
        )));
    }
    let k = kind.kernel_size();
    let pad = (k - 1) / 2;
    let s = scale;
    let mut weights = vec![0f32; s * s * k * k];
    for i in 0..s {
        let fy = phase_offset(i, s);
        for j in 0..s {
            let fx = phase_offset(j, s);
            let ch = i * s + j;
            for ky in 0..k {
                let wy = kind.kernel(ky as f64 - pad as f64 - fy);
                for kx in 0..k {
                    let wx = kind.kernel(kx as f64 - pad as f64 - fx);
                    weights[(ch * k + ky) * k + kx] = (wy * wx) as f32;
                }
            }
        }
    }
    let mut b = Builder::new();
    b.conv(1, s * s, k, &weights, &vec![0f32; s * s]);
    b.pixel_shuffle(s);
    b.finish(format!("{}_x{scale}", kind.name()), s)
}

/// Number of quantizable conv layers [`make_synthetic_model`] emits for a
/// given depth (one conv per unit of depth).
pub fn synthetic_layer_count(depth: usize) -> usize {
    depth
}

/// Seeded residual-block SR graph with exactly `depth` conv layers.
///
/// Layout: head conv + relu, residual pairs of body convs, an optional
/// single body conv, then a tail conv decoding to `scale^2` phase
/// channels and a pixel-shuffle. The same seed reproduces bit-identical
/// weights.
pub fn make_synthetic_model(
    depth: usize,
    channels: usize,
    scale: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if depth == 0 || channels == 0 {
        return Err(Error::InvalidArg(
            "synthetic model needs depth >= 1 and channels >= 1".into(),
        ));
    }
    if scale == 0 || scale > 6 {
        return Err(Error::InvalidArg(format!(
            "synthetic model scale must be 1..6, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 3usize;
    let mut gen_conv = |c_in: usize, c_out: usize, amp_scale: f64, bias_center: f64| {
        let fan_in = (c_in * k * k) as f64;
        let amp = amp_scale * (3.0 / fan_in).sqrt();
        let w: Vec<f32> = (0..c_out * c_in * k * k)
            .map(|_| rng.gen_range(-amp..amp) as f32)
            .collect();
        let b: Vec<f32> = (0..c_out)
            .map(|_| (bias_center + rng.gen_range(-0.05..0.05)) as f32)
            .collect();
        (w, b)
    };

    let s2 = scale * scale;
    let c = channels;
    let mut b = Builder::new();
    if depth == 1 {
        let (w, bias) = gen_conv(1, s2, 0.35, 0.5);
        b.conv(1, s2, k, &w, &bias);
    } else {
        let (w, bias) = gen_conv(1, c, 0.8, 0.0);
        b.conv(1, c, k, &w, &bias);
        b.relu();
        let mut remaining = depth - 2;
        while remaining >= 2 {
            let block_src = b.layers.len() - 1;
            let (w1, b1) = gen_conv(c, c, 0.8, 0.0);
            b.conv(c, c, k, &w1, &b1);
            b.relu();
            let (w2, b2) = gen_conv(c, c, 0.5, 0.0);
            b.conv(c, c, k, &w2, &b2);
            b.residual_add(block_src);
            remaining -= 2;
        }
        if remaining == 1 {
            let (w, bias) = gen_conv(c, c, 0.8, 0.0);
            b.conv(c, c, k, &w, &bias);
            b.relu();
        }
        let (w, bias) = gen_conv(c, s2, 0.35, 0.5);
        b.conv(c, s2, k, &w, &bias);
    }
    b.pixel_shuffle(scale);
    b.finish(
        format!("synthetic_d{depth}_c{channels}_x{scale}_s{seed}"),
        scale,
    )
}

/// Residual detail-enhancement fixture.
///
/// The head makes near-identical copies of the input, so quantization
/// error on the first conv's (full-range) input propagates as correlated
/// copies that the interpolating tail cannot average away, while the
/// tail's own input error is white across channels and gets suppressed.
/// A low-gain residual branch adds detail; its layers see attenuated,
/// narrow ranges. The first conv therefore dominates the model's
/// quantization sensitivity.
pub fn make_residual_detail_model(
    channels: usize,
    scale: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if channels == 0 || scale == 0 || scale > 6 {
        return Err(Error::InvalidArg(
            "residual detail model needs channels >= 1 and scale 1..6".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = AnalyticKind::Bicubic;
    let k = 5usize;
    let pad = 2usize;
    let c = channels;
    let s2 = scale * scale;

    // Head: C near-copies of the input.
    let mut head = vec![0f32; c * 9];
    for ch in 0..c {
        for t in 0..9 {
            let base = if t == 4 { 1.0 } else { 0.0 };
            head[ch * 9 + t] = (base + rng.gen_range(-0.0002..0.0002)) as f32;
        }
    }
    let head_bias = vec![0f32; c];

    // Branch convs: white gain around 0.1.
    let amp = 0.06 / (c as f64).sqrt();
    let mut branch = |co: usize| -> (Vec<f32>, Vec<f32>) {
        let w: Vec<f32> = (0..co * c * 9)
            .map(|_| rng.gen_range(-amp..amp) as f32)
            .collect();
        (w, vec![0f32; co])
    };
    let (w1, b1) = branch(c);
    let (w2, b2) = branch(c);

    // Tail: interpolation phase kernels averaged across channels.
    let mut tail = vec![0f32; s2 * c * k * k];
    for i in 0..scale {
        let fy = phase_offset(i, scale);
        for j in 0..scale {
            let fx = phase_offset(j, scale);
            let ph = i * scale + j;
            for ci in 0..c {
                for ky in 0..k {
                    let wy = kind.kernel(ky as f64 - pad as f64 - fy);
                    for kx in 0..k {
                        let wx = kind.kernel(kx as f64 - pad as f64 - fx);
                        tail[((ph * c + ci) * k + ky) * k + kx] =
                            (wy * wx / c as f64 + rng.gen_range(-0.00005..0.00005)) as f32;
                    }
                }
            }
        }
    }
    let tail_bias = vec![0f32; s2];

    let mut b = Builder::new();
    b.conv(1, c, 3, &head, &head_bias); // 0
    b.conv(c, c, 3, &w1, &b1); // 1
    b.conv(c, c, 3, &w2, &b2); // 2
    b.residual_add(0); // 3
    b.conv(c, s2, k, &tail, &tail_bias); // 4
    b.pixel_shuffle(scale); // 5
    b.finish(format!("residual_detail_c{c}_x{scale}_s{seed}"), scale)
}

/// Near-identity chain fixture with exactly `depth` conv layers.
///
/// Head and body convs pass the signal through with tiny mixing noise and
/// the tail decodes it with bicubic interpolation kernels, so the model
/// upscales well and activation-quantization noise dominates its error
/// budget: demoting any single layer to 8 bits produces a visible drop.
pub fn make_chain_model(
    depth: usize,
    channels: usize,
    scale: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if depth == 0 || channels == 0 || scale == 0 || scale > 6 {
        return Err(Error::InvalidArg(
            "chain model needs depth >= 1, channels >= 1, scale 1..6".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = AnalyticKind::Bicubic;
    let k = 5usize;
    let pad = 2usize;
    let c = channels;
    let s2 = scale * scale;
    // Interpolation tail: phase kernels averaged across input channels.
    let tail_for = |c_in: usize, noise: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let mut w = vec![0f32; s2 * c_in * k * k];
        for i in 0..scale {
            let fy = phase_offset(i, scale);
            for j in 0..scale {
                let fx = phase_offset(j, scale);
                let ph = i * scale + j;
                for ci in 0..c_in {
                    for ky in 0..k {
                        let wy = kind.kernel(ky as f64 - pad as f64 - fy);
                        for kx in 0..k {
                            let wx = kind.kernel(kx as f64 - pad as f64 - fx);
                            w[((ph * c_in + ci) * k + ky) * k + kx] =
                                (wy * wx / c_in as f64 + rng.gen_range(-noise..noise)) as f32;
                        }
                    }
                }
            }
        }
        w
    };
    let mut b = Builder::new();
    if depth == 1 {
        let tail = tail_for(1, 0.00005, &mut rng);
        b.conv(1, s2, k, &tail, &vec![0f32; s2]);
    } else {
        // Head: C near-copies of the input.
        let mut head = vec![0f32; c * 9];
        for ch in 0..c {
            for t in 0..9 {
                let base = if t == 4 { 1.0 } else { 0.0 };
                head[ch * 9 + t] = (base + rng.gen_range(-0.0002..0.0002)) as f32;
            }
        }
        b.conv(1, c, 3, &head, &vec![0f32; c]);
        for _ in 0..depth - 2 {
            let mut w = vec![0f32; c * c * 9];
            for co in 0..c {
                for ci in 0..c {
                    for t in 0..9 {
                        let base = if co == ci && t == 4 { 1.0 } else { 0.0 };
                        w[(co * c + ci) * 9 + t] =
                            (base + rng.gen_range(-0.0002..0.0002)) as f32;
                    }
                }
            }
            b.conv(c, c, 3, &w, &vec![0f32; c]);
        }
        let tail = tail_for(c, 0.00005, &mut rng);
        b.conv(c, s2, k, &tail, &vec![0f32; s2]);
    }
    b.pixel_shuffle(scale);
    b.finish(format!("chain_d{depth}_c{c}_x{scale}_s{seed}"), scale)
}

/// Conv with every kernel weight equal to `value`, then pixel-shuffle.
pub fn constant_weight_model(value: f64, scale: usize) -> ModelGraph {
    let s2 = scale * scale;
    let mut b = Builder::new();
    let w = vec![value as f32; s2 * 9];
    b.conv(1, s2, 3, &w, &vec![0f32; s2]);
    b.pixel_shuffle(scale);
    b.finish(format!("constant_x{scale}"), scale).unwrap()
}

/// Single 3x3 conv (no upsampling) with the given kernel taps.
pub fn single_conv_model(taps: &[f64]) -> ModelGraph {
    assert_eq!(taps.len(), 9);
    let mut b = Builder::new();
    let w: Vec<f32> = taps.iter().map(|&v| v as f32).collect();
    b.conv(1, 1, 3, &w, &[0f32]);
    b.finish("single_conv".into(), 1).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{calibrate, CalibrationInput, QuantPlan};
    use crate::tensor::testutil::random_tensor;
    use crate::tensor::Tensor;

    /// Direct separable interpolation with zero-extended borders,
    /// formulated over continuous source coordinates.
    fn interp_oracle(kind: AnalyticKind, input: &Tensor, s: usize) -> Tensor {
        let (n, c, h, w) = input.shape();
        assert_eq!((n, c), (1, 1));
        let reach = match kind {
            AnalyticKind::Bilinear => 1i64,
            AnalyticKind::Bicubic => 2i64,
        };
        let mut out = Tensor::zeros(1, 1, h * s, w * s);
        for yy in 0..h * s {
            let uy = (yy as f64 + 0.5) / s as f64 - 0.5;
            for xx in 0..w * s {
                let ux = (xx as f64 + 0.5) / s as f64 - 0.5;
                let mut acc = 0.0;
                let my0 = uy.floor() as i64 - reach + 1;
                let mx0 = ux.floor() as i64 - reach + 1;
                for m in my0..my0 + 2 * reach {
                    for nn in mx0..mx0 + 2 * reach {
                        if m < 0 || nn < 0 || m as usize >= h || nn as usize >= w {
                            continue;
                        }
                        acc += kind.kernel(m as f64 - uy)
                            * kind.kernel(nn as f64 - ux)
                            * input.get(0, 0, m as usize, nn as usize);
                    }
                }
                out.set(0, 0, yy, xx, acc);
            }
        }
        out
    }

    #[test]
    fn bilinear_preserves_constants_in_interior() {
        let m = make_analytic_model(AnalyticKind::Bilinear, 2).unwrap();
        let x = Tensor::from_vec(1, 1, 6, 6, vec![0.37; 36]).unwrap();
        let y = m.forward(&x).unwrap();
        for yy in 2..10 {
            for xx in 2..10 {
                assert!((y.get(0, 0, yy, xx) - 0.37).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bilinear_reproduces_linear_ramps_in_interior() {
        let m = make_analytic_model(AnalyticKind::Bilinear, 2).unwrap();
        let mut x = Tensor::zeros(1, 1, 8, 8);
        for yy in 0..8 {
            for xx in 0..8 {
                x.set(0, 0, yy, xx, 0.1 * xx as f64 + 0.05 * yy as f64);
            }
        }
        let y = m.forward(&x).unwrap();
        // The ramp on the HR grid: LR coordinate u = (X + 0.5)/2 - 0.5.
        for yy in 3..13 {
            for xx in 3..13 {
                let uy = (yy as f64 + 0.5) / 2.0 - 0.5;
                let ux = (xx as f64 + 0.5) / 2.0 - 0.5;
                let want = 0.1 * ux + 0.05 * uy;
                assert!((y.get(0, 0, yy, xx) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn analytic_models_match_direct_interpolation_oracle() {
        for (kind, s) in [
            (AnalyticKind::Bilinear, 2),
            (AnalyticKind::Bilinear, 3),
            (AnalyticKind::Bicubic, 2),
            (AnalyticKind::Bicubic, 4),
        ] {
            let m = make_analytic_model(kind, s).unwrap();
            let mut x = random_tensor(1, 1, 7, 9, 77);
            for v in x.data_mut() {
                *v = (*v + 1.0) / 2.0;
            }
            let got = m.forward(&x).unwrap();
            let want = interp_oracle(kind, &x, s);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-6, "{}_x{s}: {a} vs {b}", kind.name());
            }
        }
    }

    #[test]
    fn synthetic_model_is_seed_deterministic() {
        let a = make_synthetic_model(4, 4, 2, 7).unwrap();
        let b = make_synthetic_model(4, 4, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_model(4, 4, 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_layer_count_formula_holds() {
        for depth in [1, 2, 3, 4, 5, 8, 11] {
            let m = make_synthetic_model(depth, 4, 2, 3).unwrap();
            assert_eq!(m.quantizable_layers().len(), synthetic_layer_count(depth));
        }
    }

    #[test]
    fn synthetic_scale_contract() {
        let m = make_synthetic_model(4, 4, 3, 9).unwrap();
        let x = random_tensor(1, 1, 5, 7, 1);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), (1, 1, 15, 21));
    }

    #[test]
    fn higher_wordlength_is_closer_to_fp() {
        // MSE vs the FP output orders 16-bit below 8-bit; PSNR order
        // follows directly.
        for m in [
            make_analytic_model(AnalyticKind::Bilinear, 2).unwrap(),
            make_analytic_model(AnalyticKind::Bicubic, 2).unwrap(),
        ] {
            let mut x = random_tensor(1, 1, 10, 10, 5);
            for v in x.data_mut() {
                *v = (*v + 1.0) / 2.0;
            }
            let inputs = vec![CalibrationInput {
                name: "x".into(),
                tensor: x.clone(),
            }];
            let stats = calibrate(&m, &inputs, 1.0, 0).unwrap();
            let fp = m.forward(&x).unwrap();
            let mse = |bits: u8| {
                let plan = QuantPlan::uniform(&m, &stats, bits).unwrap();
                let out = m.forward_quant(&x, &plan).unwrap();
                out.data()
                    .iter()
                    .zip(fp.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / out.len() as f64
            };
            assert!(mse(16) <= mse(8), "model {}", m.name);
        }
    }
}
