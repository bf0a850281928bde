//! Dense 4-D tensors and the numeric layer kernels.
//!
//! Samples are `f64` everywhere; precision narrowing is never done by
//! storage, only explicitly by the quantization module. All kernels are
//! pure functions returning freshly allocated outputs.

use crate::error::{Error, Result};

/// Dense (n, c, h, w) tensor of `f64` samples in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Builds a tensor from a flat row-major sample vector.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} samples for shape ({n},{c},{h},{w})", n * c * h * w),
                data.len().to_string(),
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Min and max over all samples. Empty tensors report (0, 0).
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        if self.data.is_empty() {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `weights` has shape (c_out, c_in, k, k) with odd k; `bias` has one entry
/// per output channel. Output spatial size is
/// `floor((h + 2*padding - k) / stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c_in, h, w) = input.shape();
    let (c_out, wc_in, kh, kw) = weights.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArg(format!(
            "conv2d kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d input channels",
            format!("c_in={wc_in}"),
            format!("c_in={c_in}"),
        ));
    }
    if bias.len() != c_out {
        return Err(Error::shape(
            "conv2d bias",
            format!("{c_out} entries"),
            format!("{} entries", bias.len()),
        ));
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "conv2d spatial extent",
            format!("at least {k}x{k} after padding"),
            format!("{}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;

    // Padded copy per (n, c) plane so the hot loop needs no bounds logic.
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    let mut padded = vec![0.0f64; n * c_in * ph * pw];
    for b in 0..n {
        for c in 0..c_in {
            let plane = (b * c_in + c) * ph * pw;
            for y in 0..h {
                let src = input.idx(b, c, y, 0);
                let dst = plane + (y + padding) * pw + padding;
                padded[dst..dst + w].copy_from_slice(&input.data[src..src + w]);
            }
        }
    }

    let mut out = Tensor::zeros(n, c_out, h_out, w_out);
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        let plane = (b * c_in + ci) * ph * pw;
                        let wbase = ((co * c_in + ci) * k) * k;
                        for ky in 0..k {
                            let row = plane + (oy * stride + ky) * pw + ox * stride;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                acc += padded[row + kx] * weights.data[wrow + kx];
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise max(x, 0).
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Elementwise sum of two identically shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    Ok(out)
}

fn check_shuffle(input: &Tensor, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::InvalidArg("pixel_shuffle scale must be >= 1".into()));
    }
    let c = input.channels();
    if !c.is_multiple_of(s * s) {
        return Err(Error::shape(
            "pixel_shuffle channels",
            format!("multiple of s^2 = {}", s * s),
            c.to_string(),
        ));
    }
    Ok(c / (s * s))
}

/// Pixel-shuffle upsampling via the rank-6 intermediate:
/// reshape (n, c_out, s, s, h, w) -> permute (n, c_out, h, s, w, s)
/// -> reshape (n, c_out, s*h, s*w).
pub fn pixel_shuffle_naive(input: &Tensor, s: usize) -> Result<Tensor> {
    let c_out = check_shuffle(input, s)?;
    let (n, _, h, w) = input.shape();

    // Reshape to rank 6 is free on row-major data; the permute materializes.
    let dims6 = [n, c_out, s, s, h, w];
    let perm: [usize; 6] = [0, 1, 4, 2, 5, 3]; // -> (n, c_out, h, s, w, s)
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims6[p]).collect();
    let mut permuted = vec![0.0f64; input.len()];
    let mut strides6 = [0usize; 6];
    let mut acc = 1;
    for d in (0..6).rev() {
        strides6[d] = acc;
        acc *= dims6[d];
    }
    let mut out_idx = [0usize; 6];
    for (flat, slot) in permuted.iter_mut().enumerate() {
        let mut rem = flat;
        for d in 0..6 {
            let extent: usize = out_dims[d + 1..].iter().product();
            out_idx[d] = rem / extent;
            rem %= extent;
        }
        let mut src = 0;
        for d in 0..6 {
            src += out_idx[d] * strides6[perm[d]];
        }
        *slot = input.data[src];
    }

    // Final reshape back to rank 4 is again free.
    Tensor::from_vec(n, c_out, s * h, s * w, permuted)
}

/// Maximum tensor rank materialized by a memory-aware pixel-shuffle call.
#[derive(Debug, Clone, Copy)]
pub struct ShuffleTrace {
    pub max_rank: usize,
}

/// Pixel-shuffle that never materializes a buffer above rank 4.
///
/// Per batch item: reshape to (c_out, s*s*h*w), extract each output
/// channel as a rank-1 slice, reshape it to (s, s, h, w), permute to
/// (h, s, w, s), reshape to (s*h, s*w), and stack the channels. The
/// returned trace records the maximum rank materialized, which is 4.
pub fn pixel_shuffle_memaware_traced(input: &Tensor, s: usize) -> Result<(Tensor, ShuffleTrace)> {
    let c_out = check_shuffle(input, s)?;
    let (n, c_in, h, w) = input.shape();
    let mut max_rank = 0usize;
    let mut note = |rank: usize| {
        if rank > max_rank {
            max_rank = rank;
        }
    };

    let mut out = Tensor::zeros(n, c_out, s * h, s * w);
    let chan_len = s * s * h * w;
    for b in 0..n {
        // Step 1: view the item as a rank-2 (c_out, s*s*h*w) buffer.
        let item = &input.data[b * c_in * h * w..(b + 1) * c_in * h * w];
        note(2);
        for co in 0..c_out {
            // Step 2: extract one channel group as a rank-1 buffer.
            let chan: Vec<f64> = item[co * chan_len..(co + 1) * chan_len].to_vec();
            note(1);
            // Step 3: reinterpret as rank-4 (s, s, h, w); free on row-major data.
            note(4);
            // Step 4: permute to (h, s, w, s).
            let mut permuted = vec![0.0f64; chan_len];
            for y in 0..h {
                for i in 0..s {
                    for x in 0..w {
                        for j in 0..s {
                            let src = ((i * s + j) * h + y) * w + x;
                            let dst = ((y * s + i) * w + x) * s + j;
                            permuted[dst] = chan[src];
                        }
                    }
                }
            }
            note(4);
            // Step 5: reshape to rank-2 (s*h, s*w); free.
            note(2);
            // Step 6: stack into the output (the stack itself is rank 3 per
            // item, rank 4 with the batch dimension).
            let dst = out.idx(b, co, 0, 0);
            out.data[dst..dst + chan_len].copy_from_slice(&permuted);
            note(if n == 1 { 3 } else { 4 });
        }
    }
    note(4); // the rank-4 output itself
    Ok((out, ShuffleTrace { max_rank }))
}

/// Memory-aware pixel-shuffle without the instrumentation trace.
pub fn pixel_shuffle_memaware(input: &Tensor, s: usize) -> Result<Tensor> {
    pixel_shuffle_memaware_traced(input, s).map(|(t, _)| t)
}
