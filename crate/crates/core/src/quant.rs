//! Affine fake-quantization of weights and activations.
//!
//! A value `x` is mapped to the unsigned `b`-bit lattice as
//! `q = clamp(round(x*s - z), 0, 2^b - 1)` and reconstructed as
//! `(q + z) / s`, with `s = (2^b - 1) / (x_max - x_min)` and
//! `z = round(s * x_min)` derived from (estimated or actual) range
//! endpoints. Kernels always compute in `f64`; quantization effects enter
//! only through the explicit quantize→dequantize round trip at tensor
//! boundaries. Rounding is half-away-from-zero everywhere.

use std::collections::BTreeMap;

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Wordlength that means "pass-through, no activation quantization".
pub const PASSTHROUGH_BITS: u8 = 32;

/// Wordlength used for all weights.
pub const WEIGHT_BITS: u8 = 8;

/// Quantization parameters for one tensor.
///
/// `range_min`/`range_max` are the endpoints the parameters were derived
/// from; they are carried for clip accounting and audit and are redundant
/// with (s, z) up to the rounding of z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i64,
    /// When true the parameters are re-derived at run time from the actual
    /// input range; the stored scale/zero-point are calibration fallbacks.
    pub dynamic: bool,
    pub range_min: f64,
    pub range_max: f64,
}

/// Scale factor and zero point for a `bits`-wide lattice over
/// `[x_min, x_max]`.
///
/// A degenerate range (`x_max == x_min`) yields `s = 1`,
/// `z = round(x_min)`, which reconstructs constants to within rounding.
pub fn derive_params(bits: u8, x_min: f64, x_max: f64) -> (f64, i64) {
    debug_assert!(x_min <= x_max);
    if x_max == x_min {
        return (1.0, x_min.round() as i64);
    }
    let levels = (1u64 << bits) - 1;
    let scale = levels as f64 / (x_max - x_min);
    let zero_point = (scale * x_min).round() as i64;
    (scale, zero_point)
}

impl QuantParams {
    /// Static parameters over a calibration-estimated range.
    pub fn derive(bits: u8, x_min: f64, x_max: f64) -> QuantParams {
        let (scale, zero_point) = derive_params(bits, x_min, x_max);
        QuantParams {
            bits,
            scale,
            zero_point,
            dynamic: false,
            range_min: x_min,
            range_max: x_max,
        }
    }

    /// Runtime parameters from the actual range of `x` (dynamic range
    /// estimation). No element of `x` lies outside the derivation range.
    pub fn dynamic_for(x: &Tensor, bits: u8) -> QuantParams {
        let (lo, hi) = x.min_max();
        let (scale, zero_point) = derive_params(bits, lo, hi);
        QuantParams {
            bits,
            scale,
            zero_point,
            dynamic: true,
            range_min: lo,
            range_max: hi,
        }
    }

    /// 32-bit pass-through parameters.
    pub fn passthrough() -> QuantParams {
        QuantParams {
            bits: PASSTHROUGH_BITS,
            scale: 1.0,
            zero_point: 0,
            dynamic: false,
            range_min: f64::NEG_INFINITY,
            range_max: f64::INFINITY,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= PASSTHROUGH_BITS
    }

    /// Half quantization step, the worst-case reconstruction error for
    /// in-range values.
    pub fn half_step(&self) -> f64 {
        if self.is_passthrough() {
            0.0
        } else {
            0.5 / self.scale
        }
    }

    #[inline]
    fn q_max(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Scalar quantize→dequantize round trip.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.is_passthrough() {
            return x;
        }
        let q = (x * self.scale - self.zero_point as f64)
            .round()
            .clamp(0.0, self.q_max());
        (q + self.zero_point as f64) / self.scale
    }
}

/// Per-forward quantization event counters.
///
/// A "clip" is an input sample strictly outside the derivation range of
/// the parameters applied to it; dynamic parameters can therefore never
/// clip. `scan_elements` counts the samples scanned for min/max by
/// dynamic-range derivation (the runtime quantization unit's work proxy).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QuantTrace {
    pub dre_invocations: BTreeMap<usize, u64>,
    pub scan_elements: u64,
    pub clips: BTreeMap<usize, u64>,
}

impl QuantTrace {
    pub fn total_clips(&self) -> u64 {
        self.clips.values().sum()
    }

    pub fn total_dre_invocations(&self) -> u64 {
        self.dre_invocations.values().sum()
    }

    pub fn merge(&mut self, other: &QuantTrace) {
        for (&l, &n) in &other.dre_invocations {
            *self.dre_invocations.entry(l).or_insert(0) += n;
        }
        self.scan_elements += other.scan_elements;
        for (&l, &n) in &other.clips {
            *self.clips.entry(l).or_insert(0) += n;
        }
    }
}

/// Quantize→dequantize every sample of `x`.
pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Tensor {
    fake_quantize_counted(x, p).0
}

/// As [`fake_quantize`], also counting samples outside the derivation
/// range.
pub fn fake_quantize_counted(x: &Tensor, p: &QuantParams) -> (Tensor, u64) {
    if p.is_passthrough() {
        return (x.clone(), 0);
    }
    let mut out = x.clone();
    let mut clips = 0u64;
    for v in out.data_mut() {
        if *v < p.range_min || *v > p.range_max {
            clips += 1;
        }
        *v = p.apply(*v);
    }
    (out, clips)
}

/// Activation quantization entry for one quantizable layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerQuant {
    /// Index of the layer in the model's layer list.
    pub layer: usize,
    pub params: QuantParams,
}

/// Provenance block carried by every plan.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PlanProvenance {
    pub optimizer: Option<String>,
    pub seed: Option<u64>,
    pub calibration_hash: Option<String>,
    pub model_sha256: Option<String>,
    pub evaluations: Option<u64>,
    pub feasible: Option<bool>,
    pub drop_db: Option<f64>,
    pub dre_k: Option<f64>,
    pub dre_selected: Vec<usize>,
}

/// Per-layer quantization plan: the wordlength, scale, zero-point and
/// dynamic-range flag of every quantizable layer, plus the shared 8-bit
/// weight parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuantPlan {
    pub schema_version: u32,
    pub tool_version: String,
    pub model_name: String,
    /// Tolerance the plan was optimized under, when one applies.
    pub epsilon: Option<f64>,
    pub wordlength_set: Vec<u8>,
    pub layers: Vec<LayerQuant>,
    /// 8-bit weight parameters per quantizable layer, or `None` for
    /// full-precision weights. At most one copy exists per layer; it is
    /// shared across all activation wordlengths.
    pub weights: Option<Vec<LayerQuant>>,
    pub provenance: PlanProvenance,
}

impl QuantPlan {
    /// Plan that leaves the model untouched: all activations pass through
    /// and the weights stay in full precision.
    pub fn passthrough(m: &ModelGraph) -> QuantPlan {
        let layers = m
            .quantizable_layers()
            .iter()
            .map(|&l| LayerQuant {
                layer: l,
                params: QuantParams::passthrough(),
            })
            .collect();
        QuantPlan {
            schema_version: 1,
            tool_version: crate::TOOL_VERSION.to_string(),
            model_name: m.name.clone(),
            epsilon: None,
            wordlength_set: vec![],
            layers,
            weights: None,
            provenance: PlanProvenance::default(),
        }
    }

    /// Plan with uniform or per-layer wordlengths, static parameters taken
    /// from calibration statistics and 8-bit weights.
    pub fn from_wordlengths(
        m: &ModelGraph,
        stats: &CalibrationStats,
        bits: &[u8],
    ) -> Result<QuantPlan> {
        let q = m.quantizable_layers();
        if bits.len() != q.len() {
            return Err(Error::Invalid(format!(
                "wordlength vector covers {} layers, model has {} quantizable layers",
                bits.len(),
                q.len()
            )));
        }
        let mut layers = Vec::with_capacity(q.len());
        for (&layer, &b) in q.iter().zip(bits) {
            let params = if b >= PASSTHROUGH_BITS {
                QuantParams::passthrough()
            } else {
                let st = stats.layers.get(&layer).ok_or_else(|| {
                    Error::Invalid(format!("no calibration stats for layer {layer}"))
                })?;
                QuantParams::derive(b, st.min, st.max)
            };
            layers.push(LayerQuant { layer, params });
        }
        Ok(QuantPlan {
            schema_version: 1,
            tool_version: crate::TOOL_VERSION.to_string(),
            model_name: m.name.clone(),
            epsilon: None,
            wordlength_set: vec![8, 16],
            layers,
            weights: Some(quantize_weights(m)?),
            provenance: PlanProvenance {
                calibration_hash: Some(stats.dataset_hash.clone()),
                ..PlanProvenance::default()
            },
        })
    }

    /// Uniform plan helper (weights quantized).
    pub fn uniform(m: &ModelGraph, stats: &CalibrationStats, bits: u8) -> Result<QuantPlan> {
        let n = m.quantizable_layers().len();
        QuantPlan::from_wordlengths(m, stats, &vec![bits; n])
    }

    /// Weight-only quantization: activations pass through, weights 8-bit.
    pub fn weight_only(m: &ModelGraph) -> Result<QuantPlan> {
        let mut plan = QuantPlan::passthrough(m);
        plan.weights = Some(quantize_weights(m)?);
        Ok(plan)
    }

    /// Wordlength vector over quantizable layers, in layer order.
    pub fn wordlengths(&self) -> Vec<u8> {
        self.layers.iter().map(|l| l.params.bits).collect()
    }

    /// Dynamic-range flags over quantizable layers, in layer order.
    pub fn dre_flags(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.params.dynamic).collect()
    }

    pub fn entry_for(&self, layer: usize) -> Option<&LayerQuant> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Checks the plan covers exactly the model's quantizable layers.
    pub fn check_against(&self, m: &ModelGraph) -> Result<()> {
        let q = m.quantizable_layers();
        if self.layers.len() != q.len()
            || self.layers.iter().zip(&q).any(|(e, &l)| e.layer != l)
        {
            return Err(Error::Invalid(format!(
                "plan covers layers {:?}, model has quantizable layers {:?}",
                self.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
                q
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != q.len() {
                return Err(Error::Invalid(format!(
                    "plan has weight parameters for {} layers, model has {}",
                    w.len(),
                    q.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-tensor 8-bit weight parameters over each quantizable conv layer's
/// actual weight range. Biases stay in full precision.
pub fn quantize_weights(m: &ModelGraph) -> Result<Vec<LayerQuant>> {
    let mut out = Vec::new();
    for &l in &m.quantizable_layers() {
        let (weights, _bias) = m.conv_weights(l)?;
        let (lo, hi) = weights.min_max();
        out.push(LayerQuant {
            layer: l,
            params: QuantParams::derive(WEIGHT_BITS, lo, hi),
        });
    }
    Ok(out)
}

/// Runtime (dynamic-range) scale factor and zero point for `x`.
pub fn dre_params(x: &Tensor, bits: u8) -> (f64, i64) {
    let (lo, hi) = x.min_max();
    derive_params(bits, lo, hi)
}

/// Per-layer input range estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LayerRange {
    pub min: f64,
    pub max: f64,
    pub samples: u64,
}

impl LayerRange {
    fn merge(&mut self, other: &LayerRange) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.samples += other.samples;
    }
}

/// Calibration statistics: per-quantizable-layer input min/max gathered
/// over full-precision forwards of the calibration set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalibrationStats {
    pub schema_version: u32,
    pub tool_version: String,
    pub model_name: String,
    /// SHA-256 of the model's weight blob.
    #[serde(default)]
    pub model_sha256: String,
    /// Content hash of the selected calibration inputs.
    pub dataset_hash: String,
    /// Names of the selected inputs, in selection order.
    pub files: Vec<String>,
    pub sample_fraction: f64,
    pub seed: u64,
    pub layers: BTreeMap<usize, LayerRange>,
}

/// A named calibration input: the tensor fed to the model's first layer.
#[derive(Debug, Clone)]
pub struct CalibrationInput {
    pub name: String,
    pub tensor: Tensor,
}

fn hash_inputs(inputs: &[&CalibrationInput]) -> String {
    let mut hasher = Sha256::new();
    for item in inputs {
        hasher.update(item.name.as_bytes());
        hasher.update([0u8]);
        let (n, c, h, w) = item.tensor.shape();
        for d in [n, c, h, w] {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in item.tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_digest(hasher)
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Selects `max(1, round(fraction * n))` indices uniformly without
/// replacement.
pub fn select_calibration_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((fraction * n as f64).round() as usize).clamp(1, n);
    if count == n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Gathers per-layer input ranges over a sampled subset of `inputs`.
///
/// Sampling is uniform without replacement; at least one input is always
/// selected, and `fraction = 1` selects everything (making the result
/// seed-independent, since min/max reduction is order-independent).
pub fn calibrate(
    m: &ModelGraph,
    inputs: &[CalibrationInput],
    sample_fraction: f64,
    seed: u64,
) -> Result<CalibrationStats> {
    if inputs.is_empty() {
        return Err(Error::Invalid("calibration input set is empty".into()));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "sample_fraction must be in (0, 1], got {sample_fraction}"
        )));
    }
    let picked = select_calibration_indices(inputs.len(), sample_fraction, seed);
    let selected: Vec<&CalibrationInput> = picked.iter().map(|&i| &inputs[i]).collect();

    let quantizable: Vec<usize> = m.quantizable_layers();
    // Images are independent; the min/max reduction is order-independent,
    // so parallel processing yields identical statistics.
    let per_image: Vec<BTreeMap<usize, LayerRange>> = selected
        .par_iter()
        .map(|item| {
            let mut ranges: BTreeMap<usize, LayerRange> = BTreeMap::new();
            let mut probe = |layer: usize, t: &Tensor| {
                if !quantizable.contains(&layer) {
                    return;
                }
                let (lo, hi) = t.min_max();
                let entry = LayerRange {
                    min: lo,
                    max: hi,
                    samples: t.len() as u64,
                };
                ranges
                    .entry(layer)
                    .and_modify(|r| r.merge(&entry))
                    .or_insert(entry);
            };
            m.forward_probed(&item.tensor, &mut probe)?;
            Ok(ranges)
        })
        .collect::<Result<_>>()?;

    let mut layers: BTreeMap<usize, LayerRange> = BTreeMap::new();
    for ranges in &per_image {
        for (&l, r) in ranges {
            layers.entry(l).and_modify(|acc| acc.merge(r)).or_insert(*r);
        }
    }

    Ok(CalibrationStats {
        schema_version: 1,
        tool_version: crate::TOOL_VERSION.to_string(),
        model_name: m.name.clone(),
        model_sha256: m.weights_sha256()?,
        dataset_hash: hash_inputs(&selected),
        files: selected.iter().map(|i| i.name.clone()).collect(),
        sample_fraction,
        seed,
        layers,
    })
}
