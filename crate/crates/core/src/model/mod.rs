//! SR model representation, a bit-exact on-disk format and forward
//! execution.
//!
//! A model is an ordered list of layers (conv, relu, residual add,
//! pixel-shuffle) over a flat weight blob. On disk it is a JSON manifest
//! plus a little-endian `f32` raw blob whose SHA-256 is stored in the
//! manifest; `load(save(m)) == m` bit-exactly.

pub mod fixtures;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{
    fake_quantize, fake_quantize_counted, QuantParams, QuantPlan, QuantTrace,
};
use crate::tensor::{add, conv2d, pixel_shuffle_memaware, relu, Tensor};

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One layer of a model graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// Offset (in f32 elements) of the (c_out, c_in, k, k) kernel blob.
        weight_offset: usize,
        /// Offset (in f32 elements) of the c_out bias values.
        bias_offset: usize,
        /// Whether the layer participates in activation quantization.
        quantizable: bool,
    },
    Relu,
    ResidualAdd {
        /// Index of the earlier layer whose output is added.
        source: usize,
    },
    PixelShuffle {
        scale: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    pub fn is_quantizable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { quantizable: true, .. })
    }

    /// Output (c, h, w) for the given input shape.
    pub fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        match &self.kind {
            LayerKind::Conv {
                c_in,
                c_out,
                kernel,
                stride,
                padding,
                ..
            } => {
                if c != *c_in {
                    return Err(Error::shape(
                        format!("layer {} (conv)", self.index),
                        format!("{c_in} input channels"),
                        format!("{c} input channels"),
                    ));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(Error::shape(
                        format!("layer {} (conv)", self.index),
                        format!("spatial extent >= {kernel}"),
                        format!("{h}x{w} with padding {padding}"),
                    ));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                Ok((*c_out, ho, wo))
            }
            LayerKind::Relu => Ok((c, h, w)),
            LayerKind::ResidualAdd { .. } => Ok((c, h, w)),
            LayerKind::PixelShuffle { scale } => {
                if !c.is_multiple_of(scale * scale) {
                    return Err(Error::shape(
                        format!("layer {} (pixel_shuffle)", self.index),
                        format!("channels divisible by {}", scale * scale),
                        c.to_string(),
                    ));
                }
                Ok((c / (scale * scale), h * scale, w * scale))
            }
        }
    }

    /// Operation count at the given input shape: multiply-accumulates for
    /// conv, one op per element otherwise.
    pub fn op_count(&self, c: usize, h: usize, w: usize) -> Result<u64> {
        let (co, ho, wo) = self.out_shape(c, h, w)?;
        Ok(match &self.kind {
            LayerKind::Conv {
                c_in, kernel, ..
            } => (co * c_in * kernel * kernel) as u64 * (ho * wo) as u64,
            _ => (c * h * w) as u64,
        })
    }
}

/// Ordered layer graph plus the flat weight array.
///
/// Weights are held as `f64` but are always exactly representable in
/// `f32`; the on-disk blob is `f32` little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub upscale_factor: usize,
    pub layers: Vec<LayerSpec>,
    weights: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    name: String,
    upscale_factor: usize,
    weights_file: String,
    weights_sha256: String,
    layers: Vec<LayerSpec>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    crate::quant::hex_digest(hasher)
}

impl ModelGraph {
    /// Builds and validates a graph. `weights` is the storage-domain blob.
    pub fn new(
        name: impl Into<String>,
        upscale_factor: usize,
        layers: Vec<LayerSpec>,
        weights: Vec<f32>,
    ) -> Result<ModelGraph> {
        let g = ModelGraph {
            name: name.into(),
            upscale_factor,
            layers,
            weights: weights.into_iter().map(f64::from).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let mut shuffle_product = 1usize;
        let mut channels: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut cur = match self.layers.first().map(|l| &l.kind) {
            Some(LayerKind::Conv { c_in, .. }) => *c_in,
            _ => {
                return Err(Error::ModelFormat(
                    "model must start with a conv layer".into(),
                ))
            }
        };
        for (pos, layer) in self.layers.iter().enumerate() {
            if layer.index != pos {
                return Err(Error::ModelFormat(format!(
                    "layer index {} at position {pos}",
                    layer.index
                )));
            }
            match &layer.kind {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding: _,
                    weight_offset,
                    bias_offset,
                    ..
                } => {
                    if *kernel % 2 == 0 || *kernel == 0 {
                        return Err(Error::ModelFormat(format!(
                            "layer {pos}: kernel size {kernel} must be odd"
                        )));
                    }
                    if *stride == 0 {
                        return Err(Error::ModelFormat(format!("layer {pos}: stride 0")));
                    }
                    if cur != *c_in {
                        return Err(Error::ModelFormat(format!(
                            "layer {pos}: expects {c_in} channels, gets {cur}"
                        )));
                    }
                    let wlen = c_out * c_in * kernel * kernel;
                    if weight_offset.checked_add(wlen).is_none_or(|end| end > self.weights.len())
                        || bias_offset.checked_add(*c_out).is_none_or(|end| end > self.weights.len())
                    {
                        return Err(Error::ModelFormat(format!(
                            "layer {pos}: weight blob overflow (blob has {} values)",
                            self.weights.len()
                        )));
                    }
                    cur = *c_out;
                }
                LayerKind::Relu => {}
                LayerKind::ResidualAdd { source } => {
                    if *source >= pos {
                        return Err(Error::ModelFormat(format!(
                            "layer {pos}: residual source {source} is not an earlier layer"
                        )));
                    }
                    if channels[*source] != cur {
                        return Err(Error::ModelFormat(format!(
                            "layer {pos}: residual source {source} has {} channels, stream has {cur}",
                            channels[*source]
                        )));
                    }
                }
                LayerKind::PixelShuffle { scale } => {
                    if *scale == 0 {
                        return Err(Error::ModelFormat(format!("layer {pos}: scale 0")));
                    }
                    if cur % (scale * scale) != 0 {
                        return Err(Error::ModelFormat(format!(
                            "layer {pos}: {cur} channels not divisible by {}",
                            scale * scale
                        )));
                    }
                    cur /= scale * scale;
                    shuffle_product *= scale;
                }
            }
            channels.push(cur);
        }
        if shuffle_product != self.upscale_factor {
            return Err(Error::ModelFormat(format!(
                "pixel-shuffle scales compose to {shuffle_product}, manifest says upscale {}",
                self.upscale_factor
            )));
        }
        Ok(())
    }

    /// Indices of the quantizable (conv) layers, in execution order.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.is_quantizable())
            .map(|l| l.index)
            .collect()
    }

    /// Channels the input tensor must have.
    pub fn input_channels(&self) -> usize {
        match self.layers.first().map(|l| &l.kind) {
            Some(LayerKind::Conv { c_in, .. }) => *c_in,
            _ => unreachable!("validated: first layer is conv"),
        }
    }

    /// Kernel tensor and bias for a conv layer.
    pub fn conv_weights(&self, layer: usize) -> Result<(Tensor, Vec<f64>)> {
        let spec = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("no layer {layer}")))?;
        match &spec.kind {
            LayerKind::Conv {
                c_in,
                c_out,
                kernel,
                weight_offset,
                bias_offset,
                ..
            } => {
                let wlen = c_out * c_in * kernel * kernel;
                let w = self.weights[*weight_offset..weight_offset + wlen].to_vec();
                let b = self.weights[*bias_offset..bias_offset + c_out].to_vec();
                Ok((Tensor::from_vec(*c_out, *c_in, *kernel, *kernel, w)?, b))
            }
            _ => Err(Error::Invalid(format!("layer {layer} is not a conv"))),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Receptive-field radius on the input grid for stride-1 models.
    pub fn receptive_radius(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { kernel, .. } => (kernel - 1) / 2,
                _ => 0,
            })
            .sum()
    }

    /// Propagates an input shape through the graph.
    pub fn output_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let mut cur = (c, h, w);
        for layer in &self.layers {
            cur = layer.out_shape(cur.0, cur.1, cur.2)?;
        }
        Ok(cur)
    }

    fn blob_f32(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::with_capacity(self.weights.len() * 4);
        for &v in &self.weights {
            let narrow = v as f32;
            if f64::from(narrow) != v {
                return Err(Error::ModelFormat(format!(
                    "weight value {v} is not exactly representable as f32"
                )));
            }
            bytes.extend_from_slice(&narrow.to_le_bytes());
        }
        Ok(bytes)
    }

    /// SHA-256 of the f32 weight blob, as stored in the manifest.
    pub fn weights_sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.blob_f32()?))
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let blob = self.blob_f32()?;
        let manifest = Manifest {
            schema_version: MODEL_SCHEMA_VERSION,
            name: self.name.clone(),
            upscale_factor: self.upscale_factor,
            weights_file: "weights.bin".into(),
            weights_sha256: sha256_hex(&blob),
            layers: self.layers.clone(),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, json.as_bytes())
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let blob_path = dir.join("weights.bin");
        fs::write(&blob_path, &blob).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
        Ok(())
    }

    /// Loads a model directory, verifying the blob checksum and all
    /// manifest invariants.
    pub fn load(dir: &Path) -> Result<ModelGraph> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&json)?;
        if manifest.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported manifest schema version {}",
                manifest.schema_version
            )));
        }
        let blob_path = dir.join(&manifest.weights_file);
        let blob =
            fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
        if blob.len() % 4 != 0 {
            return Err(Error::ModelFormat(format!(
                "weight blob length {} is not a multiple of 4",
                blob.len()
            )));
        }
        let got = sha256_hex(&blob);
        if got != manifest.weights_sha256 {
            return Err(Error::ChecksumMismatch {
                expected: manifest.weights_sha256,
                got,
            });
        }
        let weights: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ModelGraph::new(manifest.name, manifest.upscale_factor, manifest.layers, weights)
    }

    /// Full-precision forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, None, None, None)
    }

    /// Full-precision forward with a per-layer tap observing each layer's
    /// input tensor before any quantization would apply.
    pub fn forward_probed(
        &self,
        input: &Tensor,
        probe: &mut dyn FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        self.run(input, None, Some(probe), None)
    }

    /// Forward under a quantization plan.
    pub fn forward_quant(&self, input: &Tensor, plan: &QuantPlan) -> Result<Tensor> {
        self.run(input, Some(plan), None, None)
    }

    /// Forward under a plan, also collecting quantization event counters.
    pub fn forward_quant_traced(
        &self,
        input: &Tensor,
        plan: &QuantPlan,
    ) -> Result<(Tensor, QuantTrace)> {
        let mut trace = QuantTrace::default();
        let out = self.run(input, Some(plan), None, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(
        &self,
        input: &Tensor,
        plan: Option<&QuantPlan>,
        mut probe: Option<&mut dyn FnMut(usize, &Tensor)>,
        mut trace: Option<&mut QuantTrace>,
    ) -> Result<Tensor> {
        if let Some(p) = plan {
            p.check_against(self)?;
        }
        if input.channels() != self.input_channels() {
            return Err(Error::shape(
                "model input",
                format!("{} channels", self.input_channels()),
                format!("{} channels", input.channels()),
            ));
        }
        // Weight-parameter lookup by layer index.
        let weight_params: BTreeMap<usize, QuantParams> = plan
            .and_then(|p| p.weights.as_ref())
            .map(|w| w.iter().map(|e| (e.layer, e.params)).collect())
            .unwrap_or_default();
        // Outputs that later residual adds will consume.
        let keep: BTreeSet<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::ResidualAdd { source } => Some(source),
                _ => None,
            })
            .collect();
        let mut saved: BTreeMap<usize, Tensor> = BTreeMap::new();

        let mut cur = input.clone();
        for layer in &self.layers {
            if let Some(p) = probe.as_deref_mut() {
                p(layer.index, &cur);
            }
            let out = match &layer.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => {
                    let mut x = cur;
                    if let (Some(plan), true) = (plan, layer.is_quantizable()) {
                        let entry = plan
                            .entry_for(layer.index)
                            .expect("plan checked against model");
                        let params = if entry.params.is_passthrough() {
                            entry.params
                        } else if entry.params.dynamic {
                            if let Some(t) = trace.as_deref_mut() {
                                *t.dre_invocations.entry(layer.index).or_insert(0) += 1;
                                t.scan_elements += x.len() as u64;
                            }
                            QuantParams::dynamic_for(&x, entry.params.bits)
                        } else {
                            entry.params
                        };
                        if !params.is_passthrough() {
                            let (q, clips) = fake_quantize_counted(&x, &params);
                            if let Some(t) = trace.as_deref_mut() {
                                *t.clips.entry(layer.index).or_insert(0) += clips;
                            }
                            x = q;
                        }
                    }
                    let (mut w, b) = self.conv_weights(layer.index)?;
                    if let Some(wp) = weight_params.get(&layer.index) {
                        w = fake_quantize(&w, wp);
                    }
                    conv2d(&x, &w, &b, *stride, *padding)?
                }
                LayerKind::Relu => relu(&cur),
                LayerKind::ResidualAdd { source } => {
                    let src = saved
                        .get(source)
                        .ok_or_else(|| Error::Invalid(format!("missing source {source}")))?;
                    add(&cur, src)?
                }
                LayerKind::PixelShuffle { scale } => pixel_shuffle_memaware(&cur, *scale)?,
            };
            if keep.contains(&layer.index) {
                saved.insert(layer.index, out.clone());
            }
            cur = out;
        }
        if !cur.all_finite() {
            return Err(Error::Invalid(
                "forward produced non-finite samples".into(),
            ));
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use crate::quant::{calibrate, CalibrationInput};
    use crate::tensor::testutil::random_tensor;
    use tempfile::tempdir;

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let m = fixtures::make_analytic_model(fixtures::AnalyticKind::Bicubic, 2).unwrap();
        let dir = tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ModelGraph::load(dir.path()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn blob_overflow_is_rejected() {
        let layers = vec![LayerSpec {
            index: 0,
            kind: LayerKind::Conv {
                c_in: 1,
                c_out: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight_offset: 0,
                bias_offset: 9,
                quantizable: true,
            },
        }];
        // Blob holds the kernel but not the bias.
        let err = ModelGraph::new("broken", 1, layers, vec![0.0; 9]).unwrap_err();
        assert!(err.to_string().contains("weight blob overflow"), "{err}");
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let m = fixtures::make_analytic_model(fixtures::AnalyticKind::Bilinear, 2).unwrap();
        let dir = tempdir().unwrap();
        m.save(dir.path()).unwrap();
        // Corrupt one byte of the blob.
        let blob_path = dir.path().join("weights.bin");
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob[0] ^= 0xff;
        std::fs::write(&blob_path, &blob).unwrap();
        match ModelGraph::load(dir.path()) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn hand_written_two_layer_manifest_counts_two_quantizable() {
        let layers = vec![
            LayerSpec {
                index: 0,
                kind: LayerKind::Conv {
                    c_in: 1,
                    c_out: 2,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    weight_offset: 0,
                    bias_offset: 2,
                    quantizable: true,
                },
            },
            LayerSpec {
                index: 1,
                kind: LayerKind::Conv {
                    c_in: 2,
                    c_out: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    weight_offset: 4,
                    bias_offset: 6,
                    quantizable: true,
                },
            },
        ];
        let m = ModelGraph::new("two", 1, layers, vec![1.0, 0.5, 0.0, 0.0, 1.0, -1.0, 0.0])
            .unwrap();
        assert_eq!(m.quantizable_layers(), vec![0, 1]);
    }

    #[test]
    fn forward_without_plan_is_pure_and_deterministic() {
        let m = fixtures::make_synthetic_model(3, 4, 2, 5).unwrap();
        let x = random_tensor(1, 1, 7, 9, 88);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), (1, 1, 14, 18));
    }

    #[test]
    fn passthrough_plan_matches_fp_forward() {
        let m = fixtures::make_synthetic_model(4, 4, 2, 6).unwrap();
        let x = random_tensor(1, 1, 6, 6, 17);
        let fp = m.forward(&x).unwrap();
        let plan = QuantPlan::passthrough(&m);
        let out = m.forward_quant(&x, &plan).unwrap();
        assert_eq!(fp.data(), out.data());
    }

    #[test]
    fn all_32_plan_without_weight_quant_is_fp() {
        // 32-bit wordlengths are pass-through by definition; derived via
        // from_wordlengths to exercise the plan-building path.
        let m = fixtures::make_synthetic_model(3, 4, 2, 6).unwrap();
        let x = random_tensor(1, 1, 6, 6, 18);
        let inputs = vec![CalibrationInput {
            name: "a".into(),
            tensor: x.clone(),
        }];
        let stats = calibrate(&m, &inputs, 1.0, 0).unwrap();
        let mut plan = QuantPlan::from_wordlengths(&m, &stats, &[32, 32, 32]).unwrap();
        plan.weights = None;
        let fp = m.forward(&x).unwrap();
        let out = m.forward_quant(&x, &plan).unwrap();
        for (a, b) in fp.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn plan_layer_mismatch_is_error() {
        let m = fixtures::make_synthetic_model(3, 4, 2, 6).unwrap();
        let other = fixtures::make_synthetic_model(2, 4, 2, 6).unwrap();
        let x = random_tensor(1, 1, 6, 6, 18);
        let plan = QuantPlan::passthrough(&other);
        assert!(m.forward_quant(&x, &plan).is_err());
    }

    #[test]
    fn quantized_identity_conv_stays_within_half_step() {
        // Identity-ish kernel with one inexact tap; input in [0, 1].
        let m = fixtures::single_conv_model(&[0.0, 0.0, 0.0, 0.0, 0.7, 0.3, 0.0, 0.0, 0.0]);
        let plan = QuantPlan::weight_only(&m).unwrap();
        let hs = plan.weights.as_ref().unwrap()[0].params.half_step();
        let mut x = random_tensor(1, 1, 5, 5, 9);
        for v in x.data_mut() {
            *v = (*v + 1.0) / 2.0; // into [0, 1]
        }
        let fp = m.forward(&x).unwrap();
        let q = m.forward_quant(&x, &plan).unwrap();
        for (a, b) in fp.data().iter().zip(q.data()) {
            // Two taps are exact lattice points, one tap carries at most a
            // half-step error, inputs are bounded by 1.
            assert!((a - b).abs() <= 2.0 * hs + 1e-12);
        }
    }
}
