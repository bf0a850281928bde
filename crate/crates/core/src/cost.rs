//! Wordlength-weighted operation-count cost model.
//!
//! Each operation is weighted by the bytes of its activation wordlength:
//! 32-bit costs 4, 16-bit costs 2, 8-bit costs 1. Conv layers count
//! multiply-accumulates (`c_out * c_in * k^2 * h_out * w_out`);
//! element-wise layers (relu, add, pixel-shuffle) count one op per input
//! element at the wordlength inherited from their producer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph};

/// Cost weight for a supported wordlength.
pub fn wordlength_weight(bits: u8) -> Result<u64> {
    match bits {
        8 => Ok(1),
        16 => Ok(2),
        32 => Ok(4),
        other => Err(Error::InvalidArg(format!(
            "unsupported wordlength {other} (expected 8, 16 or 32)"
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    /// MACs for conv layers, element count otherwise.
    pub ops: u64,
    pub wordlength: u8,
    pub weighted: u64,
}

/// Weighted execution-cost estimate for one plan at one input size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub input_hw: (usize, usize),
    pub per_layer: Vec<LayerCost>,
    /// Weighted cost of the conv layers only.
    pub conv_weighted: u64,
    /// Weighted cost of the element-wise layers.
    pub elementwise_weighted: u64,
    pub total_weighted: u64,
    /// Reference plan the reduction ratio is measured against.
    pub reference_plan: String,
    /// Conv-cost reduction of this plan relative to the reference.
    pub reduction_vs_reference: f64,
    /// Convention note for the element-wise contribution.
    pub elementwise_convention: String,
}

impl CostReport {
    /// Reduction of this plan's conv cost relative to a reference plan
    /// (the usual reference being the uniform max-wordlength plan).
    pub fn conv_reduction_vs(&self, reference: &CostReport) -> f64 {
        reference.conv_weighted as f64 / self.conv_weighted as f64
    }

    pub fn total_reduction_vs(&self, reference: &CostReport) -> f64 {
        reference.total_weighted as f64 / self.total_weighted as f64
    }
}

/// Weighted cost of executing `m` with per-quantizable-layer wordlengths
/// `bits` on an input of spatial size `input_hw`.
pub fn get_bops(m: &ModelGraph, bits: &[u8], input_hw: (usize, usize)) -> Result<CostReport> {
    let quantizable = m.quantizable_layers();
    if bits.len() != quantizable.len() {
        return Err(Error::Invalid(format!(
            "wordlength vector has {} entries, model has {} quantizable layers",
            bits.len(),
            quantizable.len()
        )));
    }
    for &b in bits {
        wordlength_weight(b)?;
    }

    let mut shape = (m.input_channels(), input_hw.0, input_hw.1);
    let mut inherited: u8 = 32;
    let mut per_layer = Vec::with_capacity(m.layers.len());
    let mut conv_weighted = 0u64;
    let mut conv_macs = 0u64;
    let mut elementwise_weighted = 0u64;
    for layer in &m.layers {
        let ops = layer.op_count(shape.0, shape.1, shape.2)?;
        let wl = match &layer.kind {
            LayerKind::Conv { .. } => {
                let b = if layer.is_quantizable() {
                    let pos = quantizable
                        .iter()
                        .position(|&l| l == layer.index)
                        .expect("layer is quantizable");
                    bits[pos]
                } else {
                    32
                };
                inherited = b;
                b
            }
            _ => inherited,
        };
        let weighted = ops * wordlength_weight(wl)?;
        match layer.kind {
            LayerKind::Conv { .. } => {
                conv_weighted += weighted;
                conv_macs += ops;
            }
            _ => elementwise_weighted += weighted,
        }
        per_layer.push(LayerCost {
            layer: layer.index,
            kind: match &layer.kind {
                LayerKind::Conv { .. } => "conv".into(),
                LayerKind::Relu => "relu".into(),
                LayerKind::ResidualAdd { .. } => "residual_add".into(),
                LayerKind::PixelShuffle { .. } => "pixel_shuffle".into(),
            },
            ops,
            wordlength: wl,
            weighted,
        });
        shape = layer.out_shape(shape.0, shape.1, shape.2)?;
    }
    // Reference: the uniform max-wordlength (16-bit) plan, whose conv
    // cost is twice the MAC count.
    let reference_conv = 2 * conv_macs;
    Ok(CostReport {
        input_hw,
        per_layer,
        conv_weighted,
        elementwise_weighted,
        total_weighted: conv_weighted + elementwise_weighted,
        reference_plan: "uniform-16".into(),
        reduction_vs_reference: reference_conv as f64 / conv_weighted as f64,
        elementwise_convention: "1 op/element at the inherited wordlength".into(),
    })
}

/// Per-quantizable-layer MACs at the given input size, in layer order.
pub fn quantizable_layer_macs(m: &ModelGraph, input_hw: (usize, usize)) -> Result<Vec<(usize, u64)>> {
    let report = get_bops(m, &vec![16; m.quantizable_layers().len()], input_hw)?;
    Ok(report
        .per_layer
        .iter()
        .filter(|l| l.kind == "conv")
        .filter(|l| m.layers[l.layer].is_quantizable())
        .map(|l| (l.layer, l.ops))
        .collect())
}
