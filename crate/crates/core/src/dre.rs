//! Layerwise resilience analysis and dynamic-range-estimation layer
//! selection.
//!
//! Resilience analysis isolates each layer's contribution to the quality
//! drop: against a weight-quantized all-16 baseline, each layer is
//! individually demoted to 8 bits and its drop recorded. The selection
//! pass treats the per-layer drops as a discrete signal, takes squared
//! drops as the signal energy, and picks the shortest prefix of the
//! drop-sorted layers whose cumulative energy reaches the requested
//! concentration threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantPlan;
use crate::wlopt::EvalHarness;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LraEntry {
    pub layer: usize,
    /// Individual 8-bit PSNR drop in dB, floored at zero.
    pub drop_db: f64,
}

/// Layers sorted by individual-quantization quality drop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LraReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub model_name: String,
    /// SHA-256 of the model's weight blob.
    #[serde(default)]
    pub model_sha256: String,
    /// Content hash of the calibration inputs the drops were measured on.
    #[serde(default)]
    pub calibration_hash: String,
    /// Calibration quality of the weight-quantized all-16 baseline.
    pub baseline_quality_db: f64,
    /// Drop caused solely by weight quantization (full-precision
    /// activations), relative to the full-precision model.
    pub weight_only_drop_db: f64,
    /// Entries in non-increasing drop order, ties by ascending index.
    pub entries: Vec<LraEntry>,
    pub evaluations: u64,
}

/// Layerwise resilience analysis.
///
/// Spends exactly `|L| + 1` metered evaluations: the weight-quantized
/// all-16 baseline plus one per layer with only that layer at 8 bits.
/// Negative observed drops are floored to zero.
pub fn lra(h: &mut EvalHarness) -> Result<LraReport> {
    let layers = h.model.quantizable_layers();
    let n = layers.len();
    if n == 0 {
        return Err(Error::Invalid("model has no quantizable layers".into()));
    }
    let start = h.evaluations();

    let baseline_bits = vec![16u8; n];
    let baseline_plan = h.plan_for(&baseline_bits)?;
    let baseline_quality = h.eval_plan(&baseline_plan)?;

    let mut entries = Vec::with_capacity(n);
    for (pos, &layer) in layers.iter().enumerate() {
        let mut bits = baseline_bits.clone();
        bits[pos] = 8;
        let plan = h.plan_for(&bits)?;
        let quality = h.eval_plan(&plan)?;
        entries.push(LraEntry {
            layer,
            drop_db: (baseline_quality - quality).max(0.0),
        });
    }
    entries.sort_by(|a, b| {
        b.drop_db
            .partial_cmp(&a.drop_db)
            .expect("drops are finite")
            .then(a.layer.cmp(&b.layer))
    });

    let fp = h.fp_quality()?;
    let w8 = h.w8_quality()?;
    Ok(LraReport {
        schema_version: 1,
        tool_version: crate::TOOL_VERSION.to_string(),
        model_name: h.model.name.clone(),
        model_sha256: h.model.weights_sha256()?,
        calibration_hash: h.stats.dataset_hash.clone(),
        baseline_quality_db: baseline_quality,
        weight_only_drop_db: fp - w8,
        entries,
        evaluations: h.evaluations() - start,
    })
}

/// Selects the prefix of the report's layers whose cumulative squared-drop
/// energy reaches concentration `k`.
///
/// Edge rules: zero total energy or `k == 0` select nothing; `k == 1`
/// selects every layer with a positive drop.
pub fn select_dre_layers(report: &LraReport, k: f64) -> Result<Vec<usize>> {
    if report.entries.is_empty() {
        return Err(Error::Invalid("resilience report is empty".into()));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArg(format!(
            "energy concentration threshold must be in [0, 1], got {k}"
        )));
    }
    let energies: Vec<f64> = report.entries.iter().map(|e| e.drop_db * e.drop_db).collect();
    let total: f64 = energies.iter().sum();
    if total == 0.0 || k == 0.0 {
        return Ok(Vec::new());
    }
    if k == 1.0 {
        return Ok(report
            .entries
            .iter()
            .filter(|e| e.drop_db > 0.0)
            .map(|e| e.layer)
            .collect());
    }
    let mut selected = Vec::new();
    let mut cumulative = 0.0;
    for (entry, energy) in report.entries.iter().zip(&energies) {
        selected.push(entry.layer);
        cumulative += energy / total;
        if cumulative >= k {
            break;
        }
    }
    Ok(selected)
}

/// Marks the selected layers as dynamic-range layers.
///
/// Wordlengths are unchanged and the static scale/zero-point stay in the
/// plan as fallback metadata; at run time the selected layers re-derive
/// parameters from each input tensor.
pub fn apply_dre(plan: &QuantPlan, selected: &[usize]) -> Result<QuantPlan> {
    let mut out = plan.clone();
    for &layer in selected {
        let entry = out
            .layers
            .iter_mut()
            .find(|e| e.layer == layer)
            .ok_or_else(|| {
                Error::InvalidArg(format!("layer {layer} is not a quantizable plan layer"))
            })?;
        entry.params.dynamic = true;
    }
    out.provenance.dre_selected = selected.to_vec();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{entry_from_hr, image_to_input, Dataset};
    use crate::model::fixtures::{make_residual_detail_model, make_synthetic_model};
    use crate::model::ModelGraph;
    use crate::quant::{calibrate, CalibrationInput};
    use crate::wlopt::EvalHarness;

    fn harness_for(m: &ModelGraph, n_images: usize, seed0: u64) -> EvalHarness<'_> {
        harness_ranged(m, n_images, seed0, 0, 255)
    }

    /// Harness over images spanning [lo, hi]; a non-full range keeps the
    /// first layer's input off the calibration lattice, so quantizing it
    /// is not a no-op.
    fn harness_ranged(
        m: &ModelGraph,
        n_images: usize,
        seed0: u64,
        lo: u8,
        hi: u8,
    ) -> EvalHarness<'_> {
        let entries: Vec<_> = (0..n_images)
            .map(|i| {
                entry_from_hr(
                    format!("img{i}"),
                    &crate::synth::synthetic_image_ranged(48, 48, 1, seed0 + i as u64, lo, hi),
                    m.upscale_factor,
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset { entries };
        let inputs: Vec<CalibrationInput> = ds
            .entries
            .iter()
            .map(|e| CalibrationInput {
                name: e.name.clone(),
                tensor: image_to_input(m, &e.lr).unwrap(),
            })
            .collect();
        let stats = calibrate(m, &inputs, 1.0, 0).unwrap();
        EvalHarness::from_dataset(m, stats, &ds).unwrap()
    }

    fn report_from_drops(drops: &[f64]) -> LraReport {
        let mut entries: Vec<LraEntry> = drops
            .iter()
            .enumerate()
            .map(|(i, &d)| LraEntry {
                layer: i,
                drop_db: d,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.drop_db
                .partial_cmp(&a.drop_db)
                .unwrap()
                .then(a.layer.cmp(&b.layer))
        });
        LraReport {
            schema_version: 1,
            tool_version: crate::TOOL_VERSION.into(),
            model_name: "test".into(),
            model_sha256: String::new(),
            calibration_hash: String::new(),
            baseline_quality_db: 0.0,
            weight_only_drop_db: 0.0,
            entries,
            evaluations: 0,
        }
    }

    #[test]
    fn lra_counts_and_ordering() {
        let m = make_synthetic_model(4, 4, 2, 31).unwrap();
        let mut h = harness_for(&m, 2, 900);
        let report = lra(&mut h).unwrap();
        assert_eq!(report.evaluations, 5);
        assert_eq!(report.entries.len(), 4);
        for pair in report.entries.windows(2) {
            assert!(pair[0].drop_db >= pair[1].drop_db);
            if pair[0].drop_db == pair[1].drop_db {
                assert!(pair[0].layer < pair[1].layer);
            }
        }
        assert!(report.entries.iter().all(|e| e.drop_db >= 0.0));
    }

    #[test]
    fn lra_single_layer_collapse() {
        let m = make_synthetic_model(1, 1, 2, 32).unwrap();
        let mut h = harness_for(&m, 2, 1000);
        let report = lra(&mut h).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.evaluations, 2);
        // With one layer, its individual drop is the all-8 drop vs the
        // baseline.
        let baseline = report.baseline_quality_db;
        h.reset_evaluations();
        let all8 = h.plan_for(&[8]).unwrap();
        let q = h.eval_plan(&all8).unwrap();
        assert!((report.entries[0].drop_db - (baseline - q).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn lra_top_rank_on_detail_fixture_matches_drop_oracle() {
        let m = make_residual_detail_model(8, 2, 33).unwrap();
        let mut h = harness_ranged(&m, 3, 1100, 13, 229);
        let report = lra(&mut h).unwrap();

        // Independent per-layer drop oracle: straightforward loop without
        // the report machinery.
        h.reset_evaluations();
        let layers = h.model.quantizable_layers();
        let baseline = h.eval_plan(&h.plan_for(&vec![16; layers.len()]).unwrap()).unwrap();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (pos, &layer) in layers.iter().enumerate() {
            let mut bits = vec![16u8; layers.len()];
            bits[pos] = 8;
            let q = h.eval_plan(&h.plan_for(&bits).unwrap()).unwrap();
            let drop = baseline - q;
            if drop > best.1 {
                best = (layer, drop);
            }
        }
        assert_eq!(report.entries[0].layer, best.0);
        // The fixture's first conv dominates by construction.
        assert_eq!(report.entries[0].layer, 0);
    }

    #[test]
    fn identical_layers_get_equal_drops_with_index_tiebreak() {
        // Two exact-identity convs receive bit-identical input tensors;
        // quantizing either one yields the same output, so their drops tie
        // and sort by ascending index.
        use crate::model::fixtures::{phase_offset, AnalyticKind};
        use crate::model::{LayerKind, LayerSpec};
        let kind = AnalyticKind::Bicubic;
        let (c, k, s) = (2usize, 5usize, 2usize);
        let mut blob: Vec<f32> = Vec::new();
        let mut layers = Vec::new();
        let conv = |c_in: usize, c_out: usize, kernel: usize, w: &[f32],
                        layers: &mut Vec<LayerSpec>,
                        blob: &mut Vec<f32>| {
            let weight_offset = blob.len();
            blob.extend_from_slice(w);
            let bias_offset = blob.len();
            blob.extend(std::iter::repeat_n(0f32, c_out));
            layers.push(LayerSpec {
                index: layers.len(),
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
        };
        conv(1, c, 1, &[1.0, 1.0], &mut layers, &mut blob); // two copies
        conv(c, c, 1, &[1.0, 0.0, 0.0, 1.0], &mut layers, &mut blob); // identity
        conv(c, c, 1, &[1.0, 0.0, 0.0, 1.0], &mut layers, &mut blob); // identity
        let mut tail = vec![0f32; s * s * c * k * k];
        for i in 0..s {
            for j in 0..s {
                let (fy, fx) = (phase_offset(i, s), phase_offset(j, s));
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            tail[(((i * s + j) * c + ci) * k + ky) * k + kx] =
                                (kind.kernel(ky as f64 - 2.0 - fy)
                                    * kind.kernel(kx as f64 - 2.0 - fx)
                                    / c as f64) as f32;
                        }
                    }
                }
            }
        }
        conv(c, s * s, k, &tail, &mut layers, &mut blob);
        layers.push(LayerSpec {
            index: layers.len(),
            kind: LayerKind::PixelShuffle { scale: s },
        });
        let m = ModelGraph::new("twin_identity", s, layers, blob).unwrap();

        let mut h = harness_ranged(&m, 2, 1300, 13, 229);
        let report = lra(&mut h).unwrap();
        let d = |layer: usize| {
            report
                .entries
                .iter()
                .find(|e| e.layer == layer)
                .unwrap()
                .drop_db
        };
        // The twin identity layers tie; re-quantization at the other
        // (16-bit) layers keeps the equality within float noise only.
        assert!((d(1) - d(2)).abs() < 1e-9, "{} vs {}", d(1), d(2));
        if d(1) == d(2) {
            let pos =
                |layer: usize| report.entries.iter().position(|e| e.layer == layer).unwrap();
            assert!(pos(1) < pos(2));
        }
    }

    #[test]
    fn selection_worked_example() {
        // drops (0.4, 0.3, 0.1): energies (0.16, 0.09, 0.01), E = 0.26,
        // first cumulative 0.615 >= 0.5.
        let report = report_from_drops(&[0.4, 0.3, 0.1]);
        assert_eq!(select_dre_layers(&report, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn selection_edge_rules() {
        let report = report_from_drops(&[0.4, 0.3, 0.0]);
        assert!(select_dre_layers(&report, 0.0).unwrap().is_empty());
        // k = 1 selects all positive-drop layers only.
        assert_eq!(select_dre_layers(&report, 1.0).unwrap(), vec![0, 1]);
        let zeros = report_from_drops(&[0.0, 0.0]);
        assert!(select_dre_layers(&zeros, 0.7).unwrap().is_empty());
    }

    #[test]
    fn selection_is_monotone_prefix_in_k() {
        let report = report_from_drops(&[0.05, 0.4, 0.2, 0.3, 0.0]);
        let order: Vec<usize> = report.entries.iter().map(|e| e.layer).collect();
        let mut prev: Vec<usize> = Vec::new();
        for k in [0.0, 0.125, 0.5, 0.75, 1.0] {
            let sel = select_dre_layers(&report, k).unwrap();
            //

            // Prefix of the sorted order.
            assert_eq!(sel[..], order[..sel.len()]);
            // Monotone in k.
            assert!(prev.iter().all(|l| sel.contains(l)));
            prev = sel;
        }
    }

    #[test]
    fn top1_dre_beats_static_plan_on_out_of_range_inputs() {
        use crate::codec::upscale_image;
        use crate::metrics::psnr;
        use crate::metrics::Convention;
        use crate::quant::QuantPlan;

        let m = make_residual_detail_model(8, 2, 33).unwrap();
        // Calibrate on reduced-range images.
        let cal = {
            let entries: Vec<_> = (0..4)
                .map(|i| {
                    entry_from_hr(
                        format!("cal{i}"),
                        &crate::synth::synthetic_image_ranged(48, 48, 1, 1400 + i, 80, 176),
                        2,
                    )
                    .unwrap()
                })
                .collect();
            entries
        };
        let inputs: Vec<CalibrationInput> = cal
            .iter()
            .map(|e| CalibrationInput {
                name: e.name.clone(),
                tensor: image_to_input(&m, &e.lr).unwrap(),
            })
            .collect();
        let stats = calibrate(&m, &inputs, 1.0, 0).unwrap();
        let static_plan = QuantPlan::uniform(&m, &stats, 8).unwrap();

        // Rank layers on the calibration set and mark only the top one.
        let ds = Dataset { entries: cal };
        let mut h = EvalHarness::from_dataset(&m, stats, &ds).unwrap();
        let report = lra(&mut h).unwrap();
        let top1 = vec![report.entries[0].layer];
        let dre_plan = apply_dre(&static_plan, &top1).unwrap();

        // Inputs whose actual range exceeds the calibration range.
        for seed in 0..3u64 {
            let entry = entry_from_hr(
                "wide",
                &crate::synth::synthetic_image(48, 48, 1, 1500 + seed),
                2,
            )
            .unwrap();
            let (s_out, s_stats) = upscale_image(&m, Some(&static_plan), &entry.lr, 96).unwrap();
            let (d_out, _) = upscale_image(&m, Some(&dre_plan), &entry.lr, 96).unwrap();
            assert!(s_stats.total_clips() > 0, "inputs did not exceed calibration");
            let p_static = psnr(&s_out, &entry.hr, Convention::YChannel, 2).unwrap();
            let p_dre = psnr(&d_out, &entry.hr, Convention::YChannel, 2).unwrap();
            assert!(
                p_dre >= p_static,
                "seed {seed}: top-1 dynamic {p_dre:.3} < static {p_static:.3}"
            );
        }
    }

    #[test]
    fn apply_dre_sets_flags_and_validates_indices() {
        let m = make_synthetic_model(3, 4, 2, 34).unwrap();
        let h = harness_for(&m, 2, 1200);
        let plan = h.plan_for(&[16, 8, 16]).unwrap();
        let unchanged = apply_dre(&plan, &[]).unwrap();
        assert_eq!(plan.wordlengths(), unchanged.wordlengths());
        assert!(unchanged.dre_flags().iter().all(|&d| !d));

        let layers = m.quantizable_layers();
        let with = apply_dre(&plan, &[layers[0], layers[2]]).unwrap();
        assert_eq!(with.dre_flags(), vec![true, false, true]);
        // Wordlengths unchanged.
        assert_eq!(with.wordlengths(), plan.wordlengths());

        assert!(apply_dre(&plan, &[usize::MAX]).is_err());
    }
}
