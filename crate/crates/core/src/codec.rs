//! Runtime pipeline: patch tiling, partition scheduling, runtime
//! quantization accounting and dataset evaluation.
//!
//! The dispatcher partitions the layer sequence into maximal runs of equal
//! (wordlength, dynamic-range-flag) pairs; switching between partitions is
//! counted but carries no invented time constant. Layers with the dynamic
//! flag route through the runtime-quantization path: the input tensor is
//! scanned for min/max, fresh scale/zero-point are derived and the tensor
//! is quantized with them, per tile and per layer.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::get_bops;
use crate::error::{Error, Result};
use crate::metrics::{
    degrade_bicubic, load_image, psnr, ssim, unit_to_u8, Convention, ImageBuf,
};
use crate::model::{LayerKind, ModelGraph};
use crate::quant::{QuantPlan, QuantTrace, PASSTHROUGH_BITS};
use crate::tensor::Tensor;

/// PSNR values are capped here when aggregated into reports, so identical
/// images keep report arithmetic finite.
pub const PSNR_CAP_DB: f64 = 300.0;

pub fn cap_db(v: f64) -> f64 {
    if v.is_finite() {
        v.min(PSNR_CAP_DB)
    } else {
        PSNR_CAP_DB
    }
}

/// Maximal run of consecutive layers sharing wordlength and range mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub start: usize,
    /// Inclusive end index.
    pub end: usize,
    pub wordlength: u8,
    pub dre: bool,
}

/// Builds the dispatch schedule: non-conv layers inherit the (wordlength,
/// dre) pair of their producer, and partitions are maximal contiguous
/// runs of equal pairs.
pub fn build_schedule(m: &ModelGraph, plan: &QuantPlan) -> Result<Vec<Partition>> {
    plan.check_against(m)?;
    let mut effective: Vec<(u8, bool)> = Vec::with_capacity(m.layers.len());
    let mut cur: (u8, bool) = (PASSTHROUGH_BITS, false);
    for layer in &m.layers {
        if layer.is_quantizable() {
            let entry = plan.entry_for(layer.index).expect("plan checked");
            cur = (entry.params.bits, entry.params.dynamic);
        } else if let LayerKind::Conv { .. } = layer.kind {
            cur = (PASSTHROUGH_BITS, false);
        }
        effective.push(cur);
    }
    let mut partitions: Vec<Partition> = Vec::new();
    for (idx, &(wl, dre)) in effective.iter().enumerate() {
        match partitions.last_mut() {
            Some(p) if p.wordlength == wl && p.dre == dre => p.end = idx,
            _ => partitions.push(Partition {
                start: idx,
                end: idx,
                wordlength: wl,
                dre,
            }),
        }
    }
    Ok(partitions)
}

/// Aggregated runtime counters for one upscaling run or dataset pass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub partition_count: usize,
    pub switch_count: usize,
    pub tiles: u64,
    /// Runtime-quantization invocations per layer.
    pub dre_invocations: BTreeMap<usize, u64>,
    /// Elements scanned for min/max by the runtime quantization path.
    pub scan_elements: u64,
    /// Samples observed outside the derivation range, per layer.
    pub clips: BTreeMap<usize, u64>,
}

impl RunStats {
    pub fn total_clips(&self) -> u64 {
        self.clips.values().sum()
    }

    pub fn total_dre_invocations(&self) -> u64 {
        self.dre_invocations.values().sum()
    }

    fn absorb(&mut self, trace: &QuantTrace) {
        for (&l, &n) in &trace.dre_invocations {
            *self.dre_invocations.entry(l).or_insert(0) += n;
        }
        self.scan_elements += trace.scan_elements;
        for (&l, &n) in &trace.clips {
            *self.clips.entry(l).or_insert(0) += n;
        }
    }

    pub fn merge(&mut self, other: &RunStats) {
        self.tiles += other.tiles;
        for (&l, &n) in &other.dre_invocations {
            *self.dre_invocations.entry(l).or_insert(0) += n;
        }
        self.scan_elements += other.scan_elements;
        for (&l, &n) in &other.clips {
            *self.clips.entry(l).or_insert(0) += n;
        }
    }
}

/// How an image maps onto the model's input tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputLayout {
    /// (1, c, h, w): image channels are the tensor channels.
    Channels,
    /// (c, 1, h, w): single-channel model applied to each plane.
    Planewise,
}

fn input_layout(m: &ModelGraph, img_channels: usize) -> Result<InputLayout> {
    let c_in = m.input_channels();
    if c_in == img_channels {
        Ok(InputLayout::Channels)
    } else if c_in == 1 {
        Ok(InputLayout::Planewise)
    } else {
        Err(Error::shape(
            "model input",
            format!("{c_in} channels"),
            format!("image with {img_channels} channels"),
        ))
    }
}

/// Image region to model input tensor; samples map by /255.
fn region_to_tensor(
    img: &ImageBuf,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    layout: InputLayout,
) -> Tensor {
    let c = img.channels;
    let mut data = vec![0.0f64; c * h * w];
    match layout {
        InputLayout::Channels => {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(ch * h + y) * w + x] =
                            f64::from(img.get(y0 + y, x0 + x, ch)) / 255.0;
                    }
                }
            }
            Tensor::from_vec(1, c, h, w, data).expect("sized")
        }
        InputLayout::Planewise => {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(ch * h + y) * w + x] =
                            f64::from(img.get(y0 + y, x0 + x, ch)) / 255.0;
                    }
                }
            }
            Tensor::from_vec(c, 1, h, w, data).expect("sized")
        }
    }
}

/// Whole image to model input tensor.
pub fn image_to_input(m: &ModelGraph, img: &ImageBuf) -> Result<Tensor> {
    let layout = input_layout(m, img.channels)?;
    Ok(region_to_tensor(img, 0, 0, img.width, img.height, layout))
}

/// Model output tensor back to an 8-bit image (clamp to [0,1], scale by
/// 255, round half away from zero).
pub fn output_to_image(t: &Tensor) -> Result<ImageBuf> {
    let (n, c, h, w) = t.shape();
    let (channels, planewise) = if n == 1 {
        (c, false)
    } else if c == 1 {
        (n, true)
    } else {
        return Err(Error::shape(
            "output tensor",
            "batch 1 or single-channel planes",
            format!("({n},{c},{h},{w})"),
        ));
    };
    if channels != 1 && channels != 3 {
        return Err(Error::shape(
            "output tensor",
            "1 or 3 channels",
            channels.to_string(),
        ));
    }
    let mut data = vec![0u8; w * h * channels];
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let v = if planewise {
                    t.get(ch, 0, y, x)
                } else {
                    t.get(0, ch, y, x)
                };
                data[(y * w + x) * channels + ch] = unit_to_u8(v);
            }
        }
    }
    ImageBuf::new(w, h, channels, data)
}

fn write_tile(out: &mut ImageBuf, t: &Tensor, x0: usize, y0: usize, planewise: bool) {
    let (n, c, h, w) = t.shape();
    let channels = if planewise { n } else { c };
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let v = if planewise {
                    t.get(ch, 0, y, x)
                } else {
                    t.get(0, ch, y, x)
                };
                out.data[((y0 + y) * out.width + x0 + x) * out.channels + ch] = unit_to_u8(v);
            }
        }
    }
}

/// Upscales an image tile-by-tile through the scheduled hybrid-precision
/// model.
///
/// The image is split into non-overlapping `patch`-sized tiles (edge tiles
/// smaller); each tile runs a full forward and is written at the
/// upscale-factor position. Tile seams can differ from a whole-image
/// forward within the model's receptive field; interior samples match
/// exactly.
pub fn upscale_image(
    m: &ModelGraph,
    plan: Option<&QuantPlan>,
    img: &ImageBuf,
    patch: usize,
) -> Result<(ImageBuf, RunStats)> {
    if patch == 0 {
        return Err(Error::InvalidArg("patch size must be >= 1".into()));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArg("cannot upscale an empty image".into()));
    }
    let layout = input_layout(m, img.channels)?;
    let fallback;
    let plan = match plan {
        Some(p) => p,
        None => {
            fallback = QuantPlan::passthrough(m);
            &fallback
        }
    };
    let schedule = build_schedule(m, plan)?;
    let s = m.upscale_factor;

    // Shape contract check on the first tile size.
    let t_h = patch.min(img.height);
    let t_w = patch.min(img.width);
    let model_c = m.input_channels();
    let (oc, oh, ow) = m.output_shape(model_c, t_h, t_w)?;
    if oc != model_c || oh != s * t_h || ow != s * t_w {
        return Err(Error::shape(
            "patch pipeline",
            format!("shape-preserving x{s} model"),
            format!("({model_c},{t_h},{t_w}) -> ({oc},{oh},{ow})"),
        ));
    }

    let mut tiles: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut y0 = 0;
    while y0 < img.height {
        let th = patch.min(img.height - y0);
        let mut x0 = 0;
        while x0 < img.width {
            let tw = patch.min(img.width - x0);
            tiles.push((x0, y0, tw, th));
            x0 += tw;
        }
        y0 += th;
    }

    let results: Vec<(Tensor, QuantTrace)> = tiles
        .par_iter()
        .map(|&(x0, y0, tw, th)| {
            let input = region_to_tensor(img, x0, y0, tw, th, layout);
            m.forward_quant_traced(&input, plan)
        })
        .collect::<Result<_>>()?;

    let mut out = ImageBuf::new(
        img.width * s,
        img.height * s,
        img.channels,
        vec![0u8; img.width * s * img.height * s * img.channels],
    )?;
    let mut stats = RunStats {
        partition_count: schedule.len(),
        switch_count: schedule.len() - 1,
        tiles: tiles.len() as u64,
        ..RunStats::default()
    };
    for ((x0, y0, _, _), (tensor, trace)) in tiles.iter().zip(&results) {
        write_tile(
            &mut out,
            tensor,
            x0 * s,
            y0 * s,
            layout == InputLayout::Planewise,
        );
        stats.absorb(trace);
    }
    Ok((out, stats))
}

// ---------------------------------------------------------------------
// Datasets and evaluation reports.
// ---------------------------------------------------------------------

/// One evaluation pair. For HR-only datasets the LR side is the
/// documented bicubic degradation of the (cropped) HR image.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub lr: ImageBuf,
    pub hr: ImageBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

fn list_images(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    let iter = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in iter {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if matches!(ext.as_str(), "png" | "pgm" | "ppm") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Crops an image to dimensions divisible by `s`.
pub fn crop_to_multiple(img: &ImageBuf, s: usize) -> Result<ImageBuf> {
    let w = (img.width / s) * s;
    let h = (img.height / s) * s;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArg(format!(
            "image {}x{} too small for scale {s}",
            img.width, img.height
        )));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(w * h * img.channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                data.push(img.get(y, x, c));
            }
        }
    }
    ImageBuf::new(w, h, img.channels, data)
}

/// Builds an entry from an HR image via the bicubic degradation.
pub fn entry_from_hr(name: impl Into<String>, hr: &ImageBuf, scale: usize) -> Result<DatasetEntry> {
    let hr = crop_to_multiple(hr, scale)?;
    let lr = degrade_bicubic(&hr, scale)?;
    Ok(DatasetEntry {
        name: name.into(),
        lr,
        hr,
    })
}

/// Loads a dataset directory.
///
/// Layout is either `LR/` and `HR/` subdirectories with matching
/// basenames, or HR images only (an `HR/` subdirectory or a flat
/// directory) with `degrade = true` to derive LR inputs by bicubic
/// downscaling.
pub fn load_dataset(dir: &Path, scale: usize, degrade: bool) -> Result<Dataset> {
    let lr_dir = dir.join("LR");
    let hr_dir = dir.join("HR");
    let mut entries = Vec::new();
    if lr_dir.is_dir() && hr_dir.is_dir() {
        let lr = list_images(&lr_dir)?;
        let hr: BTreeMap<String, std::path::PathBuf> = list_images(&hr_dir)?.into_iter().collect();
        if lr.is_empty() {
            return Err(Error::Dataset(format!("no LR images in {}", lr_dir.display())));
        }
        for (name, lr_path) in &lr {
            let hr_path = hr.get(name).ok_or_else(|| {
                Error::Dataset(format!("missing HR counterpart for '{name}'"))
            })?;
            let lr_img = load_image(lr_path)?;
            let hr_img = load_image(hr_path)?;
            if hr_img.width != lr_img.width * scale || hr_img.height != lr_img.height * scale {
                return Err(Error::Dataset(format!(
                    "'{name}': HR is {}x{}, expected {}x{} for scale {scale}",
                    hr_img.width,
                    hr_img.height,
                    lr_img.width * scale,
                    lr_img.height * scale
                )));
            }
            entries.push(DatasetEntry {
                name: name.clone(),
                lr: lr_img,
                hr: hr_img,
            });
        }
    } else {
        let source = if hr_dir.is_dir() { hr_dir } else { dir.to_path_buf() };
        let images = list_images(&source)?;
        if images.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", source.display())));
        }
        if !degrade {
            return Err(Error::Dataset(
                "dataset has no LR/ images; pass --degrade bicubic to derive them".into(),
            ));
        }
        for (name, path) in images {
            let hr = load_image(&path)?;
            entries.push(entry_from_hr(name, &hr, scale)?);
        }
    }
    Ok(Dataset { entries })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bops_total: u64,
    pub bops_conv: u64,
}

/// Dataset evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub model_name: String,
    /// SHA-256 of the model's weight blob.
    #[serde(default)]
    pub model_sha256: String,
    pub wordlengths: Vec<u8>,
    pub dre_layers: Vec<usize>,
    /// Provenance of the evaluated plan, when one was supplied.
    pub plan_provenance: Option<crate::quant::PlanProvenance>,
    pub convention: Convention,
    pub shave: usize,
    pub patch: usize,
    pub psnr_cap_db: f64,
    pub per_image: Vec<ImageResult>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub run_stats: RunStats,
}

/// Evaluates a plan over a dataset: per-image and mean PSNR/SSIM, cost
/// accounting and aggregated runtime statistics.
pub fn evaluate_dataset(
    m: &ModelGraph,
    plan: Option<&QuantPlan>,
    dataset: &Dataset,
    convention: Convention,
    shave: usize,
    patch: usize,
) -> Result<EvalReport> {
    if dataset.entries.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let wordlengths = plan.map(|p| p.wordlengths()).unwrap_or_default();
    let dre_layers: Vec<usize> = plan
        .map(|p| {
            p.layers
                .iter()
                .filter(|l| l.params.dynamic)
                .map(|l| l.layer)
                .collect()
        })
        .unwrap_or_default();

    let mut per_image = Vec::with_capacity(dataset.entries.len());
    let mut run_stats = RunStats::default();
    let mut first = true;
    for entry in &dataset.entries {
        let (out, stats) = upscale_image(m, plan, &entry.lr, patch)?;
        let p = cap_db(psnr(&out, &entry.hr, convention, shave)?);
        let s = ssim(&out, &entry.hr, convention, shave)?;
        let bits = if wordlengths.is_empty() {
            vec![PASSTHROUGH_BITS; m.quantizable_layers().len()]
        } else {
            wordlengths.clone()
        };
        let cost = get_bops(m, &bits, (entry.lr.height, entry.lr.width))?;
        if first {
            run_stats.partition_count = stats.partition_count;
            run_stats.switch_count = stats.switch_count;
            first = false;
        }
        run_stats.merge(&stats);
        per_image.push(ImageResult {
            name: entry.name.clone(),
            psnr_db: p,
            ssim: s,
            bops_total: cost.total_weighted,
            bops_conv: cost.conv_weighted,
        });
    }
    let mean_psnr = per_image.iter().map(|r| r.psnr_db).sum::<f64>() / per_image.len() as f64;
    let mean_ssim = per_image.iter().map(|r| r.ssim).sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport {
        schema_version: 1,
        tool_version: crate::TOOL_VERSION.to_string(),
        model_name: m.name.clone(),
        model_sha256: m.weights_sha256()?,
        wordlengths,
        dre_layers,
        plan_provenance: plan.map(|p| p.provenance.clone()),
        convention,
        shave,
        patch,
        psnr_cap_db: PSNR_CAP_DB,
        per_image,
        mean_psnr_db: mean_psnr,
        mean_ssim,
        run_stats,
    })
}
