//! Command-line surface for the offline quantization flow and the
//! simulated runtime.
//!
//! Every subcommand writes its machine output to files (JSON artifacts,
//! model directories, images); stdout carries a short human-readable
//! summary and stderr carries diagnostics. Exit codes: 0 on success, 1 on
//! I/O or validation errors, 2 on usage errors, 3 when an optimization
//! reports infeasibility.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use srq_core::codec::{evaluate_dataset, load_dataset, upscale_image, Dataset};
use srq_core::cost::get_bops;
use srq_core::dre::{apply_dre, lra, select_dre_layers, LraReport};
use srq_core::error::Error;
use srq_core::metrics::{load_image, save_image, Convention};
use srq_core::model::fixtures::{
    make_analytic_model, make_chain_model, make_residual_detail_model, make_synthetic_model,
    AnalyticKind,
};
use srq_core::model::ModelGraph;
use srq_core::quant::{calibrate, CalibrationInput, CalibrationStats, QuantPlan};
use srq_core::wlopt::{
    optimize_ga, optimize_rs, optimize_sa, optimize_wlopt, EvalHarness, OptimizerResult,
    SaConfig, SearchBudget,
};

#[derive(Parser)]
#[command(name = "srq", version, about = "Hybrid-precision quantization toolkit for super-resolution CNNs")]
struct Cli {
    /// Cap internal parallelism; 1 produces identical outputs to N>1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fixture model directory (manifest.json + weights.bin).
    GenModel(GenModelArgs),
    /// Gather per-layer activation ranges over a calibration sample.
    Calibrate(CalibrateArgs),
    /// Select per-layer wordlengths under a quality-drop tolerance.
    Optimize(OptimizeArgs),
    /// Layerwise resilience analysis (individual 8-bit drops).
    Lra(LraArgs),
    /// Mark dynamic-range layers on a plan from a resilience report.
    SelectDre(SelectDreArgs),
    /// Wordlength-weighted operation-count report.
    Bops(BopsArgs),
    /// Upscale one image through the scheduled, quantized model.
    Upscale(UpscaleArgs),
    /// Evaluate a plan over a dataset (PSNR/SSIM, cost, runtime counters).
    Eval(EvalArgs),
    /// Run the greedy optimizer against SA/GA/RS at evaluation parity.
    CompareOptimizers(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Bilinear,
    Bicubic,
    Synthetic,
    Chain,
    ResidualDetail,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, value_enum)]
    kind: ModelKind,
    #[arg(long)]
    scale: usize,
    /// Conv-layer count for generated (non-analytic) models.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset directory: LR/ and HR/ subdirectories, or HR images only.
    #[arg(long)]
    images: PathBuf,
    /// Derive LR inputs from HR images (only "bicubic" is supported).
    #[arg(long, value_parser = ["bicubic"])]
    degrade: Option<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerId {
    Wlopt,
    Sa,
    Ga,
    Rs,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    stats: PathBuf,
    /// Quality-drop tolerance in dB ("inf" accepted).
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Candidate activation wordlengths.
    #[arg(long, default_value = "8,16")]
    wordlengths: String,
    #[arg(long, value_enum, default_value_t = OptimizerId::Wlopt)]
    optimizer: OptimizerId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation budget for sa/ga/rs; defaults to |L| + 1 parity.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Optional full visit/acceptance log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct LraArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectDreArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    lra: PathBuf,
    /// Energy concentration threshold in [0, 1].
    #[arg(long)]
    k: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BopsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Plan file providing the wordlength vector.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Explicit wordlengths, one per quantizable layer or a single
    /// uniform value (e.g. "16" or "8,16,8").
    #[arg(long)]
    wordlengths: Option<String>,
    /// Input spatial size as HxW.
    #[arg(long, default_value = "96x96")]
    hw: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 96)]
    patch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Derive LR inputs from HR images (only "bicubic" is supported).
    #[arg(long, value_parser = ["bicubic"])]
    degrade: Option<String>,
    #[arg(long, default_value = "y")]
    convention: String,
    /// Border shave in pixels; defaults to the upscale factor.
    #[arg(long)]
    shave: Option<usize>,
    #[arg(long, default_value_t = 96)]
    patch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation budget per optimizer; defaults to |L| + 1 parity.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

enum Outcome {
    Ok,
    Infeasible,
}

fn timestamp_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Serializes an artifact with a top-level timestamp field. The timestamp
/// sits outside the provenance-hashed content so byte-comparisons can
/// exclude it.
fn write_artifact<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("timestamp_ms".into(), json!(timestamp_ms()));
    }
    let text = serde_json::to_string_pretty(&v)?;
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_wordlengths(s: &str) -> Result<Vec<u8>, Error> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u8>()
                .map_err(|_| Error::InvalidArg(format!("bad wordlength '{tok}'")))
        })
        .collect()
}

fn parse_hw(s: &str) -> Result<(usize, usize), Error> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidArg(format!("--hw expects HxW, got '{s}'")))?;
    Ok((
        h.trim()
            .parse()
            .map_err(|_| Error::InvalidArg(format!("bad height '{h}'")))?,
        w.trim()
            .parse()
            .map_err(|_| Error::InvalidArg(format!("bad width '{w}'")))?,
    ))
}

fn load_dataset_for(m: &ModelGraph, args: &DatasetArgs) -> Result<Dataset, Error> {
    load_dataset(&args.images, m.upscale_factor, args.degrade.is_some())
}

fn calibration_inputs(m: &ModelGraph, ds: &Dataset) -> Result<Vec<CalibrationInput>, Error> {
    ds.entries
        .iter()
        .map(|e| {
            Ok(CalibrationInput {
                name: e.name.clone(),
                tensor: srq_core::codec::image_to_input(m, &e.lr)?,
            })
        })
        .collect()
}

fn harness<'m>(
    m: &'m ModelGraph,
    stats: CalibrationStats,
    ds: &Dataset,
) -> Result<EvalHarness<'m>, Error> {
    EvalHarness::from_dataset(m, stats, ds)
}

fn finalize_plan(
    mut plan: QuantPlan,
    m: &ModelGraph,
    result: &OptimizerResult,
    optimizer: &str,
    seed: u64,
) -> Result<QuantPlan, Error> {
    plan.epsilon = result.epsilon.is_finite().then_some(result.epsilon);
    plan.wordlength_set = vec![8, 16];
    plan.provenance.optimizer = Some(optimizer.to_string());
    plan.provenance.seed = Some(seed);
    plan.provenance.model_sha256 = Some(m.weights_sha256()?);
    plan.provenance.evaluations = Some(result.evaluations);
    plan.provenance.feasible = Some(result.feasible);
    plan.provenance.drop_db = Some(result.drop_db);
    Ok(plan)
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::GenModel(a) => {
            let m = match a.kind {
                ModelKind::Bilinear => make_analytic_model(AnalyticKind::Bilinear, a.scale)?,
                ModelKind::Bicubic => make_analytic_model(AnalyticKind::Bicubic, a.scale)?,
                ModelKind::Synthetic => {
                    make_synthetic_model(a.depth, a.channels, a.scale, a.seed)?
                }
                ModelKind::Chain => make_chain_model(a.depth, a.channels, a.scale, a.seed)?,
                ModelKind::ResidualDetail => {
                    make_residual_detail_model(a.channels, a.scale, a.seed)?
                }
            };
            m.save(&a.out)?;
            println!(
                "wrote model '{}' ({} layers, {} quantizable, x{}) to {}",
                m.name,
                m.layers.len(),
                m.quantizable_layers().len(),
                m.upscale_factor,
                a.out.display()
            );
            Ok(Outcome::Ok)
        }
        Command::Calibrate(a) => {
            let m = ModelGraph::load(&a.model)?;
            let ds = load_dataset_for(&m, &a.dataset)?;
            let inputs = calibration_inputs(&m, &ds)?;
            let stats = calibrate(&m, &inputs, a.fraction, a.seed)?;
            write_artifact(&a.out, &stats)?;
            println!(
                "calibrated {} layers over {} of {} images -> {}",
                stats.layers.len(),
                stats.files.len(),
                inputs.len(),
                a.out.display()
            );
            Ok(Outcome::Ok)
        }
        Command::Optimize(a) => {
            let m = ModelGraph::load(&a.model)?;
            let ds = load_dataset_for(&m, &a.dataset)?;
            let stats: CalibrationStats = read_json(&a.stats)?;
            let wordlengths = parse_wordlengths(&a.wordlengths)?;
            let mut h = harness(&m, stats, &ds)?;
            let layers = m.quantizable_layers().len() as u64;
            let budget = SearchBudget::evals(a.budget.unwrap_or(layers + 1));
            let result = match a.optimizer {
                OptimizerId::Wlopt => optimize_wlopt(&mut h, a.epsilon, &wordlengths)?,
                OptimizerId::Sa => optimize_sa(
                    &mut h,
                    a.epsilon,
                    &wordlengths,
                    budget,
                    a.seed,
                    SaConfig::default(),
                )?,
                OptimizerId::Ga => optimize_ga(&mut h, a.epsilon, &wordlengths, budget, a.seed)?,
                OptimizerId::Rs => optimize_rs(&mut h, a.epsilon, &wordlengths, budget, a.seed)?,
            };
            let optimizer_name = result.optimizer.clone();
            let plan = finalize_plan(
                h.plan_for(&result.wordlengths)?,
                &m,
                &result,
                &optimizer_name,
                a.seed,
            )?;
            write_artifact(&a.out, &plan)?;
            if let Some(log_path) = &a.log {
                write_artifact(log_path, &result)?;
            }
            println!(
                "{}: feasible={} drop={:.4} dB reduction={:.2}x evals={} -> {}",
                result.optimizer,
                result.feasible,
                result.drop_db,
                result.reduction_vs_max,
                result.evaluations,
                a.out.display()
            );
            if result.feasible {
                Ok(Outcome::Ok)
            } else {
                Ok(Outcome::Infeasible)
            }
        }
        Command::Lra(a) => {
            let m = ModelGraph::load(&a.model)?;
            let ds = load_dataset_for(&m, &a.dataset)?;
            let stats: CalibrationStats = read_json(&a.stats)?;
            let mut h = harness(&m, stats, &ds)?;
            let report = lra(&mut h)?;
            write_artifact(&a.out, &report)?;
            println!(
                "resilience over {} layers ({} evaluations) -> {}",
                report.entries.len(),
                report.evaluations,
                a.out.display()
            );
            for e in report.entries.iter().take(5) {
                println!("  layer {:3}  drop {:.4} dB", e.layer, e.drop_db);
            }
            Ok(Outcome::Ok)
        }
        Command::SelectDre(a) => {
            let plan: QuantPlan = read_json(&a.plan)?;
            let report: LraReport = read_json(&a.lra)?;
            let selected = select_dre_layers(&report, a.k)?;
            let mut out_plan = apply_dre(&plan, &selected)?;
            out_plan.provenance.dre_k = Some(a.k);
            write_artifact(&a.out, &out_plan)?;
            println!(
                "k={} selects {} dynamic-range layers {:?} -> {}",
                a.k,
                selected.len(),
                selected,
                a.out.display()
            );
            Ok(Outcome::Ok)
        }
        Command::Bops(a) => {
            let m = ModelGraph::load(&a.model)?;
            let n = m.quantizable_layers().len();
            let bits: Vec<u8> = if let Some(plan_path) = &a.plan {
                let plan: QuantPlan = read_json(plan_path)?;
                plan.wordlengths()
            } else if let Some(spec) = &a.wordlengths {
                let parsed = parse_wordlengths(spec)?;
                if parsed.len() == 1 {
                    vec![parsed[0]; n]
                } else {
                    parsed
                }
            } else {
                vec![16; n]
            };
            let hw = parse_hw(&a.hw)?;
            let report = get_bops(&m, &bits, hw)?;
            println!("{:>5}  {:<13} {:>12}  {:>3}  {:>14}", "layer", "kind", "ops", "b", "weighted");
            for l in &report.per_layer {
                println!(
                    "{:>5}  {:<13} {:>12}  {:>3}  {:>14}",
                    l.layer, l.kind, l.ops, l.wordlength, l.weighted
                );
            }
            println!(
                "total {} (conv {}, elementwise {})",
                report.total_weighted, report.conv_weighted, report.elementwise_weighted
            );
            if let Some(out) = &a.out {
                write_artifact(out, &report)?;
            }
            Ok(Outcome::Ok)
        }
        Command::Upscale(a) => {
            let m = ModelGraph::load(&a.model)?;
            let plan: Option<QuantPlan> = match &a.plan {
                Some(p) => Some(read_json(p)?),
                None => None,
            };
            let img = load_image(&a.input)?;
            let (out, stats) = upscale_image(&m, plan.as_ref(), &img, a.patch)?;
            save_image(&a.out, &out)?;
            println!(
                "{}x{} -> {}x{} ({} tiles, {} partitions, {} switches, {} range scans, {} clips)",
                img.width,
                img.height,
                out.width,
                out.height,
                stats.tiles,
                stats.partition_count,
                stats.switch_count,
                stats.total_dre_invocations(),
                stats.total_clips()
            );
            Ok(Outcome::Ok)
        }
        Command::Eval(a) => {
            let m = ModelGraph::load(&a.model)?;
            let plan: Option<QuantPlan> = match &a.plan {
                Some(p) => Some(read_json(p)?),
                None => None,
            };
            let ds = load_dataset(&a.dataset, m.upscale_factor, a.degrade.is_some())?;
            let convention: Convention = a.convention.parse()?;
            let shave = a.shave.unwrap_or(m.upscale_factor);
            let report =
                evaluate_dataset(&m, plan.as_ref(), &ds, convention, shave, a.patch)?;
            write_artifact(&a.out, &report)?;
            println!(
                "{} images: mean PSNR {:.4} dB, mean SSIM {:.5}, switches {} -> {}",
                report.per_image.len(),
                report.mean_psnr_db,
                report.mean_ssim,
                report.run_stats.switch_count,
                a.out.display()
            );
            Ok(Outcome::Ok)
        }
        Command::CompareOptimizers(a) => {
            let m = ModelGraph::load(&a.model)?;
            let ds = load_dataset_for(&m, &a.dataset)?;
            let stats: CalibrationStats = read_json(&a.stats)?;
            let mut h = harness(&m, stats, &ds)?;
            let wordlengths = [8u8, 16];

            let wl = optimize_wlopt(&mut h, a.epsilon, &wordlengths)?;
            let budget = SearchBudget::evals(a.budget.unwrap_or(wl.evaluations));
            h.reset_evaluations();
            let sa = optimize_sa(&mut h, a.epsilon, &wordlengths, budget, a.seed, SaConfig::default())?;
            h.reset_evaluations();
            let ga = optimize_ga(&mut h, a.epsilon, &wordlengths, budget, a.seed)?;
            h.reset_evaluations();
            let rs = optimize_rs(&mut h, a.epsilon, &wordlengths, budget, a.seed)?;

            println!(
                "{:<6} {:>8} {:>12} {:>12} {:>6}",
                "opt", "feasible", "drop dB", "reduction", "evals"
            );
            for r in [&wl, &sa, &ga, &rs] {
                println!(
                    "{:<6} {:>8} {:>12.4} {:>11.2}x {:>6}",
                    r.optimizer, r.feasible, r.drop_db, r.reduction_vs_max, r.evaluations
                );
            }
            let comparison = json!({
                "schema_version": 1,
                "tool_version": srq_core::TOOL_VERSION,
                "model_name": m.name,
                "epsilon": a.epsilon,
                "seed": a.seed,
                "budget": budget.max_evals,
                "results": [wl, sa, ga, rs],
            });
            write_artifact(&a.out, &comparison)?;
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": e.to_string() }));
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => {
            eprintln!(
                "{}",
                json!({ "error": "optimization infeasible: the maximum-wordlength plan violates the tolerance" })
            );
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
