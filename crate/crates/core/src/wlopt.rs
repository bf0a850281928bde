//! Per-layer wordlength selection under a quality-drop constraint.
//!
//! All optimizers draw calibration-set quality evaluations exclusively
//! through [`EvalHarness`], which meters them for budget parity. Quality
//! of a plan is the mean PSNR of its outputs against the calibration
//! ground truth; the drop is measured against the full-precision model,
//! or against the weight-only-quantized model when weight quantization
//! alone already costs at least the tolerance (so the tolerance governs
//! what the activation wordlengths can lose on top).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::codec::{cap_db, image_to_input, output_to_image};
use crate::cost::{get_bops, quantizable_layer_macs, CostReport};
use crate::error::{Error, Result};
use crate::metrics::{psnr, Convention, ImageBuf};
use crate::model::ModelGraph;
use crate::quant::{CalibrationStats, QuantPlan};
use crate::tensor::Tensor;

/// One calibration item: the model input and its ground-truth image.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub lr: Tensor,
    pub hr: ImageBuf,
}

/// Metered quality-evaluation harness shared by every optimizer.
pub struct EvalHarness<'m> {
    pub model: &'m ModelGraph,
    pub stats: CalibrationStats,
    items: Vec<EvalItem>,
    pub convention: Convention,
    pub shave: usize,
    evaluations: u64,
    fp_quality: Option<f64>,
    w8_quality: Option<f64>,
}

impl<'m> EvalHarness<'m> {
    pub fn new(
        model: &'m ModelGraph,
        stats: CalibrationStats,
        items: Vec<EvalItem>,
    ) -> Result<EvalHarness<'m>> {
        if items.is_empty() {
            return Err(Error::Invalid("calibration set is empty".into()));
        }
        let shave = model.upscale_factor;
        Ok(EvalHarness {
            model,
            stats,
            items,
            convention: Convention::YChannel,
            shave,
            evaluations: 0,
            fp_quality: None,
            w8_quality: None,
        })
    }

    /// Builds the harness over the calibration subset recorded in `stats`,
    /// taking LR/HR pairs from `dataset`.
    pub fn from_dataset(
        model: &'m ModelGraph,
        stats: CalibrationStats,
        dataset: &crate::codec::Dataset,
    ) -> Result<EvalHarness<'m>> {
        let mut items = Vec::new();
        for name in &stats.files {
            let entry = dataset
                .entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| {
                    Error::Dataset(format!("calibration image '{name}' not found in dataset"))
                })?;
            items.push(EvalItem {
                name: name.clone(),
                lr: image_to_input(model, &entry.lr)?,
                hr: entry.hr.clone(),
            });
        }
        EvalHarness::new(model, stats, items)
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    /// Spatial size of the first calibration input; the reference size for
    /// cost accounting and visit ordering.
    pub fn reference_hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.items[0].lr.shape();
        (h, w)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn reset_evaluations(&mut self) {
        self.evaluations = 0;
    }

    fn mean_quality(&self, plan: Option<&QuantPlan>) -> Result<f64> {
        let scores: Vec<f64> = self
            .items
            .par_iter()
            .map(|item| {
                let out = match plan {
                    Some(p) => self.model.forward_quant(&item.lr, p)?,
                    None => self.model.forward(&item.lr)?,
                };
                let img = output_to_image(&out)?;
                Ok(cap_db(psnr(&img, &item.hr, self.convention, self.shave)?))
            })
            .collect::<Result<_>>()?;
        // Fixed summation order keeps parallel runs bit-identical.
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Metered quality evaluation.
    pub fn eval_plan(&mut self, plan: &QuantPlan) -> Result<f64> {
        self.evaluations += 1;
        self.mean_quality(Some(plan))
    }

    /// Full-precision reference quality (cached, not metered).
    pub fn fp_quality(&mut self) -> Result<f64> {
        if let Some(q) = self.fp_quality {
            return Ok(q);
        }
        let q = self.mean_quality(None)?;
        self.fp_quality = Some(q);
        Ok(q)
    }

    /// Weight-only-quantized reference quality (cached, not metered).
    pub fn w8_quality(&mut self) -> Result<f64> {
        if let Some(q) = self.w8_quality {
            return Ok(q);
        }
        let plan = QuantPlan::weight_only(self.model)?;
        let q = self.mean_quality(Some(&plan))?;
        self.w8_quality = Some(q);
        Ok(q)
    }

    /// Reference quality per the tolerance rule: the full-precision model,
    /// unless weight-only quantization already drops at least `epsilon`.
    pub fn reference_quality(&mut self, epsilon: f64) -> Result<(f64, &'static str)> {
        let fp = self.fp_quality()?;
        let w8 = self.w8_quality()?;
        if fp - w8 >= epsilon {
            Ok((w8, "weight_quantized"))
        } else {
            Ok((fp, "fp32"))
        }
    }

    /// Metered quality drop of a plan against the epsilon-rule reference.
    pub fn drop_of(&mut self, plan: &QuantPlan, epsilon: f64) -> Result<f64> {
        let (reference, _) = self.reference_quality(epsilon)?;
        let q = self.eval_plan(plan)?;
        Ok(reference - q)
    }

    /// Plan for a wordlength vector with calibration-derived parameters
    /// and quantized weights.
    pub fn plan_for(&self, bits: &[u8]) -> Result<QuantPlan> {
        QuantPlan::from_wordlengths(self.model, &self.stats, bits)
    }

    /// Metered drop of a wordlength vector.
    pub fn drop_of_bits(&mut self, bits: &[u8], epsilon: f64) -> Result<f64> {
        let plan = self.plan_for(bits)?;
        self.drop_of(&plan, epsilon)
    }
}

/// Mean quality drop of `plan` over the harness' calibration set.
pub fn quality_drop(h: &mut EvalHarness, plan: &QuantPlan, epsilon: f64) -> Result<f64> {
    h.drop_of(plan, epsilon)
}

/// Evaluation budget shared across optimizers for parity.
///
/// Parity is measured in metered quality evaluations; the wall-clock cap
/// is available for long runs but off by default (wall-clock stops are
/// inherently nondeterministic).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_evals: u64,
    pub max_duration: Option<std::time::Duration>,
}

impl SearchBudget {
    pub fn evals(max_evals: u64) -> SearchBudget {
        SearchBudget {
            max_evals,
            max_duration: None,
        }
    }
}

struct BudgetClock {
    budget: SearchBudget,
    started: std::time::Instant,
}

impl BudgetClock {
    fn start(budget: SearchBudget) -> BudgetClock {
        BudgetClock {
            budget,
            started: std::time::Instant::now(),
        }
    }

    fn allows(&self, evaluations: u64) -> bool {
        if evaluations >= self.budget.max_evals {
            return false;
        }
        match self.budget.max_duration {
            Some(cap) => self.started.elapsed() < cap,
            None => true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub event: String,
    pub layer: Option<usize>,
    pub macs: Option<u64>,
    pub candidate: Option<Vec<u8>>,
    pub drop_db: Option<f64>,
    pub accepted: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub optimizer: String,
    pub wordlengths: Vec<u8>,
    pub feasible: bool,
    pub drop_db: f64,
    pub epsilon: f64,
    pub reference: String,
    pub conv_bops: u64,
    pub total_bops: u64,
    /// Conv-cost reduction relative to the uniform max-wordlength plan.
    pub reduction_vs_max: f64,
    pub evaluations: u64,
    pub log: Vec<LogEntry>,
}

fn check_wordlength_set(wordlengths: &[u8]) -> Result<()> {
    let mut sorted = wordlengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != [8, 16] {
        return Err(Error::InvalidArg(format!(
            "only the wordlength set {{8, 16}} is supported, got {wordlengths:?}"
        )));
    }
    Ok(())
}

fn cost_pair(h: &EvalHarness, bits: &[u8]) -> Result<(CostReport, CostReport)> {
    let hw = h.reference_hw();
    let all16 = get_bops(h.model, &vec![16; bits.len()], hw)?;
    let plan = get_bops(h.model, bits, hw)?;
    Ok((plan, all16))
}

fn finish_result(
    h: &mut EvalHarness,
    optimizer: &str,
    bits: Vec<u8>,
    feasible: bool,
    drop_db: f64,
    epsilon: f64,
    log: Vec<LogEntry>,
) -> Result<OptimizerResult> {
    let (plan_cost, max_cost) = cost_pair(h, &bits)?;
    let (_, reference) = h.reference_quality(epsilon)?;
    Ok(OptimizerResult {
        optimizer: optimizer.into(),
        wordlengths: bits,
        feasible,
        drop_db,
        epsilon,
        reference: reference.into(),
        conv_bops: plan_cost.conv_weighted,
        total_bops: plan_cost.total_weighted,
        reduction_vs_max: plan_cost.conv_reduction_vs(&max_cost),
        evaluations: h.evaluations(),
        log,
    })
}

/// Greedy single-shot wordlength selection.
///
/// Weights are quantized first; activations start at the maximum
/// wordlength and layers are visited once in descending order of MACs
/// (ties by ascending layer index). Each visited layer is demoted to
/// 8 bits and reverted iff the calibration drop exceeds the tolerance.
/// Exactly `|L| + 1` metered evaluations are spent (the all-16 baseline
/// plus one per layer), and the result is feasible iff the all-16
/// starting point is feasible.
pub fn optimize_wlopt(
    h: &mut EvalHarness,
    epsilon: f64,
    wordlengths: &[u8],
) -> Result<OptimizerResult> {
    check_wordlength_set(wordlengths)?;
    let layers = h.model.quantizable_layers();
    let n = layers.len();
    let mut log = Vec::new();

    let mut bits = vec![16u8; n];
    let baseline_drop = h.drop_of_bits(&bits, epsilon)?;
    let feasible = baseline_drop <= epsilon;
    log.push(LogEntry {
        event: "baseline".into(),
        layer: None,
        macs: None,
        candidate: Some(bits.clone()),
        drop_db: Some(baseline_drop),
        accepted: Some(feasible),
    });

    // Visit order: descending MACs at the reference input size, ties by
    // ascending layer index.
    let macs = quantizable_layer_macs(h.model, h.reference_hw())?;
    let mut order: Vec<(usize, usize, u64)> = macs
        .iter()
        .enumerate()
        .map(|(pos, &(layer, m))| (pos, layer, m))
        .collect();
    order.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)));

    let mut current_drop = baseline_drop;
    for &(pos, layer, m) in &order {
        bits[pos] = 8;
        let drop = h.drop_of_bits(&bits, epsilon)?;
        let keep = drop <= epsilon;
        if keep {
            current_drop = drop;
        } else {
            bits[pos] = 16;
        }
        log.push(LogEntry {
            event: "visit".into(),
            layer: Some(layer),
            macs: Some(m),
            candidate: None,
            drop_db: Some(drop),
            accepted: Some(keep),
        });
    }

    if !feasible {
        // Nothing can satisfy the constraint when the quality upper bound
        // does not; report the max-wordlength plan as the best effort.
        bits = vec![16; n];
        current_drop = baseline_drop;
    }
    finish_result(h, "wlopt", bits, feasible, current_drop, epsilon, log)
}

/// Tracks the best plans seen by a stochastic optimizer.
struct Tracker {
    epsilon: f64,
    best_feasible: Option<(Vec<u8>, f64, u64)>,
    best_drop: Option<(Vec<u8>, f64, u64)>,
}

impl Tracker {
    fn new(epsilon: f64) -> Tracker {
        Tracker {
            epsilon,
            best_feasible: None,
            best_drop: None,
        }
    }

    fn observe(&mut self, bits: &[u8], drop: f64, conv_bops: u64) {
        if drop <= self.epsilon {
            let better = match &self.best_feasible {
                None => true,
                Some((_, _, best)) => conv_bops < *best,
            };
            if better {
                self.best_feasible = Some((bits.to_vec(), drop, conv_bops));
            }
        }
        let better = match &self.best_drop {
            None => true,
            Some((_, best, _)) => drop < *best,
        };
        if better {
            self.best_drop = Some((bits.to_vec(), drop, conv_bops));
        }
    }

    fn take(self) -> (Vec<u8>, f64, bool) {
        match self.best_feasible {
            Some((bits, drop, _)) => (bits, drop, true),
            None => {
                let (bits, drop, _) = self.best_drop.expect("at least one evaluation");
                (bits, drop, false)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SaConfig {
    /// Initial temperature.
    pub t0: f64,
    /// Cooling rate: t_i = t0 * exp(-rate * i).
    pub cooling_rate: f64,
}

impl Default for SaConfig {
    fn default() -> SaConfig {
        SaConfig {
            t0: 1.0,
            cooling_rate: 0.05,
        }
    }
}

fn conv_bops_of(h: &EvalHarness, bits: &[u8]) -> Result<u64> {
    Ok(get_bops(h.model, bits, h.reference_hw())?.conv_weighted)
}

/// Simulated annealing baseline.
///
/// Starts from all-16; a neighbor flips one uniformly random layer's
/// wordlength. Energy is the conv cost relative to all-16 plus a penalty
/// that ranks every infeasible plan above every feasible one. Worse moves
/// are accepted with probability exp(-delta / t_i).
pub fn optimize_sa(
    h: &mut EvalHarness,
    epsilon: f64,
    wordlengths: &[u8],
    budget: SearchBudget,
    seed: u64,
    config: SaConfig,
) -> Result<OptimizerResult> {
    check_wordlength_set(wordlengths)?;
    let n = h.model.quantizable_layers().len();
    if budget.max_evals < n as u64 + 1 {
        return Err(Error::InvalidArg(format!(
            "budget {} below parity minimum {}",
            budget.max_evals,
            n + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all16_bops = conv_bops_of(h, &vec![16; n])? as f64;
    let energy = |drop: f64, conv_bops: u64| -> f64 {
        let rel = conv_bops as f64 / all16_bops;
        if drop <= epsilon {
            rel
        } else {
            rel + 1.0 + (drop - epsilon)
        }
    };

    let mut tracker = Tracker::new(epsilon);
    let mut log = Vec::new();

    let mut cur = vec![16u8; n];
    let cur_drop = h.drop_of_bits(&cur, epsilon)?;
    let mut cur_bops = conv_bops_of(h, &cur)?;
    let mut cur_energy = energy(cur_drop, cur_bops);
    tracker.observe(&cur, cur_drop, cur_bops);
    log.push(LogEntry {
        event: "baseline".into(),
        layer: None,
        macs: None,
        candidate: Some(cur.clone()),
        drop_db: Some(cur_drop),
        accepted: Some(true),
    });

    let clock = BudgetClock::start(budget);
    let mut i = 0u64;
    while clock.allows(h.evaluations()) {
        i += 1;
        let flip = rng.gen_range(0..n);
        let mut cand = cur.clone();
        cand[flip] = if cand[flip] == 8 { 16 } else { 8 };
        let drop = h.drop_of_bits(&cand, epsilon)?;
        let bops = conv_bops_of(h, &cand)?;
        let e = energy(drop, bops);
        tracker.observe(&cand, drop, bops);
        let t = config.t0 * (-config.cooling_rate * i as f64).exp();
        let delta = e - cur_energy;
        let accept = delta <= 0.0 || (t > 0.0 && rng.gen::<f64>() < (-delta / t).exp());
        log.push(LogEntry {
            event: "proposal".into(),
            layer: Some(flip),
            macs: None,
            candidate: Some(cand.clone()),
            drop_db: Some(drop),
            accepted: Some(accept),
        });
        if accept {
            cur = cand;
            cur_energy = e;
            cur_bops = bops;
        }
    }
    let _ = cur_bops;
    let (bits, drop, feasible) = tracker.take();
    finish_result(h, "sa", bits, feasible, drop, epsilon, log)
}

/// Genetic-algorithm baseline.
///
/// Population `max(2, ceil(0.25 * |L|))`, uniform crossover, per-gene
/// mutation probability `1/|L|`, elitism of one; fitness ranks feasible
/// plans by conv cost and every infeasible plan strictly below all
/// feasible ones.
pub fn optimize_ga(
    h: &mut EvalHarness,
    epsilon: f64,
    wordlengths: &[u8],
    budget: SearchBudget,
    seed: u64,
) -> Result<OptimizerResult> {
    check_wordlength_set(wordlengths)?;
    let n = h.model.quantizable_layers().len();
    if budget.max_evals < n as u64 + 1 {
        return Err(Error::InvalidArg(format!(
            "budget {} below parity minimum {}",
            budget.max_evals,
            n + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop_size = ((0.25 * n as f64).ceil() as usize).max(2);
    let mut tracker = Tracker::new(epsilon);
    let mut log = Vec::new();

    #[derive(Clone)]
    struct Individual {
        bits: Vec<u8>,
        drop: f64,
        conv_bops: u64,
    }
    // Feasible beats infeasible; feasible ranks by cost then drop;
    // infeasible ranks by drop.
    let rank = |a: &Individual, eps: f64| -> (u8, u64, f64) {
        if a.drop <= eps {
            (0, a.conv_bops, a.drop)
        } else {
            (1, u64::MAX, a.drop)
        }
    };

    let evaluate = |h: &mut EvalHarness,
                        bits: Vec<u8>,
                        tracker: &mut Tracker,
                        log: &mut Vec<LogEntry>|
     -> Result<Individual> {
        let drop = h.drop_of_bits(&bits, epsilon)?;
        let conv_bops = conv_bops_of(h, &bits)?;
        tracker.observe(&bits, drop, conv_bops);
        log.push(LogEntry {
            event: "evaluate".into(),
            layer: None,
            macs: None,
            candidate: Some(bits.clone()),
            drop_db: Some(drop),
            accepted: None,
        });
        Ok(Individual {
            bits,
            drop,
            conv_bops,
        })
    };

    // Initial population: the all-16 individual plus random vectors.
    let clock = BudgetClock::start(budget);
    let mut population: Vec<Individual> = Vec::with_capacity(pop_size);
    for i in 0..pop_size {
        if !clock.allows(h.evaluations()) {
            break;
        }
        let bits: Vec<u8> = if i == 0 {
            vec![16; n]
        } else {
            (0..n).map(|_| if rng.gen::<bool>() { 8 } else { 16 }).collect()
        };
        population.push(evaluate(h, bits, &mut tracker, &mut log)?);
    }

    while clock.allows(h.evaluations()) {
        population.sort_by(|a, b| {
            rank(a, epsilon)
                .partial_cmp(&rank(b, epsilon))
                .expect("finite ranks")
        });
        let elite = population[0].clone();
        let mut next = vec![elite];
        while next.len() < pop_size && clock.allows(h.evaluations()) {
            let tournament = |rng: &mut ChaCha8Rng| -> Vec<u8> {
                let a = rng.gen_range(0..population.len());
                let b = rng.gen_range(0..population.len());
                let pick = if rank(&population[a], epsilon) <= rank(&population[b], epsilon) {
                    a
                } else {
                    b
                };
                population[pick].bits.clone()
            };
            let pa = tournament(&mut rng);
            let pb = tournament(&mut rng);
            let mut child: Vec<u8> = pa
                .iter()
                .zip(&pb)
                .map(|(&x, &y)| if rng.gen::<bool>() { x } else { y })
                .collect();
            for gene in child.iter_mut() {
                if rng.gen::<f64>() < 1.0 / n as f64 {
                    *gene = if *gene == 8 { 16 } else { 8 };
                }
            }
            next.push(evaluate(h, child, &mut tracker, &mut log)?);
        }
        // Top up a partial generation with survivors (no extra
        // evaluations) so the population size stays fixed.
        let mut idx = 1;
        while next.len() < pop_size {
            next.push(population[idx.min(population.len() - 1)].clone());
            idx += 1;
        }
        population = next;
    }

    let (bits, drop, feasible) = tracker.take();
    finish_result(h, "ga", bits, feasible, drop, epsilon, log)
}

/// Random-search baseline: uniform random wordlength vectors.
pub fn optimize_rs(
    h: &mut EvalHarness,
    epsilon: f64,
    wordlengths: &[u8],
    budget: SearchBudget,
    seed: u64,
) -> Result<OptimizerResult> {
    check_wordlength_set(wordlengths)?;
    let n = h.model.quantizable_layers().len();
    if budget.max_evals < n as u64 + 1 {
        return Err(Error::InvalidArg(format!(
            "budget {} below parity minimum {}",
            budget.max_evals,
            n + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clock = BudgetClock::start(budget);
    let mut tracker = Tracker::new(epsilon);
    let mut log = Vec::new();
    while clock.allows(h.evaluations()) {
        let bits: Vec<u8> = (0..n).map(|_| if rng.gen::<bool>() { 8 } else { 16 }).collect();
        let drop = h.drop_of_bits(&bits, epsilon)?;
        let bops = conv_bops_of(h, &bits)?;
        tracker.observe(&bits, drop, bops);
        log.push(LogEntry {
            event: "sample".into(),
            layer: None,
            macs: None,
            candidate: Some(bits.clone()),
            drop_db: Some(drop),
            accepted: None,
        });
    }
    let (bits, drop, feasible) = tracker.take();
    finish_result(h, "rs", bits, feasible, drop, epsilon, log)
}
