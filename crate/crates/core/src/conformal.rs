//! Split conformal calibration and prediction, single- and multi-label.

use std::collections::BTreeMap;
use std::path::Path;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::synthetic::{derive_rng, draw_confidence_weights, draw_set_weights, OptionShape, SyntheticModelParams};
use crate::backends::LabelConfidences;
use crate::domain::{LabelSet, OptionLabel, PredictionMode};
use crate::error::{Error, Result};

/// Set-level confidence ĥ for every non-empty subset of the candidates.
pub type SetConfidences = BTreeMap<LabelSet, f64>;

/// The powerset grows as `2^K − 1`; larger candidate lists are rejected.
pub const MAX_POWERSET_OPTIONS: usize = 10;

/// Grid spacing used by [`choose_epsilon_hat`].
pub const EPSILON_GRID_STEP: f64 = 1e-4;

// Products like (N+1)(1−ε̂) that should be integers often land a few ulps off.
const INTEGER_SNAP: f64 = 1e-9;

fn snap_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < INTEGER_SNAP {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn snap_floor(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < INTEGER_SNAP {
        r as usize
    } else {
        x.floor() as usize
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::precondition(format!("ε̂ must lie in (0, 1), got {eps}")))
    }
}

/// `s = 1 − f̂(true_label)`.
pub fn nonconformity(confidences: &LabelConfidences, true_label: OptionLabel) -> Result<f64> {
    confidences
        .get(true_label)
        .map(|p| 1.0 - p)
        .ok_or_else(|| Error::precondition(format!("label {true_label} has no confidence")))
}

/// 1-indexed rank `⌈(n+1)(1−ε̂)⌉` of the calibration quantile.
pub fn quantile_rank(n: usize, epsilon_hat: f64) -> usize {
    snap_ceil((n as f64 + 1.0) * (1.0 - epsilon_hat))
}

/// The `⌈(n+1)(1−ε̂)⌉`-th smallest score, or 1.0 when that rank exceeds `n`.
pub fn calibrate(scores: &[f64], epsilon_hat: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::precondition("calibration needs at least one score"));
    }
    check_epsilon(epsilon_hat)?;
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::precondition(format!("score {s} is outside [0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, epsilon_hat))
}

fn quantile_of_sorted(sorted: &[f64], epsilon_hat: f64) -> f64 {
    let k = quantile_rank(sorted.len(), epsilon_hat);
    if k > sorted.len() {
        1.0
    } else {
        sorted[k.max(1) - 1]
    }
}

/// `{ y : f̂(y) ≥ 1 − q̂ }`. May be empty.
///
/// The test is evaluated in score space, `1 − f̂(y) ≤ q̂`, which is the same
/// arithmetic that produced the calibration scores: a label whose score
/// equals q̂ is always included, with no rounding in `1 − q̂` in between.
pub fn predict_set(confidences: &LabelConfidences, q_hat: f64) -> LabelSet {
    confidences.iter().filter(|(_, p)| within(*p, q_hat)).map(|(l, _)| l).collect()
}

fn within(confidence: f64, q_hat: f64) -> bool {
    1.0 - confidence <= q_hat
}

/// Same quantile law as [`calibrate`], over set-level scores `1 − ĥ(G)`.
pub fn multilabel_calibrate(scores: &[f64], epsilon_hat: f64) -> Result<f64> {
    calibrate(scores, epsilon_hat)
}

/// All non-empty subsets of `labels`, ordered by bitmask.
pub fn powerset(labels: &[OptionLabel]) -> Result<Vec<LabelSet>> {
    if labels.len() > MAX_POWERSET_OPTIONS {
        return Err(Error::Capacity {
            requested: labels.len(),
            max: MAX_POWERSET_OPTIONS,
        });
    }
    Ok((1..1usize << labels.len())
        .map(|mask| {
            labels
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, l)| *l)
                .collect()
        })
        .collect())
}

/// Every subset with `ĥ ≥ 1 − q̂` (tested as in [`predict_set`]), in the
/// map's order.
///
/// The domain must be exactly the non-empty powerset of the labels it
/// mentions.
pub fn multilabel_predict(set_confidences: &SetConfidences, q_hat: f64) -> Result<Vec<LabelSet>> {
    let labels: LabelSet = set_confidences.keys().flatten().copied().collect();
    if labels.len() > MAX_POWERSET_OPTIONS {
        return Err(Error::Capacity {
            requested: labels.len(),
            max: MAX_POWERSET_OPTIONS,
        });
    }
    let expected = (1usize << labels.len()) - 1;
    if set_confidences.contains_key(&LabelSet::new()) || set_confidences.len() != expected {
        return Err(Error::precondition(format!(
            "set confidences cover {} subsets; the non-empty powerset of {} labels has {expected}",
            set_confidences.len(),
            labels.len()
        )));
    }
    Ok(set_confidences
        .iter()
        .filter(|(_, h)| within(**h, q_hat))
        .map(|(s, _)| s.clone())
        .collect())
}

// ---------------------------------------------------------------------------
// Beta distribution

/// Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Quantile function of Beta(a, b): Newton steps kept inside a shrinking
/// bisection bracket.
pub fn beta_inv(a: f64, b: f64, p: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta shape parameters must be positive");
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let lb = ln_beta(a, b);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x = a / (a + b);
    for _ in 0..300 {
        let f = regularized_incomplete_beta(a, b, x) - p;
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - lb).exp();
        let mut next = x - f / density;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= f64::EPSILON * hi {
            return next;
        }
        x = next;
    }
    x
}

/// `l = ⌊(n+1)ε̂⌋`.
pub fn coverage_rank(n: usize, epsilon_hat: f64) -> usize {
    snap_floor((n as f64 + 1.0) * epsilon_hat)
}

/// δ-quantile of the conditional coverage distribution Beta(n+1−l, l).
/// Exactly 1.0 when `l = 0`.
pub fn coverage_lower_bound(n: usize, epsilon_hat: f64, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::precondition("calibration size must be positive"));
    }
    check_epsilon(epsilon_hat)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::precondition(format!("δ must lie in (0, 1), got {delta}")));
    }
    let l = coverage_rank(n, epsilon_hat);
    if l == 0 {
        return Ok(1.0);
    }
    Ok(beta_inv((n + 1 - l) as f64, l as f64, delta))
}

/// Largest grid ε̂ whose coverage bound still reaches `target_success`.
///
/// Grid points with `⌊(n+1)ε̂⌋ = 0` are skipped: there q̂ is clamped to 1 and
/// every candidate is always returned, so the bound of 1 says nothing.
pub fn choose_epsilon_hat(target_success: f64, n: usize, delta: f64) -> Result<f64> {
    if !(target_success > 0.0 && target_success < 1.0) {
        return Err(Error::precondition(format!("target success must lie in (0, 1), got {target_success}")));
    }
    if n == 0 {
        return Err(Error::precondition("calibration size must be positive"));
    }
    let steps = (1.0 / EPSILON_GRID_STEP).round() as usize;
    let eps_at = |j: usize| j as f64 / steps as f64;
    let ok = |j: usize| -> Result<bool> { Ok(coverage_lower_bound(n, eps_at(j), delta)? >= target_success) };
    let first = (1..steps).find(|j| coverage_rank(n, eps_at(*j)) >= 1).unwrap_or(steps);
    if first >= steps || !ok(first)? {
        return Err(Error::Infeasible {
            target: target_success,
            n,
            delta,
        });
    }
    // The bound is non-increasing in ε̂: binary search for the last feasible index.
    let (mut lo, mut hi) = (first, steps - 1);
    if ok(hi)? {
        return Ok(eps_at(hi));
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    debug!("ε̂ = {} for target {target_success}, n = {n}, δ = {delta}", eps_at(lo));
    Ok(eps_at(lo))
}

// ---------------------------------------------------------------------------
// Calibration artifacts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// ε̂ = 1 − target success.
    Fixed,
    /// ε̂ chosen so the δ-quantile of coverage reaches the target.
    DeltaAdjusted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub q_hat: f64,
    pub epsilon_hat: f64,
    pub n: usize,
    pub delta: Option<f64>,
    pub target_success: Option<f64>,
    pub epsilon_mode: EpsilonMode,
    /// `conformal_single` scores `1 − f̂(z)`; `conformal_multi` scores `1 − ĥ(G)`.
    pub mode: PredictionMode,
    pub sorted_scores: Vec<f64>,
    pub template_version: String,
    pub backend_id: String,
}

impl CalibrationResult {
    pub fn from_scores(scores: &[f64], epsilon_hat: f64, mode: PredictionMode) -> Result<Self> {
        if mode == PredictionMode::Direct {
            return Err(Error::precondition("direct prediction does not use calibration"));
        }
        let q_hat = calibrate(scores, epsilon_hat)?;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            q_hat,
            epsilon_hat,
            n: scores.len(),
            delta: None,
            target_success: None,
            epsilon_mode: EpsilonMode::Fixed,
            mode,
            sorted_scores: sorted,
            template_version: crate::prompting::template_version().to_string(),
            backend_id: String::new(),
        })
    }

    /// Re-derives q̂ at another ε̂ from the stored scores.
    pub fn with_epsilon(&self, epsilon_hat: f64) -> Result<Self> {
        check_epsilon(epsilon_hat)?;
        Ok(Self {
            q_hat: quantile_of_sorted(&self.sorted_scores, epsilon_hat),
            epsilon_hat,
            ..self.clone()
        })
    }

    pub fn check_template(&self, live: &str) -> Result<()> {
        if self.template_version == live {
            Ok(())
        } else {
            Err(Error::TemplateVersionMismatch {
                artifact: self.template_version.clone(),
                live: live.to_string(),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        if r.sorted_scores.len() != r.n {
            return Err(Error::Schema(format!(
                "calibration artifact declares n = {} but stores {} scores",
                r.n,
                r.sorted_scores.len()
            )));
        }
        Ok(r)
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo coverage checks

/// Parameters of a synthetic coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSimulation {
    pub n: usize,
    pub epsilon_hat: f64,
    pub seed: u64,
    pub model: SyntheticModelParams,
    /// Candidate options per synthetic scenario.
    pub options: usize,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
}

impl CoverageSimulation {
    pub fn new(n: usize, epsilon_hat: f64, seed: u64) -> Self {
        Self {
            n,
            epsilon_hat,
            seed,
            model: SyntheticModelParams {
                seed,
                valid_concentration: 4.0,
                invalid_concentration: 1.0,
                escape_mass: 0.0,
                noise_scale: 0.3,
            },
            options: 4,
            workers: crate::exec::cpu_workers(),
        }
    }

    fn check(&self, multi: bool) -> Result<()> {
        check_epsilon(self.epsilon_hat)?;
        self.model.validate()?;
        if self.n == 0 || self.options < 2 {
            return Err(Error::precondition("simulation needs n ≥ 1 and at least two options"));
        }
        let cap = if multi { MAX_POWERSET_OPTIONS } else { crate::domain::MAX_OPTIONS };
        if self.options > cap {
            return Err(Error::Capacity {
                requested: self.options,
                max: cap,
            });
        }
        Ok(())
    }

    /// One exchangeable scenario: one or two valid options among `options`.
    /// Single-label draws score the intent, multi-label draws score the
    /// valid set G.
    fn draw<R: Rng>(&self, rng: &mut R, multi: bool) -> Draw {
        let k = self.options;
        let labels = || (0..k).map(|i| OptionLabel::from_index(i).expect("bounded"));
        let valid_count = rng.random_range(1..=2);
        let valid: Vec<usize> = rand::seq::index::sample(rng, k, valid_count).into_vec();
        if multi {
            let truth_mask = valid.iter().fold(0usize, |m, i| m | (1 << i));
            let probs = draw_set_weights(rng, k, truth_mask, &self.model);
            let sets = powerset(&labels().collect::<Vec<_>>()).expect("bounded");
            let truth = sets[truth_mask - 1].clone();
            Draw::Multi {
                sets: sets.into_iter().zip(probs).collect(),
                truth,
            }
        } else {
            let shapes: Vec<OptionShape> = (0..k)
                .map(|i| OptionShape {
                    valid: valid.contains(&i),
                    escape: false,
                })
                .collect();
            let probs = draw_confidence_weights(rng, &shapes, &self.model);
            let intent = OptionLabel::from_index(valid[rng.random_range(0..valid.len())]).expect("bounded");
            let conf = LabelConfidences::from_weights(labels().zip(probs).collect()).expect("draws are normalized");
            Draw::Single { conf, intent }
        }
    }

    fn calibrated_q<R: Rng>(&self, rng: &mut R, multi: bool) -> f64 {
        let scores: Vec<f64> = (0..self.n).map(|_| self.draw(rng, multi).score()).collect();
        calibrate(&scores, self.epsilon_hat).expect("checked inputs")
    }
}

enum Draw {
    Single { conf: LabelConfidences, intent: OptionLabel },
    Multi { sets: SetConfidences, truth: LabelSet },
}

impl Draw {
    fn score(&self) -> f64 {
        match self {
            Draw::Single { conf, intent } => nonconformity(conf, *intent).expect("intent is a label"),
            Draw::Multi { sets, truth } => 1.0 - sets[truth],
        }
    }

    /// Whether the truth lands in the prediction set at `q_hat`.
    fn covered(&self, q_hat: f64) -> bool {
        match self {
            Draw::Single { conf, intent } => predict_set(conf, q_hat).contains(intent),
            Draw::Multi { sets, truth } => multilabel_predict(sets, q_hat).expect("full powerset").contains(truth),
        }
    }
}

fn parallel_map<T: Send>(count: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let idx: Vec<usize> = (0..count).collect();
    crate::exec::map_ordered(&idx, workers, |_, i| f(*i))
}

/// Coverage over independent calibrate-then-test-on-one trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCoverageReport {
    pub trials: usize,
    pub covered: usize,
    pub rate: f64,
    /// `1 − ε̂ − 3·√(ε̂(1−ε̂)/T)`.
    pub floor: f64,
    pub passed: bool,
}

pub fn simulate_marginal_coverage(sim: &CoverageSimulation, trials: usize, multi: bool) -> Result<MarginalCoverageReport> {
    sim.check(multi)?;
    if trials == 0 {
        return Err(Error::precondition("at least one trial is required"));
    }
    let hits = parallel_map(trials, sim.workers, |t| {
        let mut rng = derive_rng(sim.seed, "marginal-coverage", &t.to_string());
        let q_hat = sim.calibrated_q(&mut rng, multi);
        sim.draw(&mut rng, multi).covered(q_hat)
    });
    let covered = hits.iter().filter(|h| **h).count();
    let rate = covered as f64 / trials as f64;
    let eps = sim.epsilon_hat;
    let floor = 1.0 - eps - 3.0 * (eps * (1.0 - eps) / trials as f64).sqrt();
    Ok(MarginalCoverageReport {
        trials,
        covered,
        rate,
        floor,
        passed: rate >= floor,
    })
}

/// Tolerance on mean coverage and on the δ-quantile.
pub const COVERAGE_TOLERANCE: f64 = 0.01;

/// Per-calibration coverage across independent calibrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n: usize,
    pub epsilon_hat: f64,
    pub delta: f64,
    pub trials: usize,
    pub tests_per_trial: usize,
    pub multi_label: bool,
    pub mean_coverage: f64,
    /// `⌈(n+1)(1−ε̂)⌉/(n+1)`, capped at 1.
    pub expected_coverage: f64,
    /// The `⌈δT⌉`-th smallest per-trial coverage.
    pub delta_quantile: f64,
    /// δ-quantile of Beta(n+1−l, l).
    pub lower_bound: f64,
    pub mean_ok: bool,
    pub quantile_ok: bool,
    pub coverages: Vec<f64>,
}

impl CoverageReport {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.quantile_ok
    }
}

/// `trials` calibrations on fresh draws, each tested on `tests_per_trial`
/// fresh draws.
pub fn simulate_coverage(sim: &CoverageSimulation, trials: usize, tests_per_trial: usize, delta: f64, multi: bool) -> Result<CoverageReport> {
    sim.check(multi)?;
    if trials == 0 || tests_per_trial == 0 {
        return Err(Error::precondition("trials and tests per trial must be positive"));
    }
    let lower_bound = coverage_lower_bound(sim.n, sim.epsilon_hat, delta)?;
    let coverages = parallel_map(trials, sim.workers, |t| {
        let mut rng = derive_rng(sim.seed, "coverage-trial", &t.to_string());
        let q_hat = sim.calibrated_q(&mut rng, multi);
        let hits = (0..tests_per_trial).filter(|_| sim.draw(&mut rng, multi).covered(q_hat)).count();
        hits as f64 / tests_per_trial as f64
    });
    let mean_coverage = coverages.iter().sum::<f64>() / trials as f64;
    let expected_coverage = (quantile_rank(sim.n, sim.epsilon_hat) as f64 / (sim.n as f64 + 1.0)).min(1.0);
    let mut sorted = coverages.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((delta * trials as f64).ceil() as usize).clamp(1, trials);
    let delta_quantile = sorted[rank - 1];
    Ok(CoverageReport {
        n: sim.n,
        epsilon_hat: sim.epsilon_hat,
        delta,
        trials,
        tests_per_trial,
        multi_label: multi,
        mean_coverage,
        expected_coverage,
        delta_quantile,
        lower_bound,
        mean_ok: (mean_coverage - expected_coverage).abs() <= COVERAGE_TOLERANCE,
        quantile_ok: delta_quantile >= lower_bound - COVERAGE_TOLERANCE,
        coverages,
    })
}
