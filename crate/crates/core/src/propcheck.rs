//! Numerical checks of the collapse, non-collapse and gradient-bound properties of
//! the two loss placements, and the gradient-versus-confidence curves at `c = 2`.
//!
//! Every check re-derives the gradients it relies on by central differences and fails
//! if they disagree, so a broken gradient cannot produce a passing verdict.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{self, BoundProvenance, LossFn, LossKind};
use crate::numerics::{
    self, finite_difference_grad, jacobian_vec_from_probs, l1_norm, softmax, ProbVec, RngState,
};
use crate::permlayer::{mix_apply, mix_grad};
use crate::trainer::Variant;
use crate::{Error, Result};

/// Relative tolerance for the in-check finite-difference comparisons.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for those comparisons (absolute error allowed near zero).
const FD_FLOOR: f64 = 1e-3;
/// Factor applied to analytic gradients when the corruption hook is on.
const CORRUPTION: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Stop when the Euclidean gradient norm falls below this.
    pub tolerance: f64,
    /// Iteration budget for the whole solve, split evenly across the starts.
    pub max_iterations: usize,
    /// Total starts: the first from `alpha = 0`, the rest random.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-10,
            max_iterations: 100_000,
            restarts: 20,
            seed: 0x1a7e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSolveResult {
    pub alpha_star: Vec<f64>,
    /// Inner loss at `alpha_star`.
    pub loss: f64,
    /// Inner loss at `alpha = 0`.
    pub initial_loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Inner loss of one placement as a function of `alpha`.
fn inner_value(variant: Variant, loss: LossKind, alpha: &[f64], y: usize, f: &[f64]) -> f64 {
    let s = softmax(alpha).expect("finite alpha");
    let target = one_hot(alpha.len(), y);
    match variant {
        Variant::PermutePrediction => losses::value_raw(loss, &mix_apply(&s, y, f), &target),
        _ => losses::value_raw(loss, f, &s),
    }
}

/// Analytic `grad_alpha` of [`inner_value`].
fn inner_grad(variant: Variant, loss: LossKind, alpha: &[f64], y: usize, f: &[f64]) -> Vec<f64> {
    let s = softmax(alpha).expect("finite alpha");
    match variant {
        Variant::PermutePrediction => {
            let out = mix_apply(&s, y, f);
            let u = losses::grad_p_raw(loss, &out, &one_hot(alpha.len(), y));
            mix_grad(&s, y, f, &u)
        }
        _ => jacobian_vec_from_probs(&s, &losses::grad_q_raw(loss, f, &s)),
    }
}

fn one_hot(c: usize, y: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    v[y] = 1.0;
    v
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `argmin_alpha` of the inner loss for one sample with default [`SolveOptions`].
pub fn solve_inner_alpha(
    variant: Variant,
    loss: LossKind,
    prediction: &ProbVec,
    y_tilde: usize,
) -> Result<InnerSolveResult> {
    solve_inner_alpha_with(variant, loss, prediction, y_tilde, &SolveOptions::default())
}

/// For the label placement the minimizer is `softmax(alpha*) = prediction`, taken
/// in closed form as the centred log-prediction; this requires a loss with the
/// zero-iff-equal property. For the prediction placement the problem is solved by
/// gradient descent with backtracking from several starts, keeping the lowest loss.
pub fn solve_inner_alpha_with(
    variant: Variant,
    loss: LossKind,
    prediction: &ProbVec,
    y_tilde: usize,
    opts: &SolveOptions,
) -> Result<InnerSolveResult> {
    let c = prediction.len();
    if y_tilde >= c {
        return Err(Error::Domain(format!(
            "label {y_tilde} out of range for {c} classes"
        )));
    }
    let f = prediction.as_slice();
    let zero = vec![0.0; c];
    let initial_loss = inner_value(variant, loss, &zero, y_tilde, f);
    match variant {
        Variant::PermuteLabel => {
            if !loss.vanishes_only_on_target() {
                return Err(Error::Domain(format!(
                    "{loss} has no soft-label minimizer; the closed form needs a loss that vanishes iff p = q"
                )));
            }
            if f.iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain("prediction must be strictly interior".into()));
            }
            let logs: Vec<f64> = f.iter().map(|v| v.ln()).collect();
            let mean = logs.iter().sum::<f64>() / c as f64;
            let alpha: Vec<f64> = logs.iter().map(|v| v - mean).collect();
            let s = softmax(&alpha)?;
            let gap = s
                .iter()
                .zip(f)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap > 1e-10 {
                return Err(Error::Oracle(format!(
                    "closed-form soft label misses the prediction by {gap}"
                )));
            }
            let grad = inner_grad(variant, loss, &alpha, y_tilde, f);
            Ok(InnerSolveResult {
                loss: inner_value(variant, loss, &alpha, y_tilde, f),
                alpha_star: alpha,
                initial_loss,
                grad_norm: norm2(&grad),
                iterations: 0,
                converged: true,
            })
        }
        Variant::PermutePrediction => {
            let base = RngState::seed_from_u64(opts.seed);
            let mut best: Option<InnerSolveResult> = None;
            let mut iterations = 0;
            let starts = opts.restarts.max(1);
            let per_start = opts.max_iterations.div_ceil(starts);
            for r in 0..starts {
                let start: Vec<f64> = if r == 0 {
                    zero.clone()
                } else {
                    let mut rng = base.fork(r as u64);
                    (0..c)
                        .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                let run = descend(loss, y_tilde, f, start, opts.tolerance, per_start);
                iterations += run.iterations;
                let better = match &best {
                    None => true,
                    Some(b) => {
                        run.loss < b.loss || (run.loss == b.loss && run.converged && !b.converged)
                    }
                };
                if better {
                    best = Some(run);
                }
            }
            let mut best = best.expect("at least one start");
            best.initial_loss = initial_loss;
            best.iterations = iterations;
            Ok(best)
        }
        Variant::PlainCeBaseline => Err(Error::Domain(
            "the plain baseline has no permutation parameters".into(),
        )),
    }
}

const STALL_WINDOW: usize = 1000;
const STALL_RTOL: f64 = 1e-9;

/// Gradient descent with Armijo backtracking; the step doubles after each success.
/// Gives up early once a window of iterations improves the loss by less than
/// `STALL_RTOL` relative.
fn descend(
    loss: LossKind,
    y: usize,
    f: &[f64],
    start: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> InnerSolveResult {
    let variant = Variant::PermutePrediction;
    let mut alpha = start;
    let mut value = inner_value(variant, loss, &alpha, y, f);
    let mut grad = inner_grad(variant, loss, &alpha, y, f);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut checkpoint = value;
    'outer: while iterations < max_iterations {
        let gn2: f64 = grad.iter().map(|g| g * g).sum();
        if gn2.sqrt() < tolerance {
            converged = true;
            break;
        }
        if iterations > 0 && iterations % STALL_WINDOW == 0 {
            // minimizer at infinity: the gradient decays but the loss no longer moves
            if checkpoint - value <= STALL_RTOL * value.abs() {
                break;
            }
            checkpoint = value;
        }
        iterations += 1;
        loop {
            let cand: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let cand_value = inner_value(variant, loss, &cand, y, f);
            if cand_value <= value - 1e-4 * step * gn2 {
                alpha = cand;
                value = cand_value;
                grad = inner_grad(variant, loss, &alpha, y, f);
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                // no representable decrease left
                break 'outer;
            }
        }
    }
    if !converged && norm2(&grad) < tolerance {
        converged = true;
    }
    InnerSolveResult {
        grad_norm: norm2(&grad),
        alpha_star: alpha,
        loss: value,
        initial_loss: value,
        iterations,
        converged,
    }
}

/// Lower bound on `l(P_bar f, e_y)` over all `alpha`, implied by `[P_bar f]_y <= max_j f_j`.
pub fn prediction_loss_lower_bound(loss: LossKind, classes: usize, f_max: f64) -> f64 {
    let gap = 1.0 - f_max;
    match loss {
        // the off-label mass 1 - out_y is best spread evenly over c - 1 entries
        LossKind::SquaredL2 => gap * gap * classes as f64 / (classes as f64 - 1.0),
        LossKind::CrossEntropy | LossKind::KlDivergence => -f_max.ln(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        })
    }
}

/// Which gradient-norm constant a bound check used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundLabel {
    AnalyticM,
    EmpiricalM,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub loss: LossKind,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundLabel>,
    pub trials: usize,
    pub metrics: BTreeMap<String, f64>,
    /// First failing case, when the check failed.
    pub witness: Option<String>,
    pub note: Option<String>,
}

impl CheckReport {
    fn new(check: &str, loss: LossKind, trials: usize) -> Self {
        CheckReport {
            check: check.to_string(),
            loss,
            status: Status::Pass,
            bound: None,
            trials,
            metrics: BTreeMap::new(),
            witness: None,
            note: None,
        }
    }

    fn fail(&mut self, witness: String) {
        if self.status != Status::Fail {
            self.status = Status::Fail;
            self.witness = Some(witness);
        }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// One line: status, check, loss, then the metrics.
    pub fn summary(&self) -> String {
        let mut line = format!("{} {} [{}]", self.status, self.check, self.loss);
        if let Some(b) = self.bound {
            line.push_str(match b {
                BoundLabel::AnalyticM => " analytic-M",
                BoundLabel::EmpiricalM => " empirical-M",
            });
        }
        line.push_str(&format!(" trials={}", self.trials));
        for (k, v) in &self.metrics {
            line.push_str(&format!(" {k}={v:.3e}"));
        }
        if let Some(w) = &self.witness {
            line.push_str(&format!(" witness: {w}"));
        }
        if let Some(n) = &self.note {
            line.push_str(&format!(" ({n})"));
        }
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Negative-control hook: scales every analytic gradient so the built-in
    /// finite-difference validation must fail.
    pub corrupt_gradient: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            trials: 500,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

impl CheckOptions {
    fn gradient(
        &self,
        variant: Variant,
        loss: LossKind,
        alpha: &[f64],
        y: usize,
        f: &[f64],
    ) -> Vec<f64> {
        let mut g = inner_grad(variant, loss, alpha, y, f);
        if self.corrupt_gradient {
            g.iter_mut().for_each(|v| *v *= CORRUPTION);
        }
        g
    }

    /// Analytic gradient at `alpha` together with its relative error against central differences.
    fn validated_gradient(
        &self,
        variant: Variant,
        loss: LossKind,
        alpha: &[f64],
        y: usize,
        f: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        let g = self.gradient(variant, loss, alpha, y, f);
        let fd = finite_difference_grad(|a| inner_value(variant, loss, a, y, f), alpha, 1e-6)?;
        let err = numerics::max_relative_error(&g, &fd, FD_FLOOR);
        Ok((g, err))
    }
}

/// One draw of the shared prediction stream: class count in `2..=10`, label and an
/// interior prediction (softmax of standard normal logits).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDraw {
    pub classes: usize,
    pub label: usize,
    pub prediction: ProbVec,
    /// Random logits at which gradients are finite-difference validated.
    pub probe_alpha: Vec<f64>,
}

pub fn prediction_draw(seed: u64, trial: usize) -> PredictionDraw {
    let mut rng = RngState::seed_from_u64(seed).fork(trial as u64);
    let classes = rng.random_range(2..=10usize);
    let label = rng.random_range(0..classes);
    let prediction = losses::random_interior(classes, &mut rng);
    let probe_alpha = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
    PredictionDraw {
        classes,
        label,
        prediction,
        probe_alpha,
    }
}

/// The label placement collapses: after the inner solve the loss is zero for any
/// interior prediction, whatever the label.
pub fn check_prop2(loss: LossKind, opts: &CheckOptions) -> CheckReport {
    let mut report = CheckReport::new("prop2", loss, opts.trials);
    if !loss.vanishes_only_on_target() {
        report.status = Status::Skipped;
        report.note = Some(format!(
            "{loss} is not zero at p = q for soft targets, so the collapse statement does not apply"
        ));
        return report;
    }
    let outcomes: Vec<Result<(f64, f64)>> = (0..opts.trials)
        .into_par_iter()
        .map(|k| {
            let d = prediction_draw(opts.seed, k);
            let (_, fd_err) = opts.validated_gradient(
                Variant::PermuteLabel,
                loss,
                &d.probe_alpha,
                d.label,
                &d.prediction,
            )?;
            let sol = solve_inner_alpha(Variant::PermuteLabel, loss, &d.prediction, d.label)?;
            Ok((sol.loss, fd_err))
        })
        .collect();
    let (mut max_residual, mut max_fd) = (0.0f64, 0.0f64);
    for (k, out) in outcomes.into_iter().enumerate() {
        match out {
            Err(e) => report.fail(format!("trial {k}: {e}")),
            Ok((residual, fd)) => {
                max_residual = max_residual.max(residual);
                max_fd = max_fd.max(fd);
                if residual > 1e-9 {
                    report.fail(format!("trial {k}: residual {residual:e}"));
                }
                if fd > FD_TOLERANCE {
                    report.fail(format!(
                        "trial {k}: analytic gradient off by {fd:e} relative"
                    ));
                }
            }
        }
    }
    report.metrics.insert("max_residual".into(), max_residual);
    report.metrics.insert("max_fd_error".into(), max_fd);
    report
}

/// The prediction placement does not collapse: after the inner solve the loss stays
/// positive, and the permuted label coordinate never exceeds the largest prediction.
/// Uses the same prediction stream as [`check_prop2`].
pub fn check_prop3(loss: LossKind, opts: &CheckOptions) -> CheckReport {
    let mut report = CheckReport::new("prop3", loss, opts.trials);
    if loss == LossKind::CrossEntropy {
        report.note = Some("one-hot target".into());
    }
    struct Trial {
        loss: f64,
        lower_bound: f64,
        coord_excess: f64,
        converged: bool,
        fd_err: f64,
    }
    let outcomes: Vec<Result<Trial>> = (0..opts.trials)
        .into_par_iter()
        .map(|k| {
            let d = prediction_draw(opts.seed, k);
            let v = Variant::PermutePrediction;
            let (_, fd_err) =
                opts.validated_gradient(v, loss, &d.probe_alpha, d.label, &d.prediction)?;
            let sol = solve_inner_alpha(v, loss, &d.prediction, d.label)?;
            let s = softmax(&sol.alpha_star)?;
            let f_max = d
                .prediction
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let coord = numerics::dot(&s, &d.prediction);
            Ok(Trial {
                loss: sol.loss,
                lower_bound: prediction_loss_lower_bound(loss, d.classes, f_max),
                coord_excess: coord - f_max,
                converged: sol.converged,
                fd_err,
            })
        })
        .collect();
    let mut min_loss = f64::INFINITY;
    let mut max_excess = f64::NEG_INFINITY;
    let mut max_fd = 0.0f64;
    let mut unconverged = 0usize;
    for (k, out) in outcomes.into_iter().enumerate() {
        match out {
            Err(e) => report.fail(format!("trial {k}: {e}")),
            Ok(t) => {
                min_loss = min_loss.min(t.loss);
                max_excess = max_excess.max(t.coord_excess);
                max_fd = max_fd.max(t.fd_err);
                unconverged += usize::from(!t.converged);
                if t.loss.is_nan() || t.loss <= 0.0 {
                    report.fail(format!("trial {k}: inner loss {} is not positive", t.loss));
                }
                if t.coord_excess > 1e-9 {
                    report.fail(format!(
                        "trial {k}: [P f]_y exceeds max f by {:e}",
                        t.coord_excess
                    ));
                }
                if t.loss < t.lower_bound - 1e-12 {
                    report.fail(format!(
                        "trial {k}: inner loss {} below its lower bound {}",
                        t.loss, t.lower_bound
                    ));
                }
                if t.fd_err > FD_TOLERANCE {
                    report.fail(format!(
                        "trial {k}: analytic gradient off by {:e} relative",
                        t.fd_err
                    ));
                }
            }
        }
    }
    report.metrics.insert("min_loss".into(), min_loss);
    report
        .metrics
        .insert("max_coord_minus_fmax".into(), max_excess);
    report.metrics.insert("max_fd_error".into(), max_fd);
    report
        .metrics
        .insert("unconverged".into(), unconverged as f64);
    report
}

/// Class counts used by [`check_prop4_bound`].
pub const PROP4_CLASSES: [usize; 3] = [3, 5, 10];

/// On predictions with `confidence < 1/c`, the prediction placement's alpha gradient
/// obeys `||grad||_1 <= (c M / 4) confidence`. Runs `opts.trials` draws at each class
/// count in [`PROP4_CLASSES`]; every 20th draw is the uniform prediction and every
/// 20th (offset 1) has a saturated `softmax(alpha)`.
pub fn check_prop4_bound(loss: LossKind, opts: &CheckOptions) -> CheckReport {
    let mut report = CheckReport::new("prop4", loss, opts.trials * PROP4_CLASSES.len());
    let mut max_ratio = 0.0f64;
    let mut max_fd = 0.0f64;
    let mut zero_conf_max = 0.0f64;
    let mut saturated_max = 0.0f64;
    let mut provenance = BoundProvenance::Analytic;
    struct Draw {
        k: usize,
        conf: f64,
        norm: f64,
        fd_err: f64,
        bound: f64,
    }
    for &c in &PROP4_CLASSES {
        let lf = LossFn::new(loss, c);
        let Some(m) = lf.grad_bound_m else {
            report.status = Status::Skipped;
            report.note = Some(format!("{loss} has no gradient bound"));
            return report;
        };
        if lf.bound_provenance == Some(BoundProvenance::Empirical) {
            provenance = BoundProvenance::Empirical;
        }
        report.metrics.insert(format!("M_c{c}"), m);
        let k_c = c as f64 * m / 4.0;
        let outcomes: Vec<Result<Draw>> = (0..opts.trials)
            .into_par_iter()
            .map(|k| {
                let mut rng =
                    RngState::seed_from_u64(opts.seed.wrapping_add(c as u64)).fork(k as u64);
                let y = rng.random_range(0..c);
                let f = if k % 20 == 0 {
                    ProbVec::uniform(c)
                } else {
                    losses::low_confidence(c, rng.random::<f64>(), &mut rng)
                };
                let mut alpha: Vec<f64> = (0..c)
                    .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if k % 20 == 1 {
                    let j = rng.random_range(0..c);
                    alpha.iter_mut().for_each(|a| *a /= 3.0);
                    alpha[j] += 40.0;
                }
                let conf = numerics::confidence(&f);
                let (g, fd_err) =
                    opts.validated_gradient(Variant::PermutePrediction, loss, &alpha, y, &f)?;
                Ok(Draw {
                    k,
                    conf,
                    norm: l1_norm(&g),
                    fd_err,
                    bound: k_c * conf,
                })
            })
            .collect();
        for out in outcomes {
            match out {
                Err(e) => report.fail(format!("c={c}: {e}")),
                Ok(Draw {
                    k,
                    conf,
                    norm,
                    fd_err,
                    bound,
                }) => {
                    if conf >= 1.0 / c as f64 {
                        report.fail(format!(
                            "c={c} draw {k}: sampler produced confidence {conf}"
                        ));
                        continue;
                    }
                    if bound > 0.0 {
                        max_ratio = max_ratio.max(norm / bound);
                    }
                    max_fd = max_fd.max(fd_err);
                    if k % 20 == 0 {
                        zero_conf_max = zero_conf_max.max(norm);
                    } else if k % 20 == 1 {
                        saturated_max = saturated_max.max(norm);
                    }
                    if norm > bound + 1e-9 {
                        report.fail(format!(
                            "c={c} draw {k}: ||grad||_1 = {norm:e} exceeds (cM/4) confidence = {bound:e}"
                        ));
                    }
                    if fd_err > FD_TOLERANCE {
                        report.fail(format!(
                            "c={c} draw {k}: analytic gradient off by {fd_err:e} relative"
                        ));
                    }
                }
            }
        }
    }
    report.bound = Some(match provenance {
        BoundProvenance::Analytic => BoundLabel::AnalyticM,
        BoundProvenance::Empirical => BoundLabel::EmpiricalM,
    });
    report.metrics.insert("max_ratio".into(), max_ratio);
    report.metrics.insert("max_fd_error".into(), max_fd);
    report
        .metrics
        .insert("zero_confidence_max_grad".into(), zero_conf_max);
    report
        .metrics
        .insert("saturated_max_grad".into(), saturated_max);
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p1: f64,
    pub grad_l1_norm: f64,
}

/// Logits `[d/2, -d/2]` for `d` in `-4, -3, ..., 4`.
pub fn default_alpha_samples() -> Vec<[f64; 2]> {
    (-4..=4)
        .map(|d| [d as f64 / 2.0, -d as f64 / 2.0])
        .collect()
}

/// `p1 = 0.01, 0.02, ..., 0.99`.
pub fn default_p1_grid() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

/// `||grad_alpha l||_1` at `c = 2`, label index 0, for each alpha sample (outer) and
/// each `p = [p1, 1 - p1]` (inner).
pub fn figure2_curves(
    loss: LossKind,
    variant: Variant,
    alpha_samples: &[[f64; 2]],
    p1_grid: &[f64],
) -> Result<Vec<Vec<CurvePoint>>> {
    if variant == Variant::PlainCeBaseline {
        return Err(Error::Domain(
            "the plain baseline has no permutation parameters".into(),
        ));
    }
    if let Some(bad) = p1_grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain(format!("p1 must lie in (0, 1), got {bad}")));
    }
    Ok(alpha_samples
        .iter()
        .map(|alpha| {
            p1_grid
                .iter()
                .map(|&p1| CurvePoint {
                    p1,
                    grad_l1_norm: l1_norm(&inner_grad(variant, loss, alpha, 0, &[p1, 1.0 - p1])),
                })
                .collect()
        })
        .collect())
}

pub const FIG2_CSV_HEADER: &str = "variant,loss,alpha_id,p1,grad_l1";

/// Curves for both placements under each loss in `losses`, in the long CSV schema.
pub fn figure2_csv(
    losses: &[LossKind],
    alpha_samples: &[[f64; 2]],
    p1_grid: &[f64],
) -> Result<String> {
    let mut out = String::from(FIG2_CSV_HEADER);
    out.push('\n');
    for &loss in losses {
        for variant in [Variant::PermuteLabel, Variant::PermutePrediction] {
            for (id, curve) in figure2_curves(loss, variant, alpha_samples, p1_grid)?
                .iter()
                .enumerate()
            {
                for pt in curve {
                    out.push_str(&format!(
                        "{variant},{loss},{id},{},{}\n",
                        pt.p1, pt.grad_l1_norm
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Qualitative shape of the `c = 2` curves: the prediction placement has zero
/// gradient at `p = [0.5, 0.5]` for every alpha; the label placement vanishes at
/// `p = softmax(alpha)` but not at the uniform prediction when `softmax(alpha)` is far from it.
pub fn check_fig2(loss: LossKind, opts: &CheckOptions) -> CheckReport {
    let alphas = default_alpha_samples();
    let grid = default_p1_grid();
    let mut report = CheckReport::new("fig2", loss, alphas.len() * grid.len());
    let mut pred_at_half = 0.0f64;
    let mut label_at_half_min = f64::INFINITY;
    let mut label_at_match = 0.0f64;
    let mut max_fd_abs = 0.0f64;
    for (id, alpha) in alphas.iter().enumerate() {
        let s = softmax(alpha).expect("finite");
        for variant in [Variant::PermuteLabel, Variant::PermutePrediction] {
            let mut points: Vec<f64> = grid.clone();
            points.push(s[0]);
            for &p1 in &points {
                let f = [p1, 1.0 - p1];
                let g = opts.gradient(variant, loss, alpha, 0, &f);
                match finite_difference_grad(|a| inner_value(variant, loss, a, 0, &f), alpha, 1e-6)
                {
                    Ok(fd) => {
                        let err = g
                            .iter()
                            .zip(&fd)
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        max_fd_abs = max_fd_abs.max(err);
                        if err > 1e-5 {
                            report.fail(format!(
                                "{variant} alpha {id} p1={p1}: gradient off by {err:e}"
                            ));
                        }
                    }
                    Err(e) => report.fail(format!("{variant} alpha {id} p1={p1}: {e}")),
                }
                let norm = l1_norm(&g);
                match variant {
                    Variant::PermutePrediction if p1 == 0.5 => {
                        pred_at_half = pred_at_half.max(norm);
                        if norm > 1e-12 {
                            report.fail(format!(
                                "prediction placement, alpha {id}: norm {norm:e} at p=[0.5,0.5]"
                            ));
                        }
                    }
                    Variant::PermuteLabel if p1 == 0.5 && (s[0] - 0.5).abs() > 0.1 => {
                        label_at_half_min = label_at_half_min.min(norm);
                        if norm <= 1e-3 {
                            report.fail(format!(
                                "label placement, alpha {id}: norm {norm:e} at p=[0.5,0.5]"
                            ));
                        }
                    }
                    Variant::PermuteLabel if p1 == s[0] => {
                        label_at_match = label_at_match.max(norm);
                        if norm > 1e-12 {
                            report.fail(format!(
                                "label placement, alpha {id}: norm {norm:e} at p = S(alpha)"
                            ));
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    report
        .metrics
        .insert("prediction_max_at_half".into(), pred_at_half);
    report
        .metrics
        .insert("label_min_at_half".into(), label_at_half_min);
    report
        .metrics
        .insert("label_max_at_softmax".into(), label_at_match);
    report.metrics.insert("max_fd_abs_error".into(), max_fd_abs);
    report
}

/// A selectable check for [`run_checks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prop {
    Prop2,
    Prop3,
    Prop4,
    Fig2,
}

impl FromStr for Prop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "2" | "prop2" => Ok(Prop::Prop2),
            "3" | "prop3" => Ok(Prop::Prop3),
            "4" | "prop4" => Ok(Prop::Prop4),
            "fig2" => Ok(Prop::Fig2),
            other => Err(Error::Config(format!(
                "unknown check {other:?} (expected 2, 3, 4 or fig2)"
            ))),
        }
    }
}

impl Prop {
    /// Losses each check runs under.
    pub fn losses(self) -> &'static [LossKind] {
        match self {
            Prop::Fig2 => &[LossKind::SquaredL2, LossKind::KlDivergence],
            _ => &LossKind::ALL,
        }
    }
}

/// Runs each selected check under each of its losses. `opts.trials` is used as given
/// for props 2 and 3 and as the per-class-count draw count for prop 4.
pub fn run_checks(props: &[Prop], opts: &CheckOptions) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for &prop in props {
        for &loss in prop.losses() {
            reports.push(match prop {
                Prop::Prop2 => check_prop2(loss, opts),
                Prop::Prop3 => check_prop3(loss, opts),
                Prop::Prop4 => check_prop4_bound(loss, opts),
                Prop::Fig2 => check_fig2(loss, opts),
            });
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVec {
        ProbVec::new(v.to_vec()).unwrap()
    }

    /// Dense search over `s1` in `[0, 1]` for the prediction placement at `c = 2`.
    fn grid_min_c2(loss: LossKind, f: &[f64], y: usize, points: usize) -> f64 {
        (0..=points)
            .map(|k| {
                let t = k as f64 / points as f64;
                let s = [1.0 - t, t];
                losses::value_raw(loss, &mix_apply(&s, y, f), &one_hot(2, y))
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn label_placement_matches_prediction() {
        let f = pv(&[0.3, 0.7]);
        for loss in [LossKind::SquaredL2, LossKind::KlDivergence] {
            let sol = solve_inner_alpha(Variant::PermuteLabel, loss, &f, 0).unwrap();
            let s = softmax(&sol.alpha_star).unwrap();
            assert!((s[0] - 0.3).abs() < 1e-10 && (s[1] - 0.7).abs() < 1e-10);
            assert!(sol.loss <= 1e-12);
            assert!(sol.converged);
        }
        assert!(solve_inner_alpha(Variant::PermuteLabel, LossKind::CrossEntropy, &f, 0).is_err());
        assert!(solve_inner_alpha(Variant::PlainCeBaseline, LossKind::SquaredL2, &f, 0).is_err());
        assert!(solve_inner_alpha(Variant::PermuteLabel, LossKind::SquaredL2, &f, 2).is_err());
    }

    #[test]
    fn uniform_prediction_is_flat() {
        for loss in LossKind::ALL {
            for c in [2, 4, 7] {
                let f = ProbVec::uniform(c);
                let sol = solve_inner_alpha(Variant::PermutePrediction, loss, &f, 1).unwrap();
                assert!(sol.converged);
                let expected = losses::value_raw(loss, &f, &one_hot(c, 1));
                assert!((sol.loss - expected).abs() < 1e-15);
                assert_eq!(sol.grad_norm, 0.0);
            }
        }
    }

    #[test]
    fn confident_correct_prediction_keeps_identity() {
        for f in [vec![0.9, 0.1], vec![0.85, 0.1, 0.05]] {
            let f = ProbVec::new(f).unwrap();
            for loss in LossKind::ALL {
                let sol = solve_inner_alpha(Variant::PermutePrediction, loss, &f, 0).unwrap();
                let s = softmax(&sol.alpha_star).unwrap();
                assert!(s[0] > 0.999, "{loss}: {:?}", s.as_slice());
                assert!(sol.loss <= sol.initial_loss);
            }
        }
    }

    #[test]
    fn solver_agrees_with_grid_search_at_two_classes() {
        let mut rng = RngState::seed_from_u64(11);
        for trial in 0..40 {
            let f = losses::random_interior(2, &mut rng);
            let y = trial % 2;
            for loss in LossKind::ALL {
                let sol = solve_inner_alpha(Variant::PermutePrediction, loss, &f, y).unwrap();
                let grid = grid_min_c2(loss, &f, y, 10_000);
                assert!(
                    (sol.loss - grid).abs() < 1e-6,
                    "{loss} {:?}: {} vs {grid}",
                    f.as_slice(),
                    sol.loss
                );
            }
        }
    }

    #[test]
    fn solver_agrees_with_grid_search_at_three_classes() {
        let mut rng = RngState::seed_from_u64(12);
        let n = 300;
        for trial in 0..10 {
            let f = losses::random_interior(3, &mut rng);
            let y = trial % 3;
            let sol =
                solve_inner_alpha(Variant::PermutePrediction, LossKind::SquaredL2, &f, y).unwrap();
            let mut grid = f64::INFINITY;
            for a in 0..=n {
                for b in 0..=(n - a) {
                    let s = [
                        a as f64 / n as f64,
                        b as f64 / n as f64,
                        (n - a - b) as f64 / n as f64,
                    ];
                    let v = losses::value_raw(
                        LossKind::SquaredL2,
                        &mix_apply(&s, y, &f),
                        &one_hot(3, y),
                    );
                    grid = grid.min(v);
                }
            }
            assert!(sol.loss <= grid + 1e-9, "{} vs {grid}", sol.loss);
            assert!(sol.loss >= grid - 1e-4);
        }
    }

    #[test]
    fn near_one_hot_prediction_has_small_positive_floor() {
        let f = pv(&[1.0 - 1e-3, 1e-3]);
        for loss in LossKind::ALL {
            let sol = solve_inner_alpha(Variant::PermutePrediction, loss, &f, 1).unwrap();
            let bound = prediction_loss_lower_bound(loss, 2, 1.0 - 1e-3);
            assert!(sol.loss > 0.0);
            assert!(sol.loss >= bound - 1e-12);
            assert!((sol.loss - grid_min_c2(loss, &f, 1, 10_000)).abs() < 1e-6);
        }
    }

    #[test]
    fn prop2_passes_and_skips_ce() {
        let opts = CheckOptions {
            trials: 100,
            ..Default::default()
        };
        for loss in [LossKind::SquaredL2, LossKind::KlDivergence] {
            let r = check_prop2(loss, &opts);
            assert_eq!(r.status, Status::Pass, "{}", r.summary());
            assert!(r.metric("max_residual").unwrap() <= 1e-9);
        }
        assert_eq!(
            check_prop2(LossKind::CrossEntropy, &opts).status,
            Status::Skipped
        );
    }

    #[test]
    fn prop3_passes() {
        let opts = CheckOptions {
            trials: 60,
            ..Default::default()
        };
        for loss in LossKind::ALL {
            let r = check_prop3(loss, &opts);
            assert_eq!(r.status, Status::Pass, "{}", r.summary());
            assert!(r.metric("min_loss").unwrap() > 0.0);
        }
    }

    #[test]
    fn prop4_passes_with_labelled_constants() {
        let opts = CheckOptions {
            trials: 400,
            ..Default::default()
        };
        let r = check_prop4_bound(LossKind::SquaredL2, &opts);
        assert_eq!(r.status, Status::Pass, "{}", r.summary());
        assert_eq!(r.bound, Some(BoundLabel::AnalyticM));
        assert_eq!(r.metric("zero_confidence_max_grad"), Some(0.0));
        assert!(r.metric("saturated_max_grad").unwrap() < 1e-10);
        for loss in [LossKind::CrossEntropy, LossKind::KlDivergence] {
            let r = check_prop4_bound(loss, &opts);
            assert_eq!(r.status, Status::Pass, "{}", r.summary());
            assert_eq!(r.bound, Some(BoundLabel::EmpiricalM));
        }
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let opts = CheckOptions {
            trials: 20,
            corrupt_gradient: true,
            ..Default::default()
        };
        assert_eq!(check_prop2(LossKind::SquaredL2, &opts).status, Status::Fail);
        assert_eq!(check_prop3(LossKind::SquaredL2, &opts).status, Status::Fail);
        assert_eq!(
            check_prop4_bound(LossKind::SquaredL2, &opts).status,
            Status::Fail
        );
        assert_eq!(check_fig2(LossKind::SquaredL2, &opts).status, Status::Fail);
    }

    #[test]
    fn prediction_stream_is_shared_and_deterministic() {
        assert_eq!(prediction_draw(4, 17), prediction_draw(4, 17));
        assert_ne!(prediction_draw(4, 17), prediction_draw(4, 18));
        let d = prediction_draw(4, 3);
        assert!((2..=10).contains(&d.classes) && d.label < d.classes);
    }

    #[test]
    fn figure2_shapes() {
        let alphas = default_alpha_samples();
        let grid = default_p1_grid();
        assert!(grid.contains(&0.5));
        for loss in [LossKind::SquaredL2, LossKind::KlDivergence] {
            let pred = figure2_curves(loss, Variant::PermutePrediction, &alphas, &grid).unwrap();
            for curve in &pred {
                let at_half = curve.iter().find(|p| p.p1 == 0.5).unwrap();
                assert!(at_half.grad_l1_norm <= 1e-12);
            }
            let r = check_fig2(loss, &CheckOptions::default());
            assert_eq!(r.status, Status::Pass, "{}", r.summary());
        }
        assert!(
            figure2_curves(LossKind::SquaredL2, Variant::PermuteLabel, &alphas, &[0.0]).is_err()
        );
        let csv = figure2_csv(&[LossKind::KlDivergence], &alphas, &grid).unwrap();
        assert_eq!(csv.lines().next().unwrap(), FIG2_CSV_HEADER);
        assert_eq!(csv.lines().count(), 1 + 2 * alphas.len() * grid.len());
    }

    #[test]
    fn prop_parsing() {
        assert_eq!("2".parse::<Prop>().unwrap(), Prop::Prop2);
        assert_eq!("fig2".parse::<Prop>().unwrap(), Prop::Fig2);
        assert!("5".parse::<Prop>().is_err());
    }

    #[test]
    fn reports_serialize() {
        let r = check_prop2(LossKind::CrossEntropy, &CheckOptions::default());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"status\":\"skipped\""));
    }
}
