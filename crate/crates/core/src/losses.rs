//! Losses `l(p, q)` on the probability simplex, `p` the prediction and `q` the target.
//!
//! | kind            | value                          | zero iff `p == q` | `grad_p` l1 bound (confidence(p) < 1/c) |
//! |-----------------|--------------------------------|-------------------|------------------------------------------|
//! | `squared_l2`    | `sum (p_i - q_i)^2`            | yes               | 4, analytic                              |
//! | `kl_divergence` | `sum q_i ln(q_i / p_i)`        | yes               | measured                                 |
//! | `cross_entropy` | `-sum q_i ln p_i`              | only for one-hot q| measured                                 |
//!
//! Logs are taken of `max(x, PROB_CLAMP)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{self, softmax, ProbVec, RngState};
use crate::{Error, Result};

/// Floor applied inside every logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Analytic gradient bound of the squared loss: `||2(p - q)||_1 <= 4`.
pub const SQUARED_L2_GRAD_BOUND: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    KlDivergence,
    SquaredL2,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::SquaredL2,
        LossKind::KlDivergence,
        LossKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::KlDivergence => "kl_divergence",
            LossKind::SquaredL2 => "squared_l2",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "kl_divergence" | "kl" => Ok(LossKind::KlDivergence),
            "squared_l2" | "l2" => Ok(LossKind::SquaredL2),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; expected cross_entropy, kl_divergence or squared_l2"
            ))),
        }
    }
}

/// Where a loss's gradient bound `M` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundProvenance {
    Analytic,
    /// Maximum observed over a dense sweep; see [`measure_grad_bound`].
    Empirical,
}

/// A loss together with the properties the analysis relies on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFn {
    pub kind: LossKind,
    /// `l(p, q) == 0` iff `p == q`, for every target on the simplex.
    pub satisfies_assumption1: bool,
    /// `||grad_p l||_1 <= M` whenever `confidence(p) < 1/c`.
    pub satisfies_assumption2: bool,
    pub grad_bound_m: Option<f64>,
    pub bound_provenance: Option<BoundProvenance>,
    /// Class count the bound was established for.
    pub classes: usize,
}

impl LossKind {
    /// Whether `l(p, q) == 0` iff `p == q` for every target on the simplex. Cross
    /// entropy fails this for soft targets.
    pub fn vanishes_only_on_target(self) -> bool {
        self != LossKind::CrossEntropy
    }
}

impl LossFn {
    /// Builds the loss for `classes` classes. For the log losses this runs the
    /// gradient-bound sweep, which takes a few milliseconds.
    pub fn new(kind: LossKind, classes: usize) -> Self {
        let (m, provenance) = match kind {
            LossKind::SquaredL2 => (SQUARED_L2_GRAD_BOUND, BoundProvenance::Analytic),
            LossKind::CrossEntropy | LossKind::KlDivergence => (
                measure_grad_bound(kind, classes, 4000, 0x5eed),
                BoundProvenance::Empirical,
            ),
        };
        LossFn {
            kind,
            satisfies_assumption1: kind.vanishes_only_on_target(),
            satisfies_assumption2: true,
            grad_bound_m: Some(m),
            bound_provenance: Some(provenance),
            classes,
        }
    }

    pub fn value(&self, p: &ProbVec, q: &ProbVec) -> Result<f64> {
        loss(self.kind, p, q)
    }

    pub fn grad_p(&self, p: &ProbVec, q: &ProbVec) -> Result<Vec<f64>> {
        grad_p(self.kind, p, q)
    }
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Domain(format!(
            "loss arguments have {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

#[inline]
fn clamped_ln(x: f64) -> f64 {
    x.max(PROB_CLAMP).ln()
}

/// Loss value without argument validation.
pub(crate) fn value_raw(kind: LossKind, p: &[f64], q: &[f64]) -> f64 {
    match kind {
        LossKind::CrossEntropy => -p
            .iter()
            .zip(q)
            .filter(|(_, qi)| **qi > 0.0)
            .map(|(pi, qi)| qi * clamped_ln(*pi))
            .sum::<f64>(),
        LossKind::KlDivergence => p
            .iter()
            .zip(q)
            .filter(|(_, qi)| **qi > 0.0)
            .map(|(pi, qi)| qi * (clamped_ln(*qi) - clamped_ln(*pi)))
            .sum(),
        LossKind::SquaredL2 => p.iter().zip(q).map(|(pi, qi)| (pi - qi).powi(2)).sum(),
    }
}

/// Gradient with respect to the prediction, without validation.
pub(crate) fn grad_p_raw(kind: LossKind, p: &[f64], q: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::CrossEntropy | LossKind::KlDivergence => p
            .iter()
            .zip(q)
            .map(|(pi, qi)| {
                if *qi > 0.0 {
                    -qi / pi.max(PROB_CLAMP)
                } else {
                    0.0
                }
            })
            .collect(),
        LossKind::SquaredL2 => p.iter().zip(q).map(|(pi, qi)| 2.0 * (pi - qi)).collect(),
    }
}

/// Gradient with respect to the target, without validation.
pub(crate) fn grad_q_raw(kind: LossKind, p: &[f64], q: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::CrossEntropy => p.iter().map(|pi| -clamped_ln(*pi)).collect(),
        LossKind::KlDivergence => p
            .iter()
            .zip(q)
            .map(|(pi, qi)| clamped_ln(*qi) - clamped_ln(*pi) + 1.0)
            .collect(),
        LossKind::SquaredL2 => p.iter().zip(q).map(|(pi, qi)| -2.0 * (pi - qi)).collect(),
    }
}

pub fn loss(kind: LossKind, p: &ProbVec, q: &ProbVec) -> Result<f64> {
    check_pair(p, q)?;
    Ok(value_raw(kind, p, q))
}

/// Gradient of `l(p, q)` with respect to `p`.
pub fn grad_p(kind: LossKind, p: &ProbVec, q: &ProbVec) -> Result<Vec<f64>> {
    check_pair(p, q)?;
    Ok(grad_p_raw(kind, p, q))
}

/// Gradient of `l(p, q)` with respect to `q`.
pub fn grad_q(kind: LossKind, p: &ProbVec, q: &ProbVec) -> Result<Vec<f64>> {
    check_pair(p, q)?;
    Ok(grad_q_raw(kind, p, q))
}

/// Random interior probability vector: softmax of standard normal logits.
pub(crate) fn random_interior(classes: usize, rng: &mut RngState) -> ProbVec {
    let z: Vec<f64> = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
    softmax(&z).expect("finite logits")
}

/// Random prediction with `confidence < 1/c`: the uniform vector plus a zero-sum
/// perturbation whose range is `fraction / c`, `fraction` in `[0, 1)`.
pub(crate) fn low_confidence(classes: usize, fraction: f64, rng: &mut RngState) -> ProbVec {
    let c = classes as f64;
    let mut d: Vec<f64> = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
    let mean = d.iter().sum::<f64>() / c;
    d.iter_mut().for_each(|v| *v -= mean);
    let range = numerics::confidence(&d);
    let scale = if range > 0.0 {
        fraction / (c * range)
    } else {
        0.0
    };
    let p: Vec<f64> = d.iter().map(|v| 1.0 / c + v * scale).collect();
    let sum: f64 = p.iter().sum();
    ProbVec::from_trusted(p.iter().map(|v| v / sum).collect())
}

/// Largest observed `||grad_p l(p, q)||_1` over predictions with `confidence(p) < 1/c`.
///
/// Predictions come from random low-confidence draws and from the extremal family
/// with one coordinate at the minimum and the rest `t/c` above it, `t -> 1`. Targets
/// are every vertex of the simplex plus random interior vectors.
pub fn measure_grad_bound(kind: LossKind, classes: usize, draws: usize, seed: u64) -> f64 {
    let c = classes as f64;
    let mut rng = RngState::seed_from_u64(seed);
    let mut predictions: Vec<ProbVec> = Vec::with_capacity(draws + 64);
    for _ in 0..draws {
        let fraction: f64 = rng.random::<f64>().sqrt();
        predictions.push(low_confidence(classes, fraction, &mut rng));
    }
    let mut t = 0.5;
    while t < 1.0 - 1e-7 {
        let low = (1.0 - (c - 1.0) * t / c) / c;
        let mut p = vec![low + t / c; classes];
        p[0] = low;
        predictions.push(ProbVec::from_trusted(p));
        t = 1.0 - (1.0 - t) * 0.7;
    }

    let mut targets: Vec<ProbVec> = (0..classes)
        .map(|i| ProbVec::one_hot(classes, i).expect("index in range"))
        .collect();
    for _ in 0..8 {
        targets.push(random_interior(classes, &mut rng));
    }

    let mut worst: f64 = 0.0;
    for p in &predictions {
        debug_assert!(numerics::confidence(p) < 1.0 / c);
        for q in &targets {
            worst = worst.max(numerics::l1_norm(&grad_p_raw(kind, p, q)));
        }
    }
    worst
}

/// Samples random pairs `p != q` and checks `l(p, q) > 0`, plus `l(p, p) <= 1e-12`.
pub fn assumption1_holds(
    kind: LossKind,
    classes: usize,
    trials: usize,
    rng: &mut RngState,
) -> bool {
    let mut ok = true;
    for _ in 0..trials.max(1) {
        let p = random_interior(classes, rng);
        let q = random_interior(classes, rng);
        ok &= value_raw(kind, &p, &q) > 0.0;
        ok &= value_raw(kind, &p, &p).abs() <= 1e-12;
    }
    ok
}
