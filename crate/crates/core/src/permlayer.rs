//! The instance-dependent permutation layer.
//!
//! For a sample with noisy label `y` and logits `alpha`, the layer is
//!
//! ```text
//! P_bar = sum_i softmax(alpha)_i * P(y, i)
//! ```
//!
//! where `P(y, i)` swaps coordinates `y` and `i` (`P(y, y)` is the identity). Every
//! `P(y, i)` is a symmetric involution, so `P_bar` is symmetric and doubly stochastic.
//! Applying it to a vector only touches coordinate `y` and the diagonal, which gives
//! the O(c) closed form used on the training hot path:
//!
//! ```text
//! out[y] = s . v
//! out[j] = (1 - s_j) v_j + s_j v_y      (j != y)
//! ```
//!
//! [`build_dense`] materializes the full matrix and is kept as a reference for tests.

use serde::{Deserialize, Serialize};

use crate::numerics::{self, jacobian_vec_from_probs, softmax, ProbVec};
use crate::{Error, Result};

fn check_index(index: usize, classes: usize) -> Result<()> {
    if index >= classes {
        return Err(Error::Domain(format!(
            "class index {index} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Elementary permutation `P(a, b)`: the identity with rows `a` and `b` exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapMatrix {
    pub a: usize,
    pub b: usize,
}

impl SwapMatrix {
    pub fn new(a: usize, b: usize, classes: usize) -> Result<Self> {
        check_index(a, classes)?;
        check_index(b, classes)?;
        Ok(SwapMatrix { a, b })
    }

    pub fn to_dense(&self, classes: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; classes]; classes];
        for (i, row) in m.iter_mut().enumerate() {
            let col = if i == self.a {
                self.b
            } else if i == self.b {
                self.a
            } else {
                i
            };
            row[col] = 1.0;
        }
        m
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        out.swap(self.a, self.b);
        out
    }
}

/// Result of pushing a probability vector through the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PermApplyResult {
    pub output: ProbVec,
    /// The mixture weights `softmax(alpha)`.
    pub mix: ProbVec,
}

/// `P_bar v` for mixture weights `s`, valid for any vector `v`.
///
/// `P_bar` is symmetric, so this is also the transpose product used to carry a
/// gradient from the layer output back to its input.
pub(crate) fn mix_apply(s: &[f64], y: usize, v: &[f64]) -> Vec<f64> {
    let vy = v[y];
    let mut out: Vec<f64> = s
        .iter()
        .zip(v)
        .map(|(sj, vj)| (1.0 - sj) * vj + sj * vy)
        .collect();
    out[y] = numerics::dot(s, v);
    out
}

/// Gradient of `upstream . P_bar(alpha) p` with respect to `alpha`, given `s = softmax(alpha)`.
///
/// With `g_i = upstream . P(y, i) p`, the gradient is `J_S g`. Since `J_S 1 = 0` the
/// common term `upstream . p` drops out, leaving `g_i = (u_y - u_i)(p_i - p_y)`.
pub(crate) fn mix_grad(s: &[f64], y: usize, p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let (uy, py) = (upstream[y], p[y]);
    let g: Vec<f64> = upstream
        .iter()
        .zip(p)
        .map(|(ui, pi)| (uy - ui) * (pi - py))
        .collect();
    jacobian_vec_from_probs(s, &g)
}

/// Dense `c x c` matrix of the layer. Reference implementation only.
pub fn build_dense(alpha: &[f64], y_tilde: usize) -> Result<Vec<Vec<f64>>> {
    let c = alpha.len();
    check_index(y_tilde, c)?;
    let s = softmax(alpha)?;
    let mut m = vec![vec![0.0; c]; c];
    for (i, si) in s.iter().enumerate() {
        let swap = SwapMatrix::new(y_tilde, i, c)?.to_dense(c);
        for (row, srow) in m.iter_mut().zip(&swap) {
            for (x, e) in row.iter_mut().zip(srow) {
                *x += si * e;
            }
        }
    }
    Ok(m)
}

/// `P_bar p` by the O(c) closed form.
pub fn apply_to_vec(alpha: &[f64], y_tilde: usize, p: &ProbVec) -> Result<PermApplyResult> {
    let c = alpha.len();
    check_index(y_tilde, c)?;
    if p.len() != c {
        return Err(Error::Domain(format!(
            "prediction has {} classes, alpha has {c}",
            p.len()
        )));
    }
    let mix = softmax(alpha)?;
    let output = ProbVec::from_trusted(mix_apply(&mix, y_tilde, p));
    Ok(PermApplyResult { output, mix })
}

/// `P_bar e_y`, which equals `softmax(alpha)` exactly.
pub fn apply_to_label(alpha: &[f64], y_tilde: usize) -> Result<ProbVec> {
    let c = alpha.len();
    let label = ProbVec::one_hot(c, y_tilde)?;
    let out = apply_to_vec(alpha, y_tilde, &label)?;
    debug_assert!(out
        .output
        .iter()
        .zip(out.mix.iter())
        .all(|(a, b)| (a - b).abs() <= 1e-12));
    Ok(out.output)
}

/// Gradient of `upstream . P_bar(alpha) p` with respect to `alpha`.
pub fn grad_alpha(
    alpha: &[f64],
    y_tilde: usize,
    p: &ProbVec,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let c = alpha.len();
    check_index(y_tilde, c)?;
    if p.len() != c || upstream.len() != c {
        return Err(Error::Domain(format!(
            "grad_alpha length mismatch: alpha {c}, p {}, upstream {}",
            p.len(),
            upstream.len()
        )));
    }
    numerics::ensure_finite(upstream, "upstream gradient")?;
    let s = softmax(alpha)?;
    Ok(mix_grad(&s, y_tilde, p, upstream))
}

/// Logits placing mass `i_alpha` on `y_tilde` and `(1 - i_alpha) / (c - 1)` elsewhere.
pub fn init_row(y_tilde: usize, i_alpha: f64, classes: usize) -> Result<Vec<f64>> {
    check_index(y_tilde, classes)?;
    validate_i_alpha(i_alpha, classes)?;
    let on = i_alpha.ln();
    let off = ((1.0 - i_alpha) / (classes - 1) as f64).ln();
    Ok((0..classes)
        .map(|j| if j == y_tilde { on } else { off })
        .collect())
}

pub fn validate_i_alpha(i_alpha: f64, classes: usize) -> Result<()> {
    let lo = 1.0 / classes as f64;
    if !(i_alpha > lo && i_alpha < 1.0) {
        return Err(Error::Config(format!(
            "I_alpha must lie in (1/c, 1) = ({lo}, 1), got {i_alpha}"
        )));
    }
    Ok(())
}

/// True iff `alpha` has a unique maximum at `clean_label`.
pub fn permutation_correct(alpha: &[f64], clean_label: usize) -> bool {
    let Some(&top) = alpha.get(clean_label) else {
        return false;
    };
    alpha
        .iter()
        .enumerate()
        .all(|(j, &a)| j == clean_label || a < top)
}

/// Per-sample permutation logits for a whole training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    classes: usize,
    /// Row-major `N x c`.
    alpha: Vec<f64>,
    noisy_labels: Vec<usize>,
}

impl AlphaTable {
    /// Initializes every row so that `softmax(row)[noisy_label] == i_alpha`.
    pub fn init(noisy_labels: &[usize], i_alpha: f64, classes: usize) -> Result<Self> {
        if noisy_labels.is_empty() {
            return Err(Error::Domain(
                "alpha table needs at least one sample".into(),
            ));
        }
        if classes < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        validate_i_alpha(i_alpha, classes)?;
        let mut alpha = Vec::with_capacity(noisy_labels.len() * classes);
        for &y in noisy_labels {
            alpha.extend(init_row(y, i_alpha, classes)?);
        }
        Ok(AlphaTable {
            classes,
            alpha,
            noisy_labels: noisy_labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn noisy_label(&self, i: usize) -> usize {
        self.noisy_labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.classes..(i + 1) * self.classes]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.alpha[i * self.classes..(i + 1) * self.classes]
    }

    /// Percentage of rows whose unique argmax is the clean label.
    pub fn permutation_accuracy(&self, clean_labels: &[usize]) -> f64 {
        assert_eq!(clean_labels.len(), self.len());
        let correct = clean_labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| permutation_correct(self.row(i), y))
            .count();
        100.0 * correct as f64 / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().all(|a| a.is_finite())
    }
}
