//! Softmax machinery, a central-difference gradient oracle, and the seeded RNG.
//!
//! All arithmetic is `f64`. Vectors of class scores are plain slices; [`ProbVec`]
//! marks vectors that have been checked to lie on the probability simplex.

use std::ops::Deref;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on `sum(p) == 1` accepted by [`ProbVec::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default step of [`finite_difference_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// A probability vector: non-negative entries summing to one within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!(
                "probability vector entry {v} is negative or non-finite"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVec(values))
    }

    /// The uniform vector `1/c`.
    pub fn uniform(classes: usize) -> Self {
        ProbVec(vec![1.0 / classes as f64; classes])
    }

    /// Standard basis vector `e_index`.
    pub fn one_hot(classes: usize, index: usize) -> Result<Self> {
        if index >= classes {
            return Err(Error::Domain(format!(
                "class index {index} out of range for {classes} classes"
            )));
        }
        let mut v = vec![0.0; classes];
        v[index] = 1.0;
        Ok(ProbVec(v))
    }

    /// Wraps values the caller has produced by a simplex-preserving map.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        ProbVec(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Deref for ProbVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn ensure_finite(z: &[f64], what: &str) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!(
            "{what} has non-finite entry {} at index {i}",
            z[i]
        ))),
        None => Ok(()),
    }
}

/// Numerically stable softmax. Fails on non-finite input.
pub fn softmax(z: &[f64]) -> Result<ProbVec> {
    ensure_finite(z, "softmax input")?;
    if z.len() < 2 {
        return Err(Error::Domain(format!(
            "softmax needs at least 2 classes, got {}",
            z.len()
        )));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVec(out))
}

/// Softmax over a finite buffer, overwriting it. Callers guarantee finiteness.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `J_S(z) v` with `(J_S)_ij = S_i (delta_ij - S_j)`.
///
/// The Jacobian is symmetric, so this is also the vector-Jacobian product used when
/// back-propagating an upstream gradient through a softmax.
pub fn softmax_jacobian_vec(z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if z.len() != v.len() {
        return Err(Error::Domain(format!(
            "softmax_jacobian_vec length mismatch: {} vs {}",
            z.len(),
            v.len()
        )));
    }
    ensure_finite(v, "softmax_jacobian_vec direction")?;
    let s = softmax(z)?;
    Ok(jacobian_vec_from_probs(&s, v))
}

/// `J_S v` given the softmax output `s` directly.
pub(crate) fn jacobian_vec_from_probs(s: &[f64], v: &[f64]) -> Vec<f64> {
    let sv = dot(s, v);
    s.iter().zip(v).map(|(si, vi)| si * (vi - sv)).collect()
}

/// Central-difference gradient `(f(z + h e_i) - f(z - h e_i)) / 2h`.
pub fn finite_difference_grad<F>(f: F, z: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let mut point = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        point[i] = z[i] + h;
        let plus = f(&point);
        point[i] = z[i] - h;
        let minus = f(&point);
        point[i] = z[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation around coordinate {i}: f(+h)={plus}, f(-h)={minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest entry minus smallest entry.
pub fn confidence(p: &[f64]) -> f64 {
    let (lo, hi) = p
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`, elementwise maximum.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Row-major dense matrix-vector product.
pub fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Seedable, platform-independent random stream (ChaCha8).
///
/// The state is identified by its seed and its word position, which is what a
/// checkpoint stores.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`RngState`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    /// Word position in the ChaCha stream, as a decimal string (u128 does not fit JSON numbers).
    pub position: String,
}

impl RngState {
    pub fn seed_from_u64(seed: u64) -> Self {
        RngState {
            seed,
            stream: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.stream,
            position: self.position().to_string(),
        }
    }

    pub fn restore(snapshot: &RngSnapshot) -> Result<Self> {
        let position: u128 = snapshot
            .position
            .parse()
            .map_err(|e| Error::Serde(format!("bad rng position {:?}: {e}", snapshot.position)))?;
        let mut state = RngState::seed_from_u64(snapshot.seed);
        state.stream = snapshot.stream;
        state.inner.set_stream(snapshot.stream);
        state.inner.set_word_pos(position);
        Ok(state)
    }

    /// An independent stream for sub-task `index`, derived from this state's seed.
    pub fn fork(&self, index: u64) -> RngState {
        let stream = index.wrapping_add(1);
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        RngState {
            seed: self.seed,
            stream,
            inner,
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    /// Direct exponentiation without max subtraction; only valid for small inputs.
    fn naive_softmax(z: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_examples() {
        assert_close(&softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-15);
        let third = 1.0 / 3.0;
        assert_close(
            &softmax(&[1000.0, 1000.0, 1000.0]).unwrap(),
            &[third, third, third],
            1e-15,
        );
        let z = [2f64.ln(), 0.0, 0.0];
        let p = softmax(&z).unwrap();
        assert_close(&p, &naive_softmax(&z), 1e-15);
        assert_close(&p, &[0.5, 0.25, 0.25], 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(
            softmax(&[f64::INFINITY, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn jacobian_examples() {
        let fd = |z: &[f64], v: &[f64]| {
            finite_difference_grad(|x| dot(v, &softmax(x).unwrap()), z, 1e-6).unwrap()
        };
        let j = softmax_jacobian_vec(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_close(&fd(&[0.0, 0.0], &[1.0, 0.0]), &[0.25, -0.25], 1e-9);
        assert_close(&j, &[0.25, -0.25], 1e-15);

        let j = softmax_jacobian_vec(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        let expected = [2.0 / 9.0, -1.0 / 9.0, -1.0 / 9.0];
        assert_close(&fd(&[0.0; 3], &[1.0, 0.0, 0.0]), &expected, 1e-9);
        assert_close(&j, &expected, 1e-15);

        let j = softmax_jacobian_vec(&[0.3, -2.0, 5.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_close(&j, &[0.0; 3], 1e-15);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_grad(|z| z[0], &[3.0, -1.0, 2.0], DEFAULT_FD_STEP).unwrap();
        assert_close(&g, &[1.0, 0.0, 0.0], 1e-9);

        let g = finite_difference_grad(|_| 7.0, &[3.0, -1.0], DEFAULT_FD_STEP).unwrap();
        assert_close(&g, &[0.0, 0.0], 0.0);

        // cross-entropy of softmax logits against e_1
        let ce = |z: &[f64]| -softmax(z).unwrap()[0].ln();
        let g = finite_difference_grad(ce, &[0.0, 0.0], DEFAULT_FD_STEP).unwrap();
        assert_close(&g, &[-0.5, 0.5], 1e-6);
    }

    #[test]
    fn finite_difference_errors() {
        assert!(matches!(
            finite_difference_grad(|z| z[0], &[1.0], 0.0),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            finite_difference_grad(|_| f64::NAN, &[1.0], 1e-6),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&ProbVec::uniform(5)), 0.0);
        assert_eq!(confidence(&ProbVec::one_hot(3, 1).unwrap()), 1.0);
        assert!((confidence(&[0.6, 0.3, 0.1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prob_vec_validation() {
        assert!(ProbVec::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVec::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVec::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVec::new(vec![1.0]).is_err());
        assert!(ProbVec::one_hot(2, 2).is_err());
    }

    #[test]
    fn rng_determinism_and_snapshot() {
        let mut a = RngState::seed_from_u64(42);
        let mut b = RngState::seed_from_u64(42);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);

        let snap = a.snapshot();
        let mut restored = RngState::restore(&snap).unwrap();
        let n1: Vec<f64> = (0..10).map(|_| a.sample(StandardNormal)).collect();
        let n2: Vec<f64> = (0..10).map(|_| restored.sample(StandardNormal)).collect();
        assert_eq!(n1, n2);

        let mut f1 = a.fork(3);
        f1.next_u64();
        let mut f1_restored = RngState::restore(&f1.snapshot()).unwrap();
        assert_eq!(f1.next_u64(), f1_restored.next_u64());
        let mut f1 = a.fork(3);
        let mut f2 = b.fork(3);
        let mut f3 = b.fork(4);
        let v1 = f1.next_u64();
        assert_eq!(v1, f2.next_u64());
        assert_ne!(v1, f3.next_u64());
    }
}
