//! Synthetic label noise: symmetric, class-map asymmetric and cyclic-within-group.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::numerics::RngState;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Labels are used as given (they may already be noisy).
    None,
    Symmetric,
    AsymmetricMap,
    AsymmetricCyclic,
}

/// Noise block of a run configuration. Class indices in `class_map` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub rate: f64,
    /// `[from, to]` pairs for `asymmetric_map`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_map: Option<Vec<[usize; 2]>>,
    /// Width of the contiguous class groups for `asymmetric_cyclic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Symmetric noise draws from the other `c - 1` classes instead of all `c`.
    #[serde(default)]
    pub exclude_self: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            rate: 0.0,
            class_map: None,
            group_size: None,
            seed: 0,
            exclude_self: false,
        }
    }
}

/// Output of an injector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyLabels {
    pub labels: Vec<usize>,
    /// `flip_mask[i] == (labels[i] != clean[i])`.
    pub flip_mask: Vec<bool>,
}

impl NoisyLabels {
    fn from_clean(clean: &[usize], labels: Vec<usize>) -> Self {
        let flip_mask = clean.iter().zip(&labels).map(|(a, b)| a != b).collect();
        NoisyLabels { labels, flip_mask }
    }
}

/// A dataset whose `labels` are the noisy ones, with the clean labels kept aside for
/// evaluation metrics only.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub data: Dataset,
    pub clean_labels: Vec<usize>,
    pub flip_mask: Vec<bool>,
}

impl NoisyDataset {
    /// A dataset with no injected noise.
    pub fn clean(data: Dataset) -> Self {
        let clean_labels = data.labels.clone();
        let flip_mask = vec![false; data.len()];
        NoisyDataset {
            data,
            clean_labels,
            flip_mask,
        }
    }

    pub fn with_clean_labels(data: Dataset, clean_labels: Vec<usize>) -> Result<Self> {
        if clean_labels.len() != data.len() {
            return Err(Error::Domain(format!(
                "{} clean labels for {} samples",
                clean_labels.len(),
                data.len()
            )));
        }
        let flip_mask = data
            .labels
            .iter()
            .zip(&clean_labels)
            .map(|(a, b)| a != b)
            .collect();
        Ok(NoisyDataset {
            data,
            clean_labels,
            flip_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.data.labels
    }

    /// Fraction of samples whose noisy label equals the clean one.
    pub fn clean_fraction(&self) -> f64 {
        let kept = self.flip_mask.iter().filter(|f| !**f).count();
        kept as f64 / self.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> NoisyDataset {
        NoisyDataset {
            data: self.data.subset(indices),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            flip_mask: indices.iter().map(|&i| self.flip_mask[i]).collect(),
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "noise rate must lie in [0, 1], got {rate}"
        )));
    }
    Ok(())
}

/// Picks `round(rate * N)` samples uniformly without replacement and redraws their
/// label uniformly from all `c` classes (from the other `c - 1` with `exclude_self`).
pub fn inject_symmetric(
    labels: &[usize],
    rate: f64,
    classes: usize,
    exclude_self: bool,
    rng: &mut RngState,
) -> Result<NoisyLabels> {
    check_rate(rate)?;
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let n = labels.len();
    let count = (rate * n as f64).round() as usize;
    let mut chosen = index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    let mut noisy = labels.to_vec();
    for i in chosen {
        noisy[i] = if exclude_self {
            let draw = rng.random_range(0..classes - 1);
            if draw >= labels[i] {
                draw + 1
            } else {
                draw
            }
        } else {
            rng.random_range(0..classes)
        };
    }
    Ok(NoisyLabels::from_clean(labels, noisy))
}

/// CIFAR-10 style map (0-based): truck -> automobile, deer -> horse,
/// bird -> airplane, cat <-> dog.
pub fn cifar10_asymmetric_map() -> Vec<(usize, usize)> {
    vec![(9, 1), (4, 7), (2, 0), (3, 5), (5, 3)]
}

/// With probability `rate`, moves a sample whose class is a map source to the mapped
/// target. Classes absent from the map never change. Indices are 0-based.
pub fn inject_asymmetric_map(
    labels: &[usize],
    rate: f64,
    class_map: &[(usize, usize)],
    rng: &mut RngState,
) -> Result<NoisyLabels> {
    check_rate(rate)?;
    let mut targets: Vec<(usize, usize)> = Vec::with_capacity(class_map.len());
    for &(from, to) in class_map {
        if from == to {
            return Err(Error::Config(format!(
                "class map sends class {} to itself",
                from + 1
            )));
        }
        if targets.iter().any(|(f, _)| *f == from) {
            return Err(Error::Config(format!(
                "class map lists class {} twice",
                from + 1
            )));
        }
        targets.push((from, to));
    }
    let noisy = labels
        .iter()
        .map(|&y| match targets.iter().find(|(f, _)| *f == y) {
            Some(&(_, to)) if rng.random::<f64>() < rate => to,
            _ => y,
        })
        .collect();
    Ok(NoisyLabels::from_clean(labels, noisy))
}

/// Partitions classes into contiguous groups of `group_size`; with probability `rate`
/// a sample moves to the next class of its group, wrapping around.
pub fn inject_asymmetric_cyclic(
    labels: &[usize],
    rate: f64,
    group_size: usize,
    classes: usize,
    rng: &mut RngState,
) -> Result<NoisyLabels> {
    check_rate(rate)?;
    if group_size == 0 || !classes.is_multiple_of(group_size) {
        return Err(Error::Config(format!(
            "group size {group_size} does not divide {classes} classes"
        )));
    }
    let noisy = labels
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < rate {
                let start = y - y % group_size;
                start + (y - start + 1) % group_size
            } else {
                y
            }
        })
        .collect();
    Ok(NoisyLabels::from_clean(labels, noisy))
}

/// Applies `spec` to a clean dataset using a generator seeded from `spec.seed`.
pub fn apply(spec: &NoiseSpec, clean: &Dataset) -> Result<NoisyDataset> {
    let mut rng = RngState::seed_from_u64(spec.seed);
    let labels = &clean.labels;
    let out = match spec.kind {
        NoiseKind::None => {
            check_rate(spec.rate)?;
            return Ok(NoisyDataset::clean(clean.clone()));
        }
        NoiseKind::Symmetric => inject_symmetric(
            labels,
            spec.rate,
            clean.classes,
            spec.exclude_self,
            &mut rng,
        )?,
        NoiseKind::AsymmetricMap => {
            let pairs = spec
                .class_map
                .as_ref()
                .ok_or_else(|| Error::Config("asymmetric_map noise requires class_map".into()))?;
            let mut map = Vec::with_capacity(pairs.len());
            for &[from, to] in pairs {
                for v in [from, to] {
                    if v == 0 || v > clean.classes {
                        return Err(Error::Config(format!(
                            "class map entry {v} outside 1..={}",
                            clean.classes
                        )));
                    }
                }
                map.push((from - 1, to - 1));
            }
            inject_asymmetric_map(labels, spec.rate, &map, &mut rng)?
        }
        NoiseKind::AsymmetricCyclic => {
            let group = spec.group_size.ok_or_else(|| {
                Error::Config("asymmetric_cyclic noise requires group_size".into())
            })?;
            inject_asymmetric_cyclic(labels, spec.rate, group, clean.classes, &mut rng)?
        }
    };
    let mut data = clean.clone();
    data.labels = out.labels;
    Ok(NoisyDataset {
        data,
        clean_labels: clean.labels.clone(),
        flip_mask: out.flip_mask,
    })
}

/// Uniform disjoint split; the validation part keeps its noisy labels.
pub fn holdout_split(
    ds: &NoisyDataset,
    fraction: f64,
    rng: &mut RngState,
) -> Result<(NoisyDataset, NoisyDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = ds.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} of {n} samples leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (val, train) = order.split_at_mut(n_val);
    val.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(train), ds.subset(val)))
}
