//! Disambiguation weight estimation: which candidate labels are currently
//! treated as relevant.
//!
//! Three rules are provided: the probability threshold
//! `ω_ij = 1[p_ij ≥ α]`, its self-paced form `ω_ij = 1[ℓ_ij < λ]`, and the
//! class-difficulty variant `ω_ij = 1[p_ij - b_j ≥ α - b̄]`. Every rule only
//! ever selects candidate labels, and weights are recomputed from scratch on
//! each call.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::numeric::{LabelMatrix, Matrix};
use crate::{Error, Result};

/// Binary disambiguation weights, always a subset of the candidate set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightMatrix(LabelMatrix);

impl WeightMatrix {
    pub fn new(weights: LabelMatrix, candidates: &LabelMatrix) -> Result<Self> {
        crate::losses::check_weights(candidates, &weights)?;
        Ok(WeightMatrix(weights))
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        WeightMatrix(LabelMatrix::zeros(rows, cols))
    }

    pub fn into_inner(self) -> LabelMatrix {
        self.0
    }

    /// Number of identified labels per class.
    pub fn per_class_counts(&self) -> Vec<usize> {
        self.0.column_sums()
    }
}

impl Deref for WeightMatrix {
    type Target = LabelMatrix;

    fn deref(&self) -> &LabelMatrix {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub alpha: f64,
    pub difficulty_enabled: bool,
}

impl CurriculumConfig {
    pub fn new(alpha: f64, difficulty_enabled: bool) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        Ok(CurriculumConfig {
            alpha,
            difficulty_enabled,
        })
    }

    /// The loss threshold equivalent to `alpha` on positive terms:
    /// `ℓ(1, p) < λ ⟺ p > e^{-λ}`.
    pub fn lambda(&self) -> f64 {
        lambda_for_alpha(self.alpha)
    }
}

pub fn lambda_for_alpha(alpha: f64) -> f64 {
    -alpha.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBaselines {
    pub b: Vec<f64>,
    pub b_bar: f64,
}

fn check_shapes(op: &'static str, probs: &Matrix, candidates: &LabelMatrix) -> Result<()> {
    if probs.shape() != candidates.shape() {
        return Err(Error::DimensionMismatch {
            op,
            left: probs.shape(),
            right: candidates.shape(),
        });
    }
    Ok(())
}

fn select(
    candidates: &LabelMatrix,
    mut keep: impl FnMut(usize, usize) -> bool,
) -> WeightMatrix {
    WeightMatrix(LabelMatrix::from_fn(candidates.rows(), candidates.cols(), |i, j| {
        candidates.get(i, j) && keep(i, j)
    }))
}

/// `ω_ij = 1` iff `j` is a candidate of `i` and `p_ij ≥ α`.
pub fn estimate_weights(probs: &Matrix, candidates: &LabelMatrix, alpha: f64) -> Result<WeightMatrix> {
    check_shapes("estimate_weights", probs, candidates)?;
    Ok(select(candidates, |i, j| probs.get(i, j) >= alpha))
}

/// `ω_ij = 1` iff `j` is a candidate of `i` and its loss is strictly below `λ`.
pub fn selfpaced_weights(losses: &Matrix, candidates: &LabelMatrix, lambda: f64) -> Result<WeightMatrix> {
    check_shapes("selfpaced_weights", losses, candidates)?;
    Ok(select(candidates, |i, j| losses.get(i, j) < lambda))
}

/// Per-class and pooled mean probability over confident candidates
/// (`p > 0.5` and candidate). Empty classes fall back to the pooled value,
/// and the pooled value falls back to 0.5.
pub fn compute_baselines(probs: &Matrix, candidates: &LabelMatrix) -> Result<DifficultyBaselines> {
    check_shapes("compute_baselines", probs, candidates)?;
    let k = probs.cols();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for i in 0..probs.rows() {
        for j in 0..k {
            let p = probs.get(i, j);
            if p > 0.5 && candidates.get(i, j) {
                sums[j] += p;
                counts[j] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let b_bar = if total == 0 {
        0.5
    } else {
        sums.iter().sum::<f64>() / total as f64
    };
    let b = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { b_bar } else { s / c as f64 })
        .collect();
    Ok(DifficultyBaselines { b, b_bar })
}

/// `ω_ij = 1` iff candidate and `p_ij - b_j ≥ α - b̄`.
///
/// Evaluated as `p_ij ≥ α + (b_j - b̄)` so that equal baselines reproduce
/// [`estimate_weights`] bit for bit.
pub fn estimate_weights_difficulty(
    probs: &Matrix,
    candidates: &LabelMatrix,
    alpha: f64,
    baselines: &DifficultyBaselines,
) -> Result<WeightMatrix> {
    check_shapes("estimate_weights_difficulty", probs, candidates)?;
    if baselines.b.len() != probs.cols() {
        return Err(Error::invalid(
            "baselines",
            format!("expected {} class baselines, got {}", probs.cols(), baselines.b.len()),
        ));
    }
    let thresholds: Vec<f64> = baselines.b.iter().map(|&b| alpha + (b - baselines.b_bar)).collect();
    Ok(select(candidates, |i, j| probs.get(i, j) >= thresholds[j]))
}

/// Quality of an identified set against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fraction of identified labels that are relevant (0 when none are identified).
    pub precision: f64,
    /// Irrelevant labels identified both now and at the previous estimate.
    pub repeated_noisy: usize,
    pub identified: usize,
}

pub fn diagnostics(
    current: &LabelMatrix,
    previous: Option<&LabelMatrix>,
    true_labels: &LabelMatrix,
    candidates: &LabelMatrix,
) -> Result<Diagnostics> {
    for (name, m) in [("true_labels", true_labels), ("candidates", candidates)] {
        if m.shape() != current.shape() {
            return Err(Error::DimensionMismatch {
                op: if name == "true_labels" { "diagnostics/true_labels" } else { "diagnostics/candidates" },
                left: current.shape(),
                right: m.shape(),
            });
        }
    }
    if let Some(prev) = previous {
        if prev.shape() != current.shape() {
            return Err(Error::DimensionMismatch {
                op: "diagnostics/previous",
                left: current.shape(),
                right: prev.shape(),
            });
        }
    }
    let mut identified = 0;
    let mut correct = 0;
    let mut repeated_noisy = 0;
    for (k, (&w, &y)) in current.as_slice().iter().zip(true_labels.as_slice()).enumerate() {
        if !w {
            continue;
        }
        identified += 1;
        if y {
            correct += 1;
        } else if previous.is_some_and(|p| p.as_slice()[k]) {
            repeated_noisy += 1;
        }
    }
    Ok(Diagnostics {
        precision: correct as f64 / identified.max(1) as f64,
        repeated_noisy,
        identified,
    })
}

/// The less frequent half of the classes (ties broken by class index).
pub fn tail_classes(class_counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(class_counts[j]), j));
    let mut tail = order.split_off(class_counts.len().div_ceil(2));
    tail.sort_unstable();
    tail
}
