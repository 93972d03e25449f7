//! Binary cross-entropy and its weighted, curriculum and augmented-view
//! variants, each with its gradient with respect to the probabilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numeric::{clamp_prob, LabelMatrix, Matrix};
use crate::{Error, Result};

/// `ℓ(y, p) = -[y log p + (1 - y) log(1 - p)]` on the clamped probability.
#[inline]
pub fn ell(y: bool, p: f64) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `∂ℓ/∂p = (p - y) / (p (1 - p))` on the clamped probability.
#[inline]
pub fn ell_grad(y: bool, p: f64) -> f64 {
    let p = clamp_prob(p);
    let y = if y { 1.0 } else { 0.0 };
    (p - y) / (p * (1.0 - p))
}

/// How labels outside the candidate set enter the weighted loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NegativeMode {
    /// Non-candidates are certain negatives and always trained with weight 1.
    #[default]
    #[serde(rename = "CONFIDENT_NEGATIVES")]
    ConfidentNegatives,
    /// Only `ω`-weighted terms; non-candidates get no supervision at all.
    #[serde(rename = "PAPER_LITERAL")]
    PaperLiteral,
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::ConfidentNegatives => "CONFIDENT_NEGATIVES",
            NegativeMode::PaperLiteral => "PAPER_LITERAL",
        })
    }
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CONFIDENT_NEGATIVES" => Ok(NegativeMode::ConfidentNegatives),
            "PAPER_LITERAL" => Ok(NegativeMode::PaperLiteral),
            _ => Err(Error::invalid(
                "negative_mode",
                format!("expected CONFIDENT_NEGATIVES or PAPER_LITERAL, got {s:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    /// Mean over samples of `Σ_j active_ij · per_term_ij`.
    pub total: f64,
    /// Unweighted `ℓ` for every entry.
    pub per_term: Matrix,
    /// Effective weight each term enters the total with (0 or 1).
    pub active: Matrix,
    /// `∂total/∂p`.
    pub grad_wrt_p: Matrix,
}

fn assemble(targets: &LabelMatrix, active: Matrix, probs: &Matrix) -> LossValue {
    let (rows, cols) = probs.shape();
    let norm = 1.0 / rows.max(1) as f64;
    let mut per_term = Matrix::zeros(rows, cols);
    let mut grad = Matrix::zeros(rows, cols);
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let (y, p) = (targets.get(i, j), probs.get(i, j));
            let l = ell(y, p);
            per_term.set(i, j, l);
            let w = active.get(i, j);
            if w != 0.0 {
                total += w * l;
                grad.set(i, j, norm * w * ell_grad(y, p));
            }
        }
    }
    LossValue {
        total: total * norm,
        per_term,
        active,
        grad_wrt_p: grad,
    }
}

fn check_same_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { op, left: a, right: b });
    }
    Ok(())
}

/// Plain multi-label BCE of one sample, summed over classes.
pub fn bce(candidates_row: &[bool], probs_row: &[f64]) -> Result<LossValue> {
    check_same_shape("bce", (1, candidates_row.len()), (1, probs_row.len()))?;
    let targets = LabelMatrix::from_fn(1, candidates_row.len(), |_, j| candidates_row[j]);
    let probs = Matrix::new(1, probs_row.len(), probs_row.to_vec())?;
    Ok(bce_batch(&targets, &probs))
}

/// BCE with `targets` for every entry, averaged over rows.
pub fn bce_batch(targets: &LabelMatrix, probs: &Matrix) -> LossValue {
    assert_eq!(targets.shape(), probs.shape(), "bce_batch shape mismatch");
    let (rows, cols) = probs.shape();
    assemble(targets, Matrix::filled(rows, cols, 1.0), probs)
}

/// Checks `Ω ⊆ Ỹ` and matching shapes.
pub fn check_weights(candidates: &LabelMatrix, weights: &LabelMatrix) -> Result<()> {
    check_same_shape("weights", weights.shape(), candidates.shape())?;
    for i in 0..weights.rows() {
        for j in 0..weights.cols() {
            if weights.get(i, j) && !candidates.get(i, j) {
                return Err(Error::InvalidWeights(format!(
                    "weight set at ({i}, {j}) which is not a candidate label"
                )));
            }
        }
    }
    Ok(())
}

/// Weighted BCE averaged over samples.
///
/// Identified candidates (`ω = 1`) are trained as positives. Unidentified
/// candidates contribute nothing. Non-candidates are trained as negatives
/// under [`NegativeMode::ConfidentNegatives`] and ignored under
/// [`NegativeMode::PaperLiteral`].
pub fn weighted_bce(
    candidates: &LabelMatrix,
    weights: &LabelMatrix,
    probs: &Matrix,
    mode: NegativeMode,
) -> Result<LossValue> {
    check_same_shape("weighted_bce", probs.shape(), candidates.shape())?;
    check_weights(candidates, weights)?;
    let (rows, cols) = probs.shape();
    let mut active = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let on = if candidates.get(i, j) {
                weights.get(i, j)
            } else {
                mode == NegativeMode::ConfidentNegatives
            };
            if on {
                active.set(i, j, 1.0);
            }
        }
    }
    Ok(assemble(candidates, active, probs))
}

/// Self-paced regularizer `Γ(Ω) = -λ Σ ω_ij`.
pub fn selfpaced_penalty(weights: &LabelMatrix, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    Ok(-lambda * weights.count_ones() as f64)
}

/// Curriculum objective `Σ ω_ij ℓ_ij + Γ(Ω)` over precomputed per-term
/// losses. The data term is a sum, so `λ` is on the per-term scale and the
/// objective separates into independent `ω_ij (ℓ_ij - λ)` pieces.
pub fn curriculum_objective(per_term: &Matrix, weights: &LabelMatrix, lambda: f64) -> Result<f64> {
    check_same_shape("curriculum_objective", per_term.shape(), weights.shape())?;
    let data: f64 = per_term
        .data()
        .iter()
        .zip(weights.as_slice())
        .filter(|(_, &w)| w)
        .map(|(l, _)| l)
        .sum();
    Ok(data + selfpaced_penalty(weights, lambda)?)
}

/// The CDCR objective: weighted BCE with `Ω` estimated on clean inputs and
/// probabilities taken on augmented inputs. The regularizer is constant in
/// the parameters once `Ω` is fixed and is left out.
pub fn cdcr_objective(
    candidates: &LabelMatrix,
    weights: &LabelMatrix,
    probs_on_augmented: &Matrix,
    mode: NegativeMode,
) -> Result<LossValue> {
    weighted_bce(candidates, weights, probs_on_augmented, mode)
}
