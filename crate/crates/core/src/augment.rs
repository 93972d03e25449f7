//! Feature-space augmentation: multiplicative jitter, additive Gaussian noise
//! and coordinate dropout, `x' = mask ⊙ (x (1 + u) + g)`.

use serde::{Deserialize, Serialize};

use crate::numeric::{Matrix, Rng};
use crate::{Error, Result};

const STREAM_AUGMENT: u64 = 0xA6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub gaussian_std: f64,
    pub dropout_rate: f64,
    pub scale_jitter: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            gaussian_std: 0.1,
            dropout_rate: 0.0,
            scale_jitter: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub const IDENTITY: AugmentPolicy = AugmentPolicy {
        gaussian_std: 0.0,
        dropout_rate: 0.0,
        scale_jitter: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_std >= 0.0 && self.gaussian_std.is_finite()) {
            return Err(Error::invalid("gaussian_std", format!("must be >= 0, got {}", self.gaussian_std)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(
                "dropout_rate",
                format!("must lie in [0, 1), got {}", self.dropout_rate),
            ));
        }
        if !(self.scale_jitter >= 0.0 && self.scale_jitter.is_finite()) {
            return Err(Error::invalid("scale_jitter", format!("must be >= 0, got {}", self.scale_jitter)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPolicy::IDENTITY
    }
}

pub fn augment(x: &[f64], policy: &AugmentPolicy, rng: &mut Rng) -> Result<Vec<f64>> {
    policy.validate()?;
    let mut out = x.to_vec();
    augment_in_place(&mut out, policy, rng);
    Ok(out)
}

fn augment_in_place(x: &mut [f64], policy: &AugmentPolicy, rng: &mut Rng) {
    if policy.is_identity() {
        return;
    }
    for v in x.iter_mut() {
        let u = rng.uniform_range(-policy.scale_jitter, policy.scale_jitter);
        let g = policy.gaussian_std * rng.standard_normal();
        let keep = !rng.bernoulli(policy.dropout_rate);
        *v = if keep { *v * (1.0 + u) + g } else { 0.0 };
    }
}

/// Augments the given rows of `features`. Sample `i` in `epoch` always uses
/// its own stream, so results do not depend on batch composition or order.
pub fn augment_rows(
    features: &Matrix,
    indices: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: usize,
) -> Result<Matrix> {
    policy.validate()?;
    let mut out = features.select_rows(indices);
    if policy.is_identity() {
        return Ok(out);
    }
    for (r, &i) in indices.iter().enumerate() {
        let mut rng = Rng::derive(seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
        augment_in_place(out.row_mut(r), policy, &mut rng);
    }
    Ok(out)
}

/// Augments every row once, using the stream of `epoch`.
pub fn augment_matrix(features: &Matrix, policy: &AugmentPolicy, seed: u64, epoch: usize) -> Result<Matrix> {
    let all: Vec<usize> = (0..features.rows()).collect();
    augment_rows(features, &all, policy, seed, epoch)
}
