//! Group-relative advantage normalization and the masked, clipped objective.
//!
//! The kernel consumes old/new token log-probabilities supplied by the
//! policy endpoint (or fixtures); it never tokenizes text. For a group of G
//! trajectories with broadcast advantages `A_g`, the objective is
//!
//! ```text
//! J = (1/G) * sum_g (1/|M_g|) * sum_{j in M_g} min(w * A_g, clip(w, 1-eps, 1+eps) * A_g)
//! w = exp(new_logprob - old_logprob)
//! ```
//!
//! with masked-out tokens contributing nothing. Summation order is fixed
//! (left to right per trajectory, then group order) so results are
//! bit-stable.

use crate::model::MaskedTokenBatch;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("group must have at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("trajectory {0} has no masked-in token")]
    EmptyMask(usize),
    #[error("trajectory {index}: old/new/mask lengths disagree ({old}/{new}/{mask})")]
    LengthMismatch { index: usize, old: usize, new: usize, mask: usize },
    #[error("trajectory {index} token {token}: ratio {ratio} within 10h of a clip kink")]
    KinkTooClose { index: usize, token: usize, ratio: f64 },
}

/// Population-variant of the standard deviation is the only supported mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    #[default]
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Clip threshold epsilon.
    pub epsilon: f64,
    /// Below this reward standard deviation the group is degenerate and all
    /// advantages are exactly zero.
    pub std_floor: f64,
    pub std_mode: StdMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, std_floor: 1e-6, std_mode: StdMode::Population }
    }
}

/// Normalizes trajectory-level rewards within the group:
/// `A_g = (r_g - mean) / std` with population statistics. Degenerate groups
/// (std below the floor) yield exactly zero advantages.
pub fn compute_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < cfg.std_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn validate_batch(batch: &[MaskedTokenBatch]) -> Result<(), GrpoError> {
    for (index, traj) in batch.iter().enumerate() {
        let (old, new, mask) = (traj.old_logprobs.len(), traj.new_logprobs.len(), traj.mask.len());
        if old != new || new != mask {
            return Err(GrpoError::LengthMismatch { index, old, new, mask });
        }
        if traj.masked_in() == 0 {
            return Err(GrpoError::EmptyMask(index));
        }
    }
    Ok(())
}

/// Per-token clipped surrogate: `min(w * A, clip(w, 1-eps, 1+eps) * A)`.
fn token_term(w: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = w.clamp(1.0 - epsilon, 1.0 + epsilon);
    (w * advantage).min(clipped * advantage)
}

/// The scalar objective to be maximized over a group batch.
pub fn grpo_objective(batch: &[MaskedTokenBatch], cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    validate_batch(batch)?;
    let g = batch.len() as f64;
    let mut total = 0.0;
    for traj in batch {
        let mut traj_sum = 0.0;
        for ((old, new), masked) in traj
            .old_logprobs
            .iter()
            .zip(&traj.new_logprobs)
            .zip(&traj.mask)
        {
            if !masked {
                continue;
            }
            let w = (new - old).exp();
            traj_sum += token_term(w, traj.advantage, cfg.epsilon);
        }
        total += traj_sum / traj.masked_in() as f64;
    }
    Ok(total / g)
}

/// Per-trajectory contributions `(1/|M_g|) * sum_j term_j`, in group order.
pub fn per_trajectory_terms(
    batch: &[MaskedTokenBatch],
    cfg: &GrpoConfig,
) -> Result<Vec<f64>, GrpoError> {
    validate_batch(batch)?;
    Ok(batch
        .iter()
        .map(|traj| {
            let sum: f64 = traj
                .old_logprobs
                .iter()
                .zip(&traj.new_logprobs)
                .zip(&traj.mask)
                .filter(|(_, masked)| **masked)
                .map(|((old, new), _)| token_term((new - old).exp(), traj.advantage, cfg.epsilon))
                .sum();
            sum / traj.masked_in() as f64
        })
        .collect())
}

/// Analytic gradient of the objective with respect to each new logprob.
/// Masked-out tokens get zero. The derivative of `min(wA, clip(w)A)` in `w`
/// is `A` on the active branch and `0` where the clip is flat; the chain
/// rule contributes a factor `w`.
pub fn objective_gradient(
    batch: &[MaskedTokenBatch],
    cfg: &GrpoConfig,
) -> Result<Vec<Vec<f64>>, GrpoError> {
    validate_batch(batch)?;
    let g = batch.len() as f64;
    let mut grads = Vec::with_capacity(batch.len());
    for traj in batch {
        let scale = 1.0 / (g * traj.masked_in() as f64);
        let mut traj_grad = vec![0.0; traj.new_logprobs.len()];
        for (j, ((old, new), masked)) in traj
            .old_logprobs
            .iter()
            .zip(&traj.new_logprobs)
            .zip(&traj.mask)
            .enumerate()
        {
            if !masked {
                continue;
            }
            let w = (new - old).exp();
            let a = traj.advantage;
            let active = if a > 0.0 {
                w <= 1.0 + cfg.epsilon
            } else if a < 0.0 {
                w >= 1.0 - cfg.epsilon
            } else {
                false
            };
            traj_grad[j] = if active { scale * a * w } else { 0.0 };
        }
        grads.push(traj_grad);
    }
    Ok(grads)
}

/// Validates the analytic gradient against central finite differences over
/// the new logprobs, returning the maximum relative discrepancy.
///
/// Requires every masked ratio to sit further than `10 * h` from both clip
/// kinks, where the derivative is undefined.
pub fn objective_gradient_check(
    batch: &[MaskedTokenBatch],
    cfg: &GrpoConfig,
    h: f64,
) -> Result<f64, GrpoError> {
    validate_batch(batch)?;
    for (index, traj) in batch.iter().enumerate() {
        for (token, ((old, new), masked)) in traj
            .old_logprobs
            .iter()
            .zip(&traj.new_logprobs)
            .zip(&traj.mask)
            .enumerate()
        {
            if !masked {
                continue;
            }
            let ratio = (new - old).exp();
            if (ratio - (1.0 - cfg.epsilon)).abs() <= 10.0 * h
                || (ratio - (1.0 + cfg.epsilon)).abs() <= 10.0 * h
            {
                return Err(GrpoError::KinkTooClose { index, token, ratio });
            }
        }
    }

    let analytic = objective_gradient(batch, cfg)?;
    let mut work: Vec<MaskedTokenBatch> = batch.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for gi in 0..batch.len() {
        for j in 0..batch[gi].new_logprobs.len() {
            if !batch[gi].mask[j] {
                continue;
            }
            let base = batch[gi].new_logprobs[j];
            work[gi].new_logprobs[j] = base + h;
            let plus = grpo_objective(&work, cfg)?;
            work[gi].new_logprobs[j] = base - h;
            let minus = grpo_objective(&work, cfg)?;
            work[gi].new_logprobs[j] = base;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[gi][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            max_rel_err = max_rel_err.max(rel);
        }
    }
    Ok(max_rel_err)
}

/// Convenience: one trajectory batch with every token masked in.
pub fn single_token_batch(old_lp: f64, new_lp: f64, advantage: f64) -> MaskedTokenBatch {
    MaskedTokenBatch {
        old_logprobs: vec![old_lp],
        new_logprobs: vec![new_lp],
        mask: vec![true],
        advantage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_all_masked(lps: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<MaskedTokenBatch> {
        lps.iter()
            .map(|(old, new, adv)| MaskedTokenBatch {
                old_logprobs: old.clone(),
                new_logprobs: new.clone(),
                mask: vec![true; old.len()],
                advantage: *adv,
            })
            .collect()
    }

    #[test]
    fn degenerate_group_zero_advantages() {
        let adv = compute_advantages(&[1.0, 1.0, 1.0, 1.0], &GrpoConfig::default()).unwrap();
        assert_eq!(adv, vec![0.0; 4]);
    }

    #[test]
    fn two_element_group_hand_derived() {
        // mean 0.65, population std 0.65.
        let adv = compute_advantages(&[1.3, 0.0], &GrpoConfig::default()).unwrap();
        assert!((adv[0] - 1.0).abs() < 1e-12);
        assert!((adv[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_group_hand_derived() {
        // mean 0.5, population std 0.5.
        let rewards = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let adv = compute_advantages(&rewards, &GrpoConfig::default()).unwrap();
        for (r, a) in rewards.iter().zip(&adv) {
            let expected = if *r > 0.5 { 1.0 } else { -1.0 };
            assert!((a - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn group_too_small() {
        assert!(matches!(
            compute_advantages(&[1.0], &GrpoConfig::default()),
            Err(GrpoError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn normalization_statistics() {
        let rewards = [1.3, 1.1, 0.0, 0.1, 1.0, 0.0];
        let adv = compute_advantages(&rewards, &GrpoConfig::default()).unwrap();
        let g = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / g;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / g).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shift_invariance() {
        let rewards = [1.3, 0.1, 1.0, 0.0];
        let base = compute_advantages(&rewards, &GrpoConfig::default()).unwrap();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 17.5).collect();
        let moved = compute_advantages(&shifted, &GrpoConfig::default()).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ratio_one_collapses_to_mean_advantage() {
        let batch = batch_all_masked(&[
            (vec![-1.0, -2.0], vec![-1.0, -2.0], 0.7),
            (vec![-0.5], vec![-0.5], -0.3),
        ]);
        let j = grpo_objective(&batch, &GrpoConfig::default()).unwrap();
        assert!((j - (0.7 - 0.3) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_token_clipped_positive() {
        // ratio 2, A = 1, eps 0.2: min(2, 1.2) = 1.2.
        let batch = vec![single_token_batch(-1.0, -1.0 + std::f64::consts::LN_2, 1.0)];
        let j = grpo_objective(&batch, &GrpoConfig::default()).unwrap();
        assert!((j - 1.2).abs() < 1e-12, "J = {j}");
    }

    #[test]
    fn single_token_negative_advantage_unprotected() {
        // ratio 2, A = -1: min(-2, -1.2) = -2; clipping does not protect
        // negative-advantage increases.
        let batch = vec![single_token_batch(-1.0, -1.0 + std::f64::consts::LN_2, -1.0)];
        let j = grpo_objective(&batch, &GrpoConfig::default()).unwrap();
        assert!((j + 2.0).abs() < 1e-12, "J = {j}");
    }

    #[test]
    fn mask_invariance() {
        let mut traj = MaskedTokenBatch {
            old_logprobs: vec![-1.0, -2.0, -0.5],
            new_logprobs: vec![-0.9, -2.0, -0.6],
            mask: vec![true, false, true],
            advantage: 0.8,
        };
        let cfg = GrpoConfig::default();
        let j1 = grpo_objective(std::slice::from_ref(&traj), &cfg).unwrap();
        traj.new_logprobs[1] = 100.0;
        traj.old_logprobs[1] = -77.0;
        let j2 = grpo_objective(std::slice::from_ref(&traj), &cfg).unwrap();
        assert_eq!(j1.to_bits(), j2.to_bits());
    }

    #[test]
    fn empty_mask_and_length_mismatch() {
        let no_mask = MaskedTokenBatch {
            old_logprobs: vec![-1.0],
            new_logprobs: vec![-1.0],
            mask: vec![false],
            advantage: 1.0,
        };
        assert!(matches!(
            grpo_objective(&[no_mask], &GrpoConfig::default()),
            Err(GrpoError::EmptyMask(0))
        ));

        let skewed = MaskedTokenBatch {
            old_logprobs: vec![-1.0, -1.0],
            new_logprobs: vec![-1.0],
            mask: vec![true, true],
            advantage: 1.0,
        };
        assert!(matches!(
            grpo_objective(&[skewed], &GrpoConfig::default()),
            Err(GrpoError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gradient_check_ratio_one() {
        let batch = batch_all_masked(&[
            (vec![-1.0, -0.5, -2.0], vec![-1.0, -0.5, -2.0], 1.0),
            (vec![-0.3, -0.7], vec![-0.3, -0.7], -0.5),
        ]);
        let err = objective_gradient_check(&batch, &GrpoConfig::default(), 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn gradient_zero_on_clipped_branch() {
        // ratio 3 with positive advantage is fully clipped: flat objective.
        let batch = vec![single_token_batch(-2.0, -2.0 + 3.0f64.ln(), 1.5)];
        let cfg = GrpoConfig::default();
        let grads = objective_gradient(&batch, &cfg).unwrap();
        assert_eq!(grads[0][0], 0.0);
        let err = objective_gradient_check(&batch, &cfg, 1e-5).unwrap();
        assert!(err < 1e-6, "clipped branch err {err}");
    }

    #[test]
    fn gradient_check_rejects_kink_proximity() {
        let batch = vec![single_token_batch(0.0, 1.2f64.ln(), 1.0)];
        assert!(matches!(
            objective_gradient_check(&batch, &GrpoConfig::default(), 1e-5),
            Err(GrpoError::KinkTooClose { .. })
        ));
    }

    #[test]
    fn degenerate_group_objective_is_zero() {
        let advantages = compute_advantages(&[1.0, 1.0, 1.0], &GrpoConfig::default()).unwrap();
        let batch: Vec<MaskedTokenBatch> = advantages
            .iter()
            .map(|a| single_token_batch(-1.0, -0.8, *a))
            .collect();
        let j = grpo_objective(&batch, &GrpoConfig::default()).unwrap();
        assert_eq!(j, 0.0);
    }
}
