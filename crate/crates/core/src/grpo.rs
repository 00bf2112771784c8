//! Group-relative advantages and the clipped, KL-regularized policy loss,
//! evaluated over recorded per-token log-probabilities.
//!
//! ```text
//! A_i   = (r_i - mean(r)) / (std(r) + eps)            population std
//! ratio = exp(logp_new - logp_old)
//! L     = -(1/G) sum_i (1/|y_i|) sum_t [ min(ratio*A_i, clip(ratio, 1-eps_l, 1+eps_h)*A_i) - beta*KL ]
//! ```
//!
//! All reductions run in index order, so results are bit-for-bit
//! reproducible.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group has {0} trajectories, need at least 2")]
    GroupTooSmall(usize),
    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),
    #[error("trajectory {0} has no tokens")]
    EmptyTrajectory(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `exp(ref - new) - (ref - new) - 1`, non-negative.
    #[default]
    K3,
    /// `new - ref`.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub eps: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub kl_estimator: KlEstimator,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { eps: 1e-6, eps_low: 0.2, eps_high: 0.3, beta: 1e-2, kl_estimator: KlEstimator::K3 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.eps > 0.0) {
            return Err(GrpoError::InvalidConfig("eps must be > 0".into()));
        }
        if !(self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high > 0.0 && self.eps_high < 1.0) {
            return Err(GrpoError::InvalidConfig("clip bounds must lie in (0, 1)".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(GrpoError::InvalidConfig("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One prompt's sampled trajectories with their rewards and log-probs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutGroup {
    pub rewards: Vec<f64>,
    pub logp_new: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
}

impl RolloutGroup {
    /// Builds a group, deriving lengths from `logp_new`.
    pub fn new(rewards: Vec<f64>, logp_new: Vec<Vec<f64>>, logp_old: Vec<Vec<f64>>, logp_ref: Vec<Vec<f64>>) -> Self {
        let lengths = logp_new.iter().map(Vec::len).collect();
        Self { rewards, logp_new, logp_old, logp_ref, lengths }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn check_alignment(&self) -> Result<(), GrpoError> {
        let n = self.rewards.len();
        for (name, lists) in [("logp_new", &self.logp_new), ("logp_old", &self.logp_old), ("logp_ref", &self.logp_ref)] {
            if lists.len() != n {
                return Err(GrpoError::AlignmentMismatch(format!("{name} has {} trajectories, rewards has {n}", lists.len())));
            }
        }
        if self.lengths.len() != n {
            return Err(GrpoError::AlignmentMismatch(format!("lengths has {} entries, rewards has {n}", self.lengths.len())));
        }
        for i in 0..n {
            let len = self.lengths[i];
            for (name, lists) in [("logp_new", &self.logp_new), ("logp_old", &self.logp_old), ("logp_ref", &self.logp_ref)] {
                if lists[i].len() != len {
                    return Err(GrpoError::AlignmentMismatch(format!(
                        "trajectory {i}: {name} has {} tokens, length is {len}",
                        lists[i].len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Normalizes rewards within a group. Identical rewards give all zeros.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

pub fn importance_ratios(group: &RolloutGroup) -> Result<Vec<Vec<f64>>, GrpoError> {
    group.check_alignment()?;
    Ok(group
        .logp_new
        .iter()
        .zip(&group.logp_old)
        .map(|(new, old)| new.iter().zip(old).map(|(n, o)| (n - o).exp()).collect())
        .collect())
}

fn kl_value(logp_new: f64, logp_ref: f64, estimator: KlEstimator) -> f64 {
    match estimator {
        KlEstimator::K3 => {
            let d = logp_ref - logp_new;
            d.exp() - d - 1.0
        }
        KlEstimator::Naive => logp_new - logp_ref,
    }
}

/// d KL / d logp_new.
fn kl_grad(logp_new: f64, logp_ref: f64, estimator: KlEstimator) -> f64 {
    match estimator {
        KlEstimator::K3 => 1.0 - (logp_ref - logp_new).exp(),
        KlEstimator::Naive => 1.0,
    }
}

/// Per-token KL estimate against the reference policy.
pub fn token_kl(group: &RolloutGroup, estimator: KlEstimator) -> Result<Vec<Vec<f64>>, GrpoError> {
    group.check_alignment()?;
    Ok(group
        .logp_new
        .iter()
        .zip(&group.logp_ref)
        .map(|(new, rf)| new.iter().zip(rf).map(|(n, r)| kl_value(*n, *r, estimator)).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Share of tokens where the clipped surrogate is strictly smaller.
    pub clip_fraction: f64,
    /// Sequence-mean KL averaged over trajectories.
    pub mean_kl: f64,
    pub advantages: Vec<f64>,
}

/// Loss value plus its gradient with respect to every `logp_new` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub report: LossReport,
    pub grad_logp_new: Vec<Vec<f64>>,
}

fn validate_group(group: &RolloutGroup) -> Result<(), GrpoError> {
    if group.len() < 2 {
        return Err(GrpoError::GroupTooSmall(group.len()));
    }
    group.check_alignment()?;
    if let Some(i) = group.lengths.iter().position(|&l| l == 0) {
        return Err(GrpoError::EmptyTrajectory(i));
    }
    Ok(())
}

pub fn grpo_loss(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<LossReport, GrpoError> {
    grpo_loss_with_grad(group, cfg).map(|l| l.report)
}

/// Loss and analytic gradient d loss / d logp_new in one pass.
pub fn grpo_loss_with_grad(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<LossWithGrad, GrpoError> {
    validate_group(group)?;
    let advantages = group_advantages(&group.rewards, cfg.eps)?;
    let g = group.len() as f64;
    let (lo, hi) = (1.0 - cfg.eps_low, 1.0 + cfg.eps_high);

    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut grad = Vec::with_capacity(group.len());

    for i in 0..group.len() {
        let adv = advantages[i];
        let len = group.lengths[i] as f64;
        let mut seq = 0.0;
        let mut seq_kl = 0.0;
        let mut row = Vec::with_capacity(group.lengths[i]);
        for t in 0..group.lengths[i] {
            let (new, old, rf) = (group.logp_new[i][t], group.logp_old[i][t], group.logp_ref[i][t]);
            let ratio = (new - old).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(lo, hi) * adv;
            let kl = kl_value(new, rf, cfg.kl_estimator);
            let (surrogate, d_surrogate) = if clipped < unclipped {
                clipped_tokens += 1;
                (clipped, 0.0)
            } else {
                (unclipped, unclipped)
            };
            seq += surrogate - cfg.beta * kl;
            seq_kl += kl;
            row.push(-(d_surrogate - cfg.beta * kl_grad(new, rf, cfg.kl_estimator)) / (g * len));
        }
        objective += seq / len;
        kl_sum += seq_kl / len;
        total_tokens += group.lengths[i];
        grad.push(row);
    }

    let report = LossReport {
        loss: -objective / g,
        clip_fraction: clipped_tokens as f64 / total_tokens as f64,
        mean_kl: kl_sum / g,
        advantages,
    };
    Ok(LossWithGrad { report, grad_logp_new: grad })
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutIoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: GrpoError },
}

/// Reads one group per non-blank line and checks alignment.
pub fn read_rollouts<R: BufRead>(reader: R) -> Result<Vec<RolloutGroup>, RolloutIoError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group: RolloutGroup =
            serde_json::from_str(&line).map_err(|source| RolloutIoError::Json { line: idx + 1, source })?;
        group.check_alignment().map_err(|source| RolloutIoError::Invalid { line: idx + 1, source })?;
        out.push(group);
    }
    Ok(out)
}

pub fn write_rollouts<W: Write>(mut writer: W, groups: &[RolloutGroup]) -> Result<(), RolloutIoError> {
    for g in groups {
        serde_json::to_writer(&mut writer, g).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(rewards: Vec<f64>, lens: &[usize]) -> RolloutGroup {
        let lp: Vec<Vec<f64>> = lens.iter().map(|&l| vec![-1.0; l]).collect();
        RolloutGroup::new(rewards, lp.clone(), lp.clone(), lp)
    }

    #[test]
    fn equal_rewards_zero_advantage() {
        assert_eq!(group_advantages(&[0.7; 5], 1e-6).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn one_hot_rewards() {
        // mean 0.25, population std sqrt(0.1875)
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-6).unwrap();
        let std = 0.1875_f64.sqrt();
        assert!((a[0] - 0.75 / (std + 1e-6)).abs() < 1e-12);
        assert!((a[0] - 1.7320).abs() < 1e-3);
        for v in &a[1..] {
            assert!((v + 0.5773).abs() < 1e-3);
        }
    }

    #[test]
    fn too_small_group() {
        assert_eq!(group_advantages(&[1.0], 1e-6), Err(GrpoError::GroupTooSmall(1)));
        assert_eq!(grpo_loss(&flat(vec![1.0], &[2]), &GrpoConfig::default()), Err(GrpoError::GroupTooSmall(1)));
    }

    #[test]
    fn ratios_and_kl() {
        let mut g = flat(vec![1.0, 0.0], &[3, 2]);
        assert!(importance_ratios(&g).unwrap().iter().flatten().all(|&r| r == 1.0));
        assert!(token_kl(&g, KlEstimator::K3).unwrap().iter().flatten().all(|&k| k == 0.0));
        g.logp_new[0][1] = g.logp_old[0][1] + std::f64::consts::LN_2;
        assert!((importance_ratios(&g).unwrap()[0][1] - 2.0).abs() < 1e-15);

        let mut h = flat(vec![1.0, 0.0], &[1, 1]);
        h.logp_ref[0][0] = h.logp_new[0][0] + std::f64::consts::LN_2;
        let kl = token_kl(&h, KlEstimator::K3).unwrap();
        assert!((kl[0][0] - (1.0 - std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((kl[0][0] - 0.30685).abs() < 1e-5);
    }

    #[test]
    fn misaligned_group_rejected() {
        let mut g = flat(vec![1.0, 0.0], &[3, 2]);
        g.logp_ref[1].push(0.0);
        assert!(matches!(grpo_loss(&g, &GrpoConfig::default()), Err(GrpoError::AlignmentMismatch(_))));
        let mut g = flat(vec![1.0, 0.0], &[3, 2]);
        g.lengths[0] = 4;
        assert!(matches!(importance_ratios(&g), Err(GrpoError::AlignmentMismatch(_))));
    }

    #[test]
    fn degenerate_group_zero_loss() {
        let r = grpo_loss(&flat(vec![0.5; 4], &[3, 1, 4, 2]), &GrpoConfig::default()).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.clip_fraction, 0.0);
        assert_eq!(r.mean_kl, 0.0);
    }

    #[test]
    fn clipped_token_contribution() {
        // Two single-token trajectories with advantages +1 and -1 (eps = 0
        // is not allowed, so take the limit numerically).
        let cfg = GrpoConfig { beta: 0.0, eps: 1e-300, ..GrpoConfig::default() };
        let mut g = flat(vec![1.0, 0.0], &[1, 1]);
        g.logp_new[0][0] = g.logp_old[0][0] + 2.0_f64.ln();
        let r = grpo_loss(&g, &cfg).unwrap();
        assert!((r.advantages[0] - 1.0).abs() < 1e-12);
        // Trajectory 0: min(2.0, 1.3) = 1.3; trajectory 1: ratio 1, A = -1.
        assert!((r.loss - (-(1.3 - 1.0) / 2.0)).abs() < 1e-12);
        assert_eq!(r.clip_fraction, 0.5);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let g = flat(vec![1.0, 0.0], &[0, 2]);
        assert_eq!(grpo_loss(&g, &GrpoConfig::default()), Err(GrpoError::EmptyTrajectory(0)));
    }

    #[test]
    fn config_validation() {
        GrpoConfig::default().validate().unwrap();
        assert!(GrpoConfig { eps: 0.0, ..GrpoConfig::default() }.validate().is_err());
        assert!(GrpoConfig { eps_high: 1.5, ..GrpoConfig::default() }.validate().is_err());
        assert!(GrpoConfig { beta: -1.0, ..GrpoConfig::default() }.validate().is_err());
    }

    #[test]
    fn rollout_lines() {
        let g = flat(vec![1.0, 0.25], &[2, 1]);
        let mut buf = Vec::new();
        write_rollouts(&mut buf, &[g.clone(), g.clone()]).unwrap();
        let back = read_rollouts(&buf[..]).unwrap();
        assert_eq!(back, vec![g.clone(), g]);
        let bad = b"{\"rewards\":[1.0],\"logp_new\":[[0.0]],\"logp_old\":[],\"logp_ref\":[[0.0]],\"lengths\":[1]}\n";
        assert!(matches!(read_rollouts(&bad[..]), Err(RolloutIoError::Invalid { line: 1, .. })));
    }
}
