//! Reward, group-relative advantages and the clipped policy surrogate.
//!
//! Everything here is a pure function of supplied numbers; no parameters are
//! updated.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::prompting::RefLabel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignmentError {
    #[error("true price must be positive and finite, got {0}")]
    InvalidTruth(f64),
    #[error("predicted price must be finite, got {0}")]
    InvalidPrediction(f64),
    #[error("golden subset is empty")]
    EmptyGolden,
    #[error("alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid group config: {0}")]
    InvalidGroupConfig(String),
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("expected {expected} trajectories and advantages, got {trajectories} and {advantages}")]
    GroupSize {
        expected: usize,
        trajectories: usize,
        advantages: usize,
    },
    #[error("trajectory {index}: {reason}")]
    BadTrajectory { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Sharpness of the price term. The default puts the term at exactly 0.5
    /// at 20% relative error.
    pub alpha: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 25.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub price_term: f64,
    pub recall_term: f64,
    pub reward: f64,
}

/// `1 / (1 + alpha * ((predicted - truth) / truth)^2)`.
pub fn price_accuracy_reward(predicted: f64, truth: f64, alpha: f64) -> Result<f64, AlignmentError> {
    if !(truth.is_finite() && truth > 0.0) {
        return Err(AlignmentError::InvalidTruth(truth));
    }
    if !predicted.is_finite() {
        return Err(AlignmentError::InvalidPrediction(predicted));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(AlignmentError::InvalidAlpha(alpha));
    }
    let rel = (predicted - truth) / truth;
    Ok(1.0 / (1.0 + alpha * rel * rel))
}

/// Share of the golden subset that was cited.
pub fn subset_recall(cited: &BTreeSet<RefLabel>, golden: &BTreeSet<RefLabel>) -> Result<f64, AlignmentError> {
    if golden.is_empty() {
        return Err(AlignmentError::EmptyGolden);
    }
    Ok(cited.intersection(golden).count() as f64 / golden.len() as f64)
}

pub fn combined_reward(
    predicted: f64,
    truth: f64,
    cited: &BTreeSet<RefLabel>,
    golden: &BTreeSet<RefLabel>,
    cfg: &RewardConfig,
) -> Result<RewardReport, AlignmentError> {
    let price_term = price_accuracy_reward(predicted, truth, cfg.alpha)?;
    let recall_term = subset_recall(cited, golden)?;
    Ok(RewardReport {
        price_term,
        recall_term,
        reward: price_term * recall_term,
    })
}

/// Standardises rewards within a group using the population standard
/// deviation. A group with (near) zero spread carries no signal and gets all
/// zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, AlignmentError> {
    if rewards.len() < 2 {
        return Err(AlignmentError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Chosen-token log-probabilities of one sampled output under the current,
/// behaviour and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLogprobs {
    pub policy: Vec<f64>,
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
}

impl TrajectoryLogprobs {
    pub fn validate(&self) -> Result<(), String> {
        let n = self.policy.len();
        if n == 0 {
            return Err("empty trajectory".into());
        }
        if self.old.len() != n || self.reference.len() != n {
            return Err(format!(
                "length mismatch: policy {n}, old {}, reference {}",
                self.old.len(),
                self.reference.len()
            ));
        }
        let all = self.policy.iter().chain(&self.old).chain(&self.reference);
        if let Some(bad) = all.copied().find(|v| !(*v <= 0.0)) {
            return Err(format!("log-probability {bad} is not <= 0"));
        }
        Ok(())
    }

    /// Sequence-level importance ratio `pi(o) / pi_old(o)`.
    pub fn ratio(&self) -> f64 {
        self.policy.iter().zip(&self.old).map(|(p, o)| p - o).sum::<f64>().exp()
    }

    /// Mean per-token KL estimate against the reference policy.
    pub fn kl(&self) -> f64 {
        let total: f64 = self.reference.iter().zip(&self.policy).map(|(r, p)| kl_estimate(*r, *p)).sum();
        total / self.policy.len() as f64
    }
}

/// Non-negative estimator `exp(d) - d - 1` with `d = log p_ref - log p`.
pub fn kl_estimate(ref_logprob: f64, logprob: f64) -> f64 {
    let d = ref_logprob - logprob;
    // exp_m1 keeps precision near d = 0; the max absorbs last-ulp rounding.
    (d.exp_m1() - d).max(0.0)
}

/// Pessimistic clipped term `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta: 0.01,
        }
    }
}

impl GroupConfig {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        if self.group_size < 2 {
            return Err(AlignmentError::InvalidGroupConfig(format!("group_size {} < 2", self.group_size)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AlignmentError::InvalidGroupConfig(format!("epsilon {} outside (0,1)", self.epsilon)));
        }
        if !(self.beta >= 0.0) {
            return Err(AlignmentError::InvalidGroupConfig(format!("beta {} < 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTerm {
    pub ratio: f64,
    pub advantage: f64,
    pub unclipped: f64,
    pub clipped: f64,
    pub kl: f64,
    /// `clipped - beta * kl`.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub objective: f64,
    pub terms: Vec<TrajectoryTerm>,
}

/// Group objective: the mean over trajectories of the clipped term minus the
/// KL penalty.
pub fn grpo_surrogate(
    trajectories: &[TrajectoryLogprobs],
    advantages: &[f64],
    cfg: &GroupConfig,
) -> Result<SurrogateReport, AlignmentError> {
    cfg.validate()?;
    if trajectories.len() != cfg.group_size || advantages.len() != cfg.group_size {
        return Err(AlignmentError::GroupSize {
            expected: cfg.group_size,
            trajectories: trajectories.len(),
            advantages: advantages.len(),
        });
    }
    let mut terms = Vec::with_capacity(trajectories.len());
    for (index, (t, &a)) in trajectories.iter().zip(advantages).enumerate() {
        t.validate().map_err(|reason| AlignmentError::BadTrajectory { index, reason })?;
        let ratio = t.ratio();
        let kl = t.kl();
        let clipped = clipped_term(ratio, a, cfg.epsilon);
        terms.push(TrajectoryTerm {
            ratio,
            advantage: a,
            unclipped: ratio * a,
            clipped,
            kl,
            contribution: clipped - cfg.beta * kl,
        });
    }
    let objective = terms.iter().map(|t| t.contribution).sum::<f64>() / terms.len() as f64;
    Ok(SurrogateReport { objective, terms })
}

/// One sampled output in a batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub predicted: f64,
    #[serde(default)]
    pub cited: BTreeSet<RefLabel>,
    #[serde(flatten)]
    pub logprobs: TrajectoryLogprobs,
}

/// One prompt with its group of sampled outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: String,
    pub truth: f64,
    pub golden: BTreeSet<RefLabel>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_id: String,
    pub rewards: Vec<RewardReport>,
    pub advantages: Vec<f64>,
    pub objective: f64,
    pub mean_kl: f64,
}

pub fn score_group(
    group: &GroupRecord,
    reward: &RewardConfig,
    cfg: &GroupConfig,
) -> Result<GroupReport, AlignmentError> {
    let rewards = group
        .samples
        .iter()
        .map(|s| combined_reward(s.predicted, group.truth, &s.cited, &group.golden, reward))
        .collect::<Result<Vec<_>, _>>()?;
    let r: Vec<f64> = rewards.iter().map(|r| r.reward).collect();
    let advantages = group_advantages(&r)?;
    let trajs: Vec<TrajectoryLogprobs> = group.samples.iter().map(|s| s.logprobs.clone()).collect();
    let report = grpo_surrogate(&trajs, &advantages, cfg)?;
    let mean_kl = report.terms.iter().map(|t| t.kl).sum::<f64>() / report.terms.len() as f64;
    Ok(GroupReport {
        group_id: group.group_id.clone(),
        rewards,
        advantages,
        objective: report.objective,
        mean_kl,
    })
}

/// Scores every group independently; results keep input order.
pub fn score_groups(
    groups: &[GroupRecord],
    reward: &RewardConfig,
    cfg: &GroupConfig,
    mode: ExecMode,
) -> Vec<Result<GroupReport, AlignmentError>> {
    exec::map(mode, groups, |g| score_group(g, reward, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(xs: &[usize]) -> BTreeSet<RefLabel> {
        xs.iter().map(|&i| RefLabel::new(i)).collect()
    }

    #[test]
    fn reward_examples() {
        assert_eq!(price_accuracy_reward(100.0, 100.0, 25.0).unwrap(), 1.0);
        assert!((price_accuracy_reward(120.0, 100.0, 25.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(price_accuracy_reward(1e12, 100.0, 25.0).unwrap() < 1e-10);
        assert_eq!(price_accuracy_reward(1.0, 0.0, 25.0), Err(AlignmentError::InvalidTruth(0.0)));

        assert_eq!(subset_recall(&labels(&[1, 2]), &labels(&[1, 2])).unwrap(), 1.0);
        assert_eq!(subset_recall(&labels(&[3]), &labels(&[1, 2])).unwrap(), 0.0);
        assert_eq!(subset_recall(&labels(&[1, 2]), &labels(&[1, 2, 3, 4])).unwrap(), 0.5);
        assert_eq!(subset_recall(&labels(&[1]), &labels(&[])), Err(AlignmentError::EmptyGolden));

        let cfg = RewardConfig::default();
        let r = combined_reward(120.0, 100.0, &labels(&[1, 2]), &labels(&[1, 2, 3, 4]), &cfg).unwrap();
        assert!((r.reward - 0.25).abs() < 1e-12);
        let r = combined_reward(100.0, 100.0, &labels(&[]), &labels(&[1]), &cfg).unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.3, 0.3, 0.3]).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert!(group_advantages(&[1.0]).is_err());
    }

    #[test]
    fn clip_examples() {
        assert!((clipped_term(1.3, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_term(0.7, -1.0, 0.2) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_policies_give_zero() {
        let cfg = GroupConfig::default();
        let trajs: Vec<_> = (0..8)
            .map(|i| {
                let lp = vec![-0.1 * (i + 1) as f64, -0.5];
                TrajectoryLogprobs {
                    policy: lp.clone(),
                    old: lp.clone(),
                    reference: lp,
                }
            })
            .collect();
        let adv = group_advantages(&[0.1, 0.9, 0.4, 0.4, 0.0, 1.0, 0.2, 0.7]).unwrap();
        let r = grpo_surrogate(&trajs, &adv, &cfg).unwrap();
        assert!(r.objective.abs() < 1e-9);
    }

    #[test]
    fn surrogate_rejects_bad_shapes() {
        let cfg = GroupConfig {
            group_size: 2,
            ..Default::default()
        };
        let t = TrajectoryLogprobs {
            policy: vec![-0.1],
            old: vec![-0.1, -0.2],
            reference: vec![-0.1],
        };
        assert!(matches!(
            grpo_surrogate(&[t.clone(), t.clone()], &[1.0, -1.0], &cfg),
            Err(AlignmentError::BadTrajectory { index: 0, .. })
        ));
        assert!(matches!(grpo_surrogate(&[t], &[1.0, -1.0], &cfg), Err(AlignmentError::GroupSize { .. })));
    }

    #[test]
    fn batch_record_roundtrip() {
        let line = r#"{"group_id":"g1","truth":100,"golden":["B1","B2"],"samples":[
            {"predicted":100,"cited":["B1","B2"],"policy":[-0.1],"old":[-0.1],"reference":[-0.1]},
            {"predicted":150,"cited":["B1"],"policy":[-0.2],"old":[-0.3],"reference":[-0.2]}]}"#;
        let g: GroupRecord = serde_json::from_str(line).unwrap();
        let cfg = GroupConfig {
            group_size: 2,
            ..Default::default()
        };
        let r = score_group(&g, &RewardConfig::default(), &cfg).unwrap();
        assert_eq!(r.rewards[0].reward, 1.0);
        assert!((r.advantages[0] - 1.0).abs() < 1e-12 && (r.advantages[1] + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reward_in_unit_interval(pred in 0.0f64..1e6, truth in 0.01f64..1e6, g in 1usize..10, c in prop::collection::btree_set(1usize..12, 0..12)) {
            let golden = labels(&(1..=g).collect::<Vec<_>>());
            let cited: BTreeSet<_> = c.into_iter().map(RefLabel::new).collect();
            let r = combined_reward(pred, truth, &cited, &golden, &RewardConfig::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.reward));
            prop_assert_eq!(r.reward, r.price_term * r.recall_term);
        }

        #[test]
        fn price_term_symmetric(truth in 0.01f64..1e5, delta in 0.0f64..0.99) {
            let up = price_accuracy_reward(truth * (1.0 + delta), truth, 25.0).unwrap();
            let down = price_accuracy_reward(truth * (1.0 - delta), truth, 25.0).unwrap();
            prop_assert!((up - down).abs() < 1e-9);
        }

        #[test]
        fn kl_non_negative(a in -50.0f64..0.0, b in -50.0f64..0.0) {
            prop_assert!(kl_estimate(a, b) >= 0.0);
        }

        #[test]
        fn advantages_centered_and_scale_free(rs in prop::collection::vec(0.0f64..1.0, 2..16), c in 0.01f64..100.0) {
            let a = group_advantages(&rs).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            let scaled: Vec<f64> = rs.iter().map(|r| r * c).collect();
            let b = group_advantages(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn clipped_never_exceeds_unclipped(r in 0.0f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
            prop_assert!(clipped_term(r, a, eps) <= r * a + 1e-12);
        }
    }
}
