//! Training objectives: next-token cross-entropy, DPO, GROUPER with its
//! z-score → min-max advantage map, and GRPO mean-baseline advantages with
//! zero-variance group filtering.

mod advantages;
mod losses;

pub use advantages::{group_std, grouper_advantages, grpo_advantages, GrpoAdvantages};
pub use losses::{
    dpo_loss, dpo_loss_value, grouper_batch_loss, grouper_loss, grpo_surrogate_loss, sft_loss,
    sft_loss_value,
};

use serde::{Deserialize, Serialize};

use crate::numcore::NumError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PostTrainError {
    #[error("invalid preference pair: {0}")]
    InvalidPair(String),
    #[error("invalid reward group: {0}")]
    InvalidGroup(String),
    #[error("group has {got} responses, expected {expected}")]
    GroupSizeMismatch { expected: usize, got: usize },
    #[error("degenerate group: reward std {std} is within the zero-variance tolerance")]
    Degenerate { std: f64 },
    #[error("every group was removed by zero-variance filtering")]
    EmptyBatch,
    #[error("every position is masked")]
    AllMasked,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// Divide by G.
    #[default]
    Population,
    /// Divide by G − 1.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub group_size: usize,
    pub grouper_std_mode: StdMode,
    pub zero_variance_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            group_size: 4,
            grouper_std_mode: StdMode::Population,
            zero_variance_eps: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), PostTrainError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PostTrainError::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.group_size < 2 {
            return Err(PostTrainError::InvalidConfig(format!(
                "group_size must be ≥ 2, got {}",
                self.group_size
            )));
        }
        if !(self.zero_variance_eps >= 0.0) {
            return Err(PostTrainError::InvalidConfig(
                "zero_variance_eps must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_logprobs(what: &str, lp: &[f64]) -> Result<(), PostTrainError> {
    if lp.is_empty() {
        return Err(PostTrainError::InvalidPair(format!(
            "{what} response is empty"
        )));
    }
    if let Some(v) = lp.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
        return Err(PostTrainError::InvalidPair(format!(
            "{what} log-probability {v} is not finite and ≤ 0"
        )));
    }
    Ok(())
}

/// One preference comparison with per-token log-probabilities of the chosen
/// and rejected responses under the policy and the frozen reference.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt_len: usize,
    pub chosen_logprobs_policy: Vec<f64>,
    pub chosen_logprobs_ref: Vec<f64>,
    pub rejected_logprobs_policy: Vec<f64>,
    pub rejected_logprobs_ref: Vec<f64>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), PostTrainError> {
        check_logprobs("chosen policy", &self.chosen_logprobs_policy)?;
        check_logprobs("chosen reference", &self.chosen_logprobs_ref)?;
        check_logprobs("rejected policy", &self.rejected_logprobs_policy)?;
        check_logprobs("rejected reference", &self.rejected_logprobs_ref)?;
        if self.chosen_logprobs_policy.len() != self.chosen_logprobs_ref.len()
            || self.rejected_logprobs_policy.len() != self.rejected_logprobs_ref.len()
        {
            return Err(PostTrainError::InvalidPair(
                "policy and reference lengths differ".into(),
            ));
        }
        Ok(())
    }

    /// β-free margin: chosen log-ratio minus rejected log-ratio.
    pub fn margin(&self) -> f64 {
        let s = |v: &[f64]| v.iter().sum::<f64>();
        (s(&self.chosen_logprobs_policy) - s(&self.chosen_logprobs_ref))
            - (s(&self.rejected_logprobs_policy) - s(&self.rejected_logprobs_ref))
    }

    pub fn loss(&self, cfg: &LossConfig) -> Result<f64, PostTrainError> {
        self.validate()?;
        Ok(dpo_loss_value(self.margin(), cfg.beta))
    }
}

/// G sampled responses to one prompt with their scalar rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub response_logprobs_policy: Vec<Vec<f64>>,
}

impl RewardGroup {
    pub fn new(
        rewards: Vec<f64>,
        response_logprobs_policy: Vec<Vec<f64>>,
    ) -> Result<Self, PostTrainError> {
        if rewards.len() != response_logprobs_policy.len() {
            return Err(PostTrainError::InvalidGroup(format!(
                "{} rewards for {} responses",
                rewards.len(),
                response_logprobs_policy.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(PostTrainError::InvalidGroup(
                "rewards must be finite".into(),
            ));
        }
        if response_logprobs_policy.iter().any(Vec::is_empty) {
            return Err(PostTrainError::InvalidGroup(
                "every response needs at least one token".into(),
            ));
        }
        Ok(Self {
            rewards,
            response_logprobs_policy,
        })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.response_logprobs_policy.iter().map(Vec::len).collect()
    }
}

impl AsRef<[f64]> for RewardGroup {
    fn as_ref(&self) -> &[f64] {
        &self.rewards
    }
}
