//! Adaptation algorithms driven by reward-LM feedback: self-training, RAFT,
//! on-policy DPO, GRPO, and training-free reward rescoring.

mod adapt;
mod groups;
mod losses;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adapt::{adapt_epoch, run_adaptation, AdaptContext, AdaptState, EpochStats};
pub use groups::{
    collect_group, preference_pair, raft_select, rescore_select, self_train_select, PreferencePair,
    RewardedGroup,
};
pub use losses::{
    dpo_loss, dpo_loss_value, grpo_advantages, grpo_loss, grpo_objective_sum, GrpoItem,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "self")]
    SelfTraining,
    #[serde(rename = "raft")]
    Raft,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "rescore")]
    Rescore,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::SelfTraining,
        Algorithm::Raft,
        Algorithm::Dpo,
        Algorithm::Grpo,
        Algorithm::Rescore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::SelfTraining => "self",
            Algorithm::Raft => "raft",
            Algorithm::Dpo => "dpo",
            Algorithm::Grpo => "grpo",
            Algorithm::Rescore => "rescore",
        }
    }

    /// Whether the algorithm updates the policy.
    pub fn trains(self) -> bool {
        self != Algorithm::Rescore
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown algorithm {s:?}; choose one of self, raft, dpo, grpo, rescore"
                ))
            })
    }
}

/// Which policy supplies the GRPO importance-ratio denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioDenominator {
    /// The policy that sampled the group.
    Snapshot,
    /// The frozen pretrained policy.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Utterances collected per update.
    pub batch_size: usize,
    pub beta_dpo: f64,
    pub beta_kl: f64,
    pub eps_clip: f64,
    pub std_guard: f64,
    /// Gradient steps taken on each collected GRPO batch.
    pub grpo_inner_steps: usize,
    pub ratio_denominator: RatioDenominator,
    pub weight_decay: f64,
    /// Adam's denominator floor.
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            beta_dpo: 0.3,
            beta_kl: 0.2,
            eps_clip: 0.2,
            std_guard: 1e-8,
            grpo_inner_steps: 2,
            ratio_denominator: RatioDenominator::Snapshot,
            weight_decay: 0.0,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.beta_dpo > 0.0) || !(self.beta_kl >= 0.0) {
            return bad("train.lr >= 0, train.beta_dpo > 0 and train.beta_kl >= 0 are required");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("train.eps_clip must be in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps must be positive");
        }
        if !(self.std_guard > 0.0) || self.grpo_inner_steps == 0 {
            return bad("train.std_guard and train.grpo_inner_steps must be positive");
        }
        Ok(())
    }
}
