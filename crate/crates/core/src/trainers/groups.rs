use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{reward, RewardConfig, RewardLm};
use crate::policy::{BeamConfig, Hypothesis, Policy};
use crate::rng::Rng;
use crate::world::AudioUtterance;

/// Sampled hypotheses of one utterance with their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardedGroup {
    pub utterance_id: String,
    pub domain: String,
    pub hypotheses: Vec<Hypothesis>,
    pub words: Vec<Vec<String>>,
    pub p_llm: Vec<f64>,
    pub p_asr: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Fewer than two distinct hypotheses survived.
    pub degenerate: bool,
    /// Policy that generated the group.
    pub checkpoint_id: String,
}

impl RewardedGroup {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Builds a group from scored hypotheses; rewards come from `cfg`.
    pub fn from_scores(
        utterance_id: &str,
        domain: &str,
        hypotheses: Vec<Hypothesis>,
        words: Vec<Vec<String>>,
        p_llm: Vec<f64>,
        cfg: &RewardConfig,
        checkpoint_id: String,
    ) -> Self {
        let p_asr: Vec<f64> = hypotheses.iter().map(|h| h.total_logprob).collect();
        let rewards = p_llm
            .iter()
            .zip(&p_asr)
            .map(|(&l, &a)| reward(cfg, l, a))
            .collect();
        let mut distinct = words.clone();
        distinct.sort();
        distinct.dedup();
        Self {
            utterance_id: utterance_id.to_string(),
            domain: domain.to_string(),
            degenerate: distinct.len() < 2,
            hypotheses,
            words,
            p_llm,
            p_asr,
            rewards,
            checkpoint_id,
        }
    }
}

/// Samples the n-best list with the current policy and scores it with the
/// reward LM under `prompt`. Hypotheses without words are dropped since the
/// template needs a non-empty hypothesis.
pub fn collect_group(
    policy: &Policy,
    lm: &RewardLm,
    cfg: &RewardConfig,
    beam: &BeamConfig,
    utterance: AudioUtterance<'_>,
    domain_prompt: &str,
    rng: &mut Rng,
) -> Result<RewardedGroup> {
    let nbest = policy.beam_sample(utterance.id, utterance.frames, beam, rng)?;
    let prompt = cfg.prompt_for(domain_prompt);
    let mut hyps = Vec::new();
    let mut words = Vec::new();
    let mut p_llm = Vec::new();
    for h in nbest.hypotheses {
        let w = policy.vocab().decode(&h.tokens);
        if w.is_empty() {
            continue;
        }
        p_llm.push(lm.score(prompt, &w)?);
        words.push(w);
        hyps.push(h);
    }
    Ok(RewardedGroup::from_scores(
        utterance.id,
        utterance.domain,
        hyps,
        words,
        p_llm,
        cfg,
        nbest.meta.checkpoint_id,
    ))
}

fn first_max(xs: &[f64]) -> usize {
    crate::policy::argmax(xs).0
}

fn first_min(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v < xs[best] {
            best = i;
        }
    }
    best
}

fn non_empty(group: &RewardedGroup) -> Result<()> {
    if group.is_empty() {
        return Err(Error::Usage(format!("group {} is empty", group.utterance_id)));
    }
    Ok(())
}

/// Index of the highest-reward hypothesis (lowest index on ties).
pub fn raft_select(group: &RewardedGroup) -> Result<usize> {
    non_empty(group)?;
    Ok(first_max(&group.rewards))
}

/// Index of the highest recognizer score; the LM is ignored.
pub fn self_train_select(group: &RewardedGroup) -> Result<usize> {
    non_empty(group)?;
    Ok(first_max(&group.p_asr))
}

/// Same choice as [`raft_select`], used for reranking without training.
pub fn rescore_select(group: &RewardedGroup) -> Result<usize> {
    raft_select(group)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub preferred: usize,
    pub rejected: usize,
}

/// `(argmax, argmin)` reward pair, or `None` for groups that cannot give two
/// different hypotheses.
pub fn preference_pair(group: &RewardedGroup) -> Option<PreferencePair> {
    if group.degenerate || group.len() < 2 {
        return None;
    }
    let preferred = first_max(&group.rewards);
    let rejected = first_min(&group.rewards);
    (preferred != rejected && group.words[preferred] != group.words[rejected])
        .then_some(PreferencePair { preferred, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(p_llm: Vec<f64>, p_asr: Vec<f64>, lambda: f64) -> RewardedGroup {
        let n = p_llm.len();
        let hyps = p_asr
            .iter()
            .enumerate()
            .map(|(i, &lp)| Hypothesis {
                tokens: vec![i, 99],
                per_token_logprob: vec![lp, 0.0],
                total_logprob: lp,
                truncated: false,
            })
            .collect();
        let words = (0..n).map(|i| vec![format!("w{i}")]).collect();
        let cfg = RewardConfig {
            lambda,
            ..Default::default()
        };
        RewardedGroup::from_scores("u", "d", hyps, words, p_llm, &cfg, "ck".into())
    }

    #[test]
    fn raft_picks_argmax_with_low_index_ties() {
        let g = group(vec![-5.0, -3.0, -4.0], vec![0.0; 3], 0.0);
        assert_eq!(raft_select(&g).unwrap(), 1);
        let g = group(vec![-3.0, -3.0], vec![0.0; 2], 0.0);
        assert_eq!(raft_select(&g).unwrap(), 0);
        assert_eq!(rescore_select(&g).unwrap(), raft_select(&g).unwrap());
    }

    #[test]
    fn self_training_ignores_the_lm() {
        let g = group(vec![-1.0, -9.0], vec![-2.0, -1.0], 0.5);
        assert_eq!(self_train_select(&g).unwrap(), 1);
        let g = group(vec![-1.0, -9.0], vec![-2.0, -2.0], 0.5);
        assert_eq!(self_train_select(&g).unwrap(), 0);
    }

    #[test]
    fn rewards_recompute_exactly() {
        let g = group(vec![-1.5, -2.25, -7.0], vec![-0.5, -3.0, -1.0], 0.5);
        for i in 0..3 {
            assert_eq!(g.rewards[i], g.p_llm[i] + 0.5 * g.p_asr[i]);
        }
    }

    #[test]
    fn identical_hypotheses_are_degenerate() {
        let mut g = group(vec![-1.0, -2.0], vec![-1.0, -1.0], 0.5);
        assert!(!g.degenerate);
        g.words = vec![vec!["a".into()], vec!["a".into()]];
        let cfg = RewardConfig::default();
        let g = RewardedGroup::from_scores(
            "u",
            "d",
            g.hypotheses,
            g.words,
            g.p_llm,
            &cfg,
            "ck".into(),
        );
        assert!(g.degenerate);
        assert!(preference_pair(&g).is_none());
    }

    #[test]
    fn preference_pair_is_argmax_argmin() {
        let g = group(vec![-4.0, -1.0, -9.0, -2.0], vec![0.0; 4], 0.5);
        let p = preference_pair(&g).unwrap();
        assert_eq!((p.preferred, p.rejected), (1, 2));
        assert!(g.rewards[p.preferred] >= g.rewards[p.rejected]);
    }

    #[test]
    fn selection_is_shift_invariant() {
        let g = group(vec![-4.0, -1.0, -9.0, -2.0], vec![-1.0, -3.0, 0.0, -2.0], 0.5);
        let mut h = g.clone();
        for r in h.rewards.iter_mut() {
            *r += 17.25;
        }
        assert_eq!(raft_select(&g).unwrap(), raft_select(&h).unwrap());
        assert_eq!(preference_pair(&g), preference_pair(&h));
    }

    #[test]
    fn equal_rankings_make_raft_and_self_agree() {
        // the LM scores mirror the recognizer scores exactly
        for seed in 0..20u64 {
            let p_asr: Vec<f64> = (0..6).map(|i| -(((seed * 7 + i * 13) % 11) as f64)).collect();
            let g = group(p_asr.clone(), p_asr, 0.0);
            assert_eq!(raft_select(&g).unwrap(), self_train_select(&g).unwrap());
        }
    }
}
