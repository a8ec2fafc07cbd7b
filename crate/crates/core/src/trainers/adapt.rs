use std::collections::HashMap;

use rayon::prelude::*;
use rlfb_numerics::{AdamW, AdamWConfig};
use serde::{Deserialize, Serialize};

use super::groups::{
    collect_group, preference_pair, raft_select, self_train_select, RewardedGroup,
};
use super::losses::{dpo_loss, grpo_advantages, grpo_objective_sum, GrpoItem};
use super::{Algorithm, RatioDenominator, TrainConfig};
use crate::error::{Error, Result};
use crate::lm::{RewardConfig, RewardLm};
use crate::policy::{BeamConfig, Labeled, Policy};
use crate::rng::stream;
use crate::world::{AudioUtterance, Frames, World};

/// Everything an adaptation run reads but never writes.
#[derive(Clone, Copy)]
pub struct AdaptContext<'a> {
    pub world: &'a World,
    /// Frozen pretrained policy.
    pub reference: &'a Policy,
    pub lm: &'a RewardLm,
    pub reward: &'a RewardConfig,
    pub beam: &'a BeamConfig,
    pub train: &'a TrainConfig,
    pub algo: Algorithm,
    pub seed: u64,
}

pub struct AdaptState {
    pub policy: Policy,
    pub opt: AdamW,
}

impl AdaptState {
    pub fn new(policy: Policy, cfg: &TrainConfig) -> Self {
        Self {
            policy,
            opt: AdamW::new(AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                eps: cfg.adam_eps,
                ..Default::default()
            }),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub algo: String,
    /// Mean over groups of the group-mean reward.
    pub mean_reward: Option<f64>,
    pub mean_loss: Option<f64>,
    pub degenerate_groups: usize,
    pub groups: usize,
    /// Share of groups where the reward argmax equals the recognizer argmax.
    pub agreement_rate: Option<f64>,
    pub updates: usize,
    pub checkpoint_id: String,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn prompt_of<'a>(world: &'a World, domain: &str) -> Result<&'a str> {
    world
        .domain(domain)
        .map(|d| d.context_prompt.as_str())
        .ok_or_else(|| Error::Data(format!("unknown domain {domain:?}")))
}

/// Collects groups for a batch with the current policy, in parallel. Each
/// utterance draws from its own named stream.
fn collect_batch(
    ctx: &AdaptContext<'_>,
    policy: &Policy,
    batch: &[AudioUtterance<'_>],
    epoch: usize,
) -> Result<Vec<RewardedGroup>> {
    batch
        .par_iter()
        .map(|u| {
            let mut rng = stream(ctx.seed, &format!("adapt/e{epoch}/{}", u.id));
            let prompt = prompt_of(ctx.world, u.domain)?;
            collect_group(policy, ctx.lm, ctx.reward, ctx.beam, *u, prompt, &mut rng)
        })
        .collect()
}

fn pseudo_label_step(
    state: &mut AdaptState,
    groups: &[RewardedGroup],
    frames: &HashMap<&str, &Frames>,
    select: fn(&RewardedGroup) -> Result<usize>,
) -> Result<Option<f64>> {
    let mut batch = Vec::new();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let i = select(g)?;
        batch.push(Labeled {
            frames: frames[g.utterance_id.as_str()],
            words: &g.words[i],
        });
    }
    if batch.is_empty() {
        return Ok(None);
    }
    let policy = &mut state.policy;
    Ok(Some(policy.teacher_forced_step(&batch, &mut state.opt)?))
}

fn dpo_step(
    ctx: &AdaptContext<'_>,
    state: &mut AdaptState,
    groups: &[RewardedGroup],
    frames: &HashMap<&str, &Frames>,
) -> Result<Option<f64>> {
    struct Item<'a> {
        frames: &'a Frames,
        pos: &'a [usize],
        neg: &'a [usize],
    }
    let items: Vec<Item<'_>> = groups
        .iter()
        .filter_map(|g| {
            preference_pair(g).map(|p| Item {
                frames: frames[g.utterance_id.as_str()],
                pos: &g.hypotheses[p.preferred].tokens,
                neg: &g.hypotheses[p.rejected].tokens,
            })
        })
        .collect();
    if items.is_empty() {
        return Ok(None);
    }
    let refs: Vec<(f64, f64)> = items
        .par_iter()
        .map(|it| {
            Ok((
                ctx.reference.sequence_logprob(it.frames, it.pos)?,
                ctx.reference.sequence_logprob(it.frames, it.neg)?,
            ))
        })
        .collect::<Result<_>>()?;
    let indexed: Vec<(usize, &Item<'_>)> = items.iter().enumerate().collect();
    let beta = ctx.train.beta_dpo;
    let policy = &state.policy;
    let (losses, grads) = policy.parallel_grads(&indexed, |lv, (i, it)| {
        let lp_pos = policy.token_logprobs_var(lv, it.frames, it.pos)?.sum();
        let lp_neg = policy.token_logprobs_var(lv, it.frames, it.neg)?.sum();
        let (rp, rn) = refs[*i];
        Ok(dpo_loss(lp_pos, lp_neg, rp, rn, beta))
    })?;
    let n = items.len() as f64;
    state.policy.apply_grads(&grads, 1.0 / n, &mut state.opt)?;
    Ok(mean(&losses))
}

fn grpo_steps(
    ctx: &AdaptContext<'_>,
    state: &mut AdaptState,
    groups: &[RewardedGroup],
    frames: &HashMap<&str, &Frames>,
) -> Result<Option<f64>> {
    struct Item<'a> {
        frames: &'a Frames,
        group: &'a RewardedGroup,
        advantages: Vec<f64>,
        denominators: Vec<Vec<f64>>,
        reference: Vec<Vec<f64>>,
    }
    let usable: Vec<&RewardedGroup> = groups.iter().filter(|g| g.len() >= 2).collect();
    let items: Vec<Item<'_>> = usable
        .par_iter()
        .map(|g| {
            let f = frames[g.utterance_id.as_str()];
            let reference = g
                .hypotheses
                .iter()
                .map(|h| ctx.reference.token_logprobs(f, &h.tokens))
                .collect::<Result<Vec<_>>>()?;
            let denominators = match ctx.train.ratio_denominator {
                RatioDenominator::Snapshot => g
                    .hypotheses
                    .iter()
                    .map(|h| h.per_token_logprob.clone())
                    .collect(),
                RatioDenominator::Reference => reference.clone(),
            };
            Ok(Item {
                frames: f,
                group: g,
                advantages: grpo_advantages(&g.rewards, ctx.train.std_guard)?,
                denominators,
                reference,
            })
        })
        .collect::<Result<_>>()?;
    // groups with zero spread contribute nothing
    let items: Vec<Item<'_>> = items
        .into_iter()
        .filter(|it| it.advantages.iter().any(|a| *a != 0.0))
        .collect();
    if items.is_empty() {
        return Ok(None);
    }
    let n_hyps: usize = items.iter().map(|it| it.group.len()).sum();
    let (eps, beta) = (ctx.train.eps_clip, ctx.train.beta_kl);
    let mut losses = Vec::new();
    for _ in 0..ctx.train.grpo_inner_steps {
        let policy = &state.policy;
        let (per_group, grads) = policy.parallel_grads(&items, |lv, it| {
            let mut currents = Vec::with_capacity(it.group.len());
            for h in &it.group.hypotheses {
                currents.push(policy.token_logprobs_var(lv, it.frames, &h.tokens)?);
            }
            let batch: Vec<GrpoItem<'_, '_>> = currents
                .into_iter()
                .enumerate()
                .map(|(i, current)| GrpoItem {
                    current,
                    snapshot: &it.denominators[i],
                    reference: &it.reference[i],
                    advantage: it.advantages[i],
                })
                .collect();
            grpo_objective_sum(&batch, eps, beta)
        })?;
        losses.push(per_group.iter().sum::<f64>() / n_hyps as f64);
        state.policy.apply_grads(&grads, 1.0 / n_hyps as f64, &mut state.opt)?;
    }
    Ok(mean(&losses))
}

/// One pass over `utterances` (already in epoch order): collect groups with
/// the latest policy, score them, update per the algorithm.
pub fn adapt_epoch(
    ctx: &AdaptContext<'_>,
    state: &mut AdaptState,
    utterances: &[AudioUtterance<'_>],
    epoch: usize,
) -> Result<EpochStats> {
    let frames: HashMap<&str, &Frames> = utterances.iter().map(|u| (u.id, u.frames)).collect();
    let mut group_rewards = Vec::new();
    let mut losses = Vec::new();
    let mut degenerate = 0;
    let mut n_groups = 0;
    let mut agree = 0;
    let mut comparable = 0;
    let mut updates = 0;
    for batch in utterances.chunks(ctx.train.batch_size) {
        let groups = collect_batch(ctx, &state.policy, batch, epoch)?;
        for g in &groups {
            n_groups += 1;
            if g.degenerate {
                degenerate += 1;
            }
            if let Some(m) = mean(&g.rewards) {
                group_rewards.push(m);
            }
            if !g.is_empty() {
                comparable += 1;
                if raft_select(g)? == self_train_select(g)? {
                    agree += 1;
                }
            }
        }
        let loss = match ctx.algo {
            Algorithm::Rescore => None,
            Algorithm::SelfTraining => pseudo_label_step(state, &groups, &frames, self_train_select)?,
            Algorithm::Raft => pseudo_label_step(state, &groups, &frames, raft_select)?,
            Algorithm::Dpo => dpo_step(ctx, state, &groups, &frames)?,
            Algorithm::Grpo => grpo_steps(ctx, state, &groups, &frames)?,
        };
        if let Some(l) = loss {
            losses.push(l);
            updates += 1;
        }
    }
    if n_groups > 0 && degenerate == n_groups {
        return Err(Error::Training(format!(
            "epoch {epoch}: all {n_groups} groups are degenerate; \
             raise the sampling temperature or the beam width"
        )));
    }
    Ok(EpochStats {
        epoch,
        algo: ctx.algo.as_str().to_string(),
        mean_reward: mean(&group_rewards),
        mean_loss: mean(&losses),
        degenerate_groups: degenerate,
        groups: n_groups,
        agreement_rate: (comparable > 0).then(|| agree as f64 / comparable as f64),
        updates,
        checkpoint_id: state.policy.checkpoint_id(),
    })
}

/// Full adaptation from `init` (normally a copy of the reference policy).
/// Rescoring runs a single statistics-only epoch.
pub fn run_adaptation(
    ctx: &AdaptContext<'_>,
    init: Policy,
    utterances: &[AudioUtterance<'_>],
) -> Result<(Policy, Vec<EpochStats>)> {
    ctx.train.validate()?;
    if utterances.is_empty() {
        return Err(Error::Config("empty adaptation split".into()));
    }
    let mut state = AdaptState::new(init, ctx.train);
    let epochs = if ctx.algo.trains() { ctx.train.epochs } else { 1 };
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<AudioUtterance<'_>> = utterances.to_vec();
        let mut rng = stream(ctx.seed, &format!("adapt/e{epoch}/order"));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        log.push(adapt_epoch(ctx, &mut state, &order, epoch)?);
    }
    Ok((state.policy, log))
}
