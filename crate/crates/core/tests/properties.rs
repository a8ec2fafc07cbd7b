//! Cross-module invariants on a small world: data contracts, policy and
//! reward-LM behavior, and the trainers' selection and update rules.

use std::sync::OnceLock;

use proptest::prelude::*;
use rlfb_core::lm::{render_corpus, reward, train_lm, LmConfig, RewardConfig, RewardLm};
use rlfb_core::policy::{pretrain, BeamConfig, Labeled, Policy, PolicyConfig, PretrainConfig};
use rlfb_core::rng::stream;
use rlfb_core::trainers::{
    collect_group, dpo_loss, grpo_advantages, grpo_loss, preference_pair, raft_select,
    run_adaptation, AdaptContext, Algorithm, GrpoItem, RewardedGroup, TrainConfig,
};
use rlfb_core::world::{build_world, generate_corpus, DomainRole, Split, Splits, World, WorldConfig};
use rlfb_numerics::{AdamW, AdamWConfig};

fn small_world_config() -> WorldConfig {
    WorldConfig {
        pretrain_size: 400,
        adapt_size: 12,
        test_size: 12,
        lm_source_size: 150,
        lm_target_size: 80,
        min_entity_count: 3,
        ..WorldConfig::default()
    }
}

fn make_world(seed: u64, cfg: &WorldConfig) -> (World, Splits) {
    let world = build_world(seed, cfg, &mut stream(seed, "world")).unwrap();
    let splits = generate_corpus(&world, cfg, &mut stream(seed, "corpus")).unwrap();
    (world, splits)
}

fn labeled(splits: &Splits) -> Vec<Labeled<'_>> {
    splits
        .pretrain
        .utterances
        .iter()
        .map(|u| Labeled {
            frames: &u.frames,
            words: &u.text,
        })
        .collect()
}

struct Fixture {
    world: World,
    splits: Splits,
    policy: Policy,
    lm: RewardLm,
}

/// One pretrained policy and reward LM shared by the slower properties.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let seed = 11;
        let (world, splits) = make_world(seed, &small_world_config());
        let mut policy =
            Policy::new(&world.codebook, &PolicyConfig::default(), &mut stream(seed, "init")).unwrap();
        let cfg = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        };
        pretrain(&mut policy, &labeled(&splits), &cfg, &mut stream(seed, "order")).unwrap();
        let lm_cfg = LmConfig {
            hidden: 16,
            epochs: 2,
            ..LmConfig::default()
        };
        let mut lm = RewardLm::for_world(&world, &lm_cfg, &mut stream(seed, "lm")).unwrap();
        let text = render_corpus(&world, &splits.lm_text, 0.3, &mut stream(seed, "render")).unwrap();
        train_lm(&mut lm, &text, &mut stream(seed, "lm-order")).unwrap();
        Fixture {
            world,
            splits,
            policy,
            lm,
        }
    })
}

fn prompt<'a>(f: &'a Fixture, domain: &str) -> &'a str {
    &f.world.domain(domain).unwrap().context_prompt
}

fn group_for(f: &Fixture, i: usize, cfg: &RewardConfig) -> RewardedGroup {
    let u = f.splits.adapt.audio_only()[i];
    collect_group(
        &f.policy,
        &f.lm,
        cfg,
        &BeamConfig::default(),
        u,
        prompt(f, u.domain),
        &mut stream(3, &format!("group/{i}")),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// world

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn splits_are_pure_functions_of_seed_and_config(seed in 0u64..10_000) {
        let cfg = small_world_config();
        let (_, a) = make_world(seed, &cfg);
        let (_, b) = make_world(seed, &cfg);
        let (_, c) = make_world(seed + 1, &cfg);
        for s in Split::ALL {
            prop_assert_eq!(a.get(s).checksum().unwrap(), b.get(s).checksum().unwrap());
        }
        prop_assert_ne!(a.get(Split::Test).checksum().unwrap(), c.get(Split::Test).checksum().unwrap());
    }

    #[test]
    fn data_contracts_hold(seed in 0u64..10_000) {
        let cfg = small_world_config();
        let (world, s) = make_world(seed, &cfg);
        let adapt: std::collections::BTreeSet<&str> =
            s.adapt.utterances.iter().map(|u| u.id.as_str()).collect();
        prop_assert!(s.test.utterances.iter().all(|u| !adapt.contains(u.id.as_str())));

        let entities: Vec<&String> = world
            .targets()
            .flat_map(|d| d.entity_lexicon.iter())
            .collect();
        prop_assert!(!entities.is_empty());
        for u in &s.pretrain.utterances {
            prop_assert_eq!(world.domain(&u.domain).unwrap().role, DomainRole::Source);
            prop_assert!(u.text.iter().all(|w| !entities.contains(&w)));
        }
        for e in entities {
            let n: usize = s
                .lm_text
                .utterances
                .iter()
                .map(|u| u.text.iter().filter(|w| *w == e).count())
                .sum();
            prop_assert!(n >= cfg.min_entity_count, "{} appears {} times", e, n);
        }
    }
}

// ---------------------------------------------------------------------------
// policy

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn step_distributions_are_normalized(
        idx in 0usize..12,
        prefix in proptest::collection::vec(0usize..1000, 0..10),
    ) {
        let f = fixture();
        let u = &f.splits.test.utterances[idx];
        let n = f.policy.vocab().n_words();
        let prefix: Vec<usize> = prefix.into_iter().map(|t| t % n).collect();
        let lp = f.policy.next_token_logprobs(&u.frames, &prefix).unwrap();
        prop_assert_eq!(lp.len(), f.policy.vocab().output_size());
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn beam_hypotheses_are_distinct(idx in 0usize..12, seed in 0u64..1000, temperature in 0.0f64..2.0) {
        let f = fixture();
        let u = &f.splits.test.utterances[idx];
        let beam = BeamConfig { temperature, ..BeamConfig::default() };
        let nb = f.policy.beam_sample(&u.id, &u.frames, &beam, &mut stream(seed, "beam")).unwrap();
        prop_assert!(!nb.hypotheses.is_empty() && nb.hypotheses.len() <= beam.keep);
        for (i, a) in nb.hypotheses.iter().enumerate() {
            prop_assert_eq!(a.tokens.last().copied(), Some(f.policy.vocab().eos()));
            for b in &nb.hypotheses[i + 1..] {
                prop_assert_ne!(&a.tokens, &b.tokens);
            }
        }
    }
}

#[test]
fn scoring_and_decoding_leave_parameters_alone() {
    let f = fixture();
    let before = f.policy.params.clone();
    let lm_before = f.lm.checkpoint_id();
    for (i, u) in f.splits.test.utterances.iter().enumerate().take(4) {
        let g = f.policy.greedy_decode(&u.frames).unwrap();
        if !g.truncated {
            f.policy.sequence_logprob(&u.frames, &g.tokens).unwrap();
        }
        f.policy
            .beam_sample(&u.id, &u.frames, &BeamConfig::default(), &mut stream(i as u64, "b"))
            .unwrap();
        f.lm.score(prompt(f, &u.domain), &u.text).unwrap();
    }
    group_for(f, 0, &RewardConfig::default());
    assert_eq!(f.policy.params.checkpoint_id(), before.checkpoint_id());
    for (name, t) in before.iter() {
        assert_eq!(f.policy.params.get(name).data(), t.data(), "{name}");
    }
    assert_eq!(f.lm.checkpoint_id(), lm_before);
}

#[test]
fn pretraining_lowers_heldout_nll_for_three_epochs() {
    let cfg = small_world_config();
    let pcfg = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for seed in 0..5 {
        let (world, splits) = make_world(seed, &cfg);
        let mut policy =
            Policy::new(&world.codebook, &PolicyConfig::default(), &mut stream(seed, "init")).unwrap();
        let log = pretrain(&mut policy, &labeled(&splits), &pcfg, &mut stream(seed, "order")).unwrap();
        curves.push(log.iter().map(|l| l.heldout_nll).collect());
    }
    let median = |e: usize| {
        let mut v: Vec<f64> = curves.iter().map(|c| c[e]).collect();
        v.sort_by(f64::total_cmp);
        v[2]
    };
    let med: Vec<f64> = (0..=3).map(median).collect();
    assert!(med.windows(2).all(|w| w[1] < w[0]), "held-out medians {med:?}");
}

// ---------------------------------------------------------------------------
// reward

proptest! {
    #[test]
    fn reward_is_linear_in_recognizer_score(
        lambda in 0.0f64..10.0,
        a in -200.0f64..0.0,
        b1 in -200.0f64..0.0,
        b2 in -200.0f64..0.0,
    ) {
        let cfg = RewardConfig { lambda, ..RewardConfig::default() };
        let d = reward(&cfg, a, b2) - reward(&cfg, a, b1);
        prop_assert!((d - lambda * (b2 - b1)).abs() < 1e-12 * (1.0 + lambda * 400.0));
    }

    #[test]
    fn selection_ignores_reward_shift(idx in 0usize..12, c in -1e3f64..1e3) {
        let f = fixture();
        let g = group_for(f, idx, &RewardConfig::default());
        prop_assume!(g.len() >= 2);
        let mut shifted = g.clone();
        for r in &mut shifted.rewards {
            *r += c;
        }
        // a shift can only reorder rewards that were already within rounding
        let tied = |xs: &[f64]| {
            let mut s = xs.to_vec();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| (w[1] - w[0]).abs() < 1e-9 * (1.0 + c.abs()))
        };
        prop_assume!(!tied(&g.rewards));
        prop_assert_eq!(raft_select(&g).unwrap(), raft_select(&shifted).unwrap());
        prop_assert_eq!(preference_pair(&g), preference_pair(&shifted));
        let a = grpo_advantages(&g.rewards, 1e-8).unwrap();
        let b = grpo_advantages(&shifted.rewards, 1e-8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_lambda_ranks_by_the_lm_alone() {
    let f = fixture();
    let cfg = RewardConfig {
        lambda: 0.0,
        ..RewardConfig::default()
    };
    for i in 0..6 {
        let g = group_for(f, i, &cfg);
        if g.is_empty() {
            continue;
        }
        let best_lm = g
            .p_llm
            .iter()
            .enumerate()
            .fold(0, |b, (j, v)| if *v > g.p_llm[b] { j } else { b });
        assert_eq!(raft_select(&g).unwrap(), best_lm);
    }
}

// ---------------------------------------------------------------------------
// trainers

#[test]
fn groups_record_the_sampling_checkpoint() {
    let f = fixture();
    let g = group_for(f, 1, &RewardConfig::default());
    assert_eq!(g.checkpoint_id, f.policy.checkpoint_id());
}

#[test]
fn adaptation_keeps_frozen_models_and_stays_on_policy() {
    let f = fixture();
    let audio = f.splits.adapt.audio_only();
    let train = TrainConfig {
        epochs: 2,
        batch_size: 6,
        ..TrainConfig::default()
    };
    let (ref_id, lm_id) = (f.policy.checkpoint_id(), f.lm.checkpoint_id());
    for algo in [Algorithm::Raft, Algorithm::Dpo, Algorithm::Grpo, Algorithm::Rescore] {
        let ctx = AdaptContext {
            world: &f.world,
            reference: &f.policy,
            lm: &f.lm,
            reward: &RewardConfig::default(),
            beam: &BeamConfig::default(),
            train: &train,
            algo,
            seed: 5,
        };
        let (adapted, log) = run_adaptation(&ctx, f.policy.clone(), &audio).unwrap();
        assert_eq!(f.policy.checkpoint_id(), ref_id, "{algo}");
        assert_eq!(f.lm.checkpoint_id(), lm_id, "{algo}");
        assert_eq!(log.last().unwrap().checkpoint_id, adapted.checkpoint_id(), "{algo}");
        if algo.trains() {
            assert_ne!(adapted.checkpoint_id(), ref_id, "{algo} never updated");
        } else {
            assert_eq!(adapted.checkpoint_id(), ref_id);
        }
    }
}

#[test]
fn one_dpo_step_widens_the_preference_margin() {
    let f = fixture();
    let mut checked = 0;
    for i in 0..f.splits.adapt.utterances.len() {
        let g = group_for(f, i, &RewardConfig::default());
        let Some(pair) = preference_pair(&g) else {
            continue;
        };
        let frames = &f.splits.adapt.utterances[i].frames;
        let pos = &g.hypotheses[pair.preferred].tokens;
        let neg = &g.hypotheses[pair.rejected].tokens;
        let margin = |p: &Policy| {
            p.sequence_logprob(frames, pos).unwrap() - p.sequence_logprob(frames, neg).unwrap()
        };
        let (rp, rn) = (
            f.policy.sequence_logprob(frames, pos).unwrap(),
            f.policy.sequence_logprob(frames, neg).unwrap(),
        );
        let mut p = f.policy.clone();
        let (_, grads) = p
            .parallel_grads(&[()], |lv, _| {
                let a = p.token_logprobs_var(lv, frames, pos)?.sum();
                let b = p.token_logprobs_var(lv, frames, neg)?.sum();
                Ok(dpo_loss(a, b, rp, rn, 0.1))
            })
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-5,
            ..AdamWConfig::default()
        });
        p.apply_grads(&grads, 1.0, &mut opt).unwrap();
        assert!(margin(&p) > margin(&f.policy), "utterance {i}");
        checked += 1;
        if checked == 3 {
            break;
        }
    }
    assert!(checked > 0, "no preference pair in the adapt split");
}

#[test]
fn zero_advantage_grpo_step_changes_nothing() {
    let f = fixture();
    let g = group_for(f, 2, &RewardConfig::default());
    let frames = &f.splits.adapt.utterances[2].frames;
    let mut p = f.policy.clone();
    let (_, grads) = p
        .parallel_grads(&[()], |lv, _| {
            let items = g
                .hypotheses
                .iter()
                .map(|h| {
                    Ok(GrpoItem {
                        current: p.token_logprobs_var(lv, frames, &h.tokens)?,
                        snapshot: &h.per_token_logprob,
                        reference: &h.per_token_logprob,
                        advantage: 0.0,
                    })
                })
                .collect::<rlfb_core::Result<Vec<_>>>()?;
            grpo_loss(&items, 0.2, 0.0)
        })
        .unwrap();
    assert!(grads.values().all(|t| t.data().iter().all(|x| *x == 0.0)));
    let mut opt = AdamW::new(AdamWConfig::default());
    p.apply_grads(&grads, 1.0, &mut opt).unwrap();
    assert_eq!(p.checkpoint_id(), f.policy.checkpoint_id());
}
