use rlfb_numerics::{log_sigmoid, Tensor, Var};

use crate::error::{Error, Result};

/// `-log sigmoid(beta * (lr_pos - lr_neg))` for precomputed log-ratios.
pub fn dpo_loss_value(logratio_pos: f64, logratio_neg: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * (logratio_pos - logratio_neg))
}

/// DPO loss on a tape. `lp_pos` / `lp_neg` are the current policy's sequence
/// log-probabilities; `ref_pos` / `ref_neg` those of the frozen reference.
pub fn dpo_loss<'t>(
    lp_pos: Var<'t>,
    lp_neg: Var<'t>,
    ref_pos: f64,
    ref_neg: f64,
    beta: f64,
) -> Var<'t> {
    let pos = lp_pos.add_scalar(-ref_pos);
    let neg = lp_neg.add_scalar(-ref_neg);
    pos.sub(&neg).scale(beta).log_sigmoid().neg()
}

/// Group-normalized rewards with the population standard deviation. Groups
/// whose spread is below `std_guard` get all-zero advantages.
pub fn grpo_advantages(rewards: &[f64], std_guard: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Usage(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_guard {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// One hypothesis of a GRPO batch.
pub struct GrpoItem<'a, 't> {
    /// Current per-token log-probabilities `[L]`.
    pub current: Var<'t>,
    /// Ratio denominators, detached.
    pub snapshot: &'a [f64],
    /// Frozen reference log-probabilities for the KL term.
    pub reference: &'a [f64],
    pub advantage: f64,
}

/// `-sum_i mean_t [min(s A, clip(s) A) - beta_kl * k3]` over the items, with
/// `s = exp(cur - snapshot)` and `k3 = r - ln r - 1`, `r = pi_ref / pi`.
pub fn grpo_objective_sum<'t>(items: &[GrpoItem<'_, 't>], eps_clip: f64, beta_kl: f64) -> Result<Var<'t>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Usage("empty GRPO batch".into()))?;
    let tape = first.current.tape();
    let mut total: Option<Var<'t>> = None;
    for it in items {
        let l = it.current.value().numel();
        if it.snapshot.len() != l || it.reference.len() != l {
            return Err(Error::Usage(format!(
                "misaligned GRPO item: {l} current, {} snapshot, {} reference log-probs",
                it.snapshot.len(),
                it.reference.len()
            )));
        }
        let snap = tape.constant(Tensor::vector(it.snapshot.to_vec()));
        let reference = tape.constant(Tensor::vector(it.reference.to_vec()));
        let adv = tape.constant(Tensor::filled(&[l], it.advantage));
        let ratio = it.current.sub(&snap).exp();
        let unclipped = ratio.mul(&adv);
        let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip).mul(&adv);
        let surrogate = unclipped.minimum(&clipped);
        let log_r = reference.sub(&it.current);
        let k3 = log_r.exp().sub(&log_r).add_scalar(-1.0);
        let per_hyp = surrogate.sub(&k3.scale(beta_kl)).mean().neg();
        total = Some(match total {
            None => per_hyp,
            Some(t) => t.add(&per_hyp),
        });
    }
    Ok(total.expect("non-empty"))
}

/// Mean over hypotheses of the negated per-token GRPO objective.
pub fn grpo_loss<'t>(items: &[GrpoItem<'_, 't>], eps_clip: f64, beta_kl: f64) -> Result<Var<'t>> {
    Ok(grpo_objective_sum(items, eps_clip, beta_kl)?.scale(1.0 / items.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rlfb_numerics::Tape;
    use std::f64::consts::LN_2;

    #[test]
    fn dpo_values() {
        assert!((dpo_loss_value(0.0, 0.0, 0.1) - LN_2).abs() < 1e-12);
        // -ln sigmoid(2) = ln(1 + e^-2)
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((dpo_loss_value(1.0, -1.0, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.126_928).abs() < 1e-6);
        let tape = Tape::new();
        let a = tape.scalar(-3.0);
        let b = tape.scalar(-5.0);
        let l = dpo_loss(a, b, -3.0, -5.0, 0.1);
        assert!((l.item() - LN_2).abs() < 1e-9);
    }

    #[test]
    fn advantages_examples() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!((a[2] - 1.224_745).abs() < 1e-6);
        assert_eq!(grpo_advantages(&[5.0; 3], 1e-8).unwrap(), vec![0.0; 3]);
        assert!(matches!(grpo_advantages(&[1.0], 1e-8), Err(Error::Usage(_))));
    }

    #[test]
    fn grpo_identity_policy_gives_advantage() {
        let tape = Tape::new();
        let lp = vec![-0.5, -1.25, -0.1];
        let cur = tape.param(std::sync::Arc::new(Tensor::vector(lp.clone())));
        let items = [GrpoItem {
            current: cur,
            snapshot: &lp,
            reference: &lp,
            advantage: 0.7,
        }];
        let l = grpo_loss(&items, 0.2, 0.04).unwrap();
        assert!((l.item() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn grpo_clips_large_ratios() {
        let tape = Tape::new();
        let snap = [0.0];
        let cur = tape.constant(Tensor::vector(vec![1.5f64.ln()]));
        let items = [GrpoItem {
            current: cur,
            snapshot: &snap,
            reference: &[1.5f64.ln()],
            advantage: 1.0,
        }];
        let l = grpo_loss(&items, 0.2, 0.0).unwrap();
        assert!((l.item() + 1.2).abs() < 1e-12);
    }

    #[test]
    fn grpo_rejects_misaligned_items() {
        let tape = Tape::new();
        let cur = tape.constant(Tensor::vector(vec![-1.0, -2.0]));
        let items = [GrpoItem {
            current: cur,
            snapshot: &[-1.0],
            reference: &[-1.0, -2.0],
            advantage: 1.0,
        }];
        assert!(matches!(grpo_loss(&items, 0.2, 0.0), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rs in proptest::collection::vec(-50f64..50.0, 2..12)) {
            let a = grpo_advantages(&rs, 1e-8).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let mean_r = rs.iter().sum::<f64>() / n;
            let spread = (rs.iter().map(|x| (x - mean_r).powi(2)).sum::<f64>() / n).sqrt();
            if spread >= 1e-8 {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(a.iter().all(|x| *x == 0.0));
            }
        }

        #[test]
        fn advantages_ignore_reward_shift(
            rs in proptest::collection::vec(-50f64..50.0, 2..12),
            c in -100f64..100.0,
        ) {
            let a = grpo_advantages(&rs, 1e-8).unwrap();
            let shifted: Vec<f64> = rs.iter().map(|r| r + c).collect();
            let b = grpo_advantages(&shifted, 1e-8).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn dpo_swap_identity(lp in -5f64..5.0, ln in -5f64..5.0, beta in 0.01f64..2.0) {
            let l = dpo_loss_value(lp, ln, beta);
            let swapped = dpo_loss_value(ln, lp, beta);
            let expected = -(-(-l).exp_m1()).ln();
            prop_assert!((swapped - expected).abs() < 1e-9 * expected.abs().max(1.0));
        }
    }
}
