//! Generalized advantage estimation and the clipped PPO objective.

use thiserror::Error;

use super::net::{ExpertNets, NetError};
use crate::autodiff::{ArrayId, NumericsError, Tape};
use crate::sim::ObservationMatrix;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Standard GAE over a rollout that may span several episodes.
///
/// `terminals[t]` marks that the episode ended at step `t`; `bootstrap` is
/// the value estimate of the state after the final step (used only when the
/// rollout truncates a running episode). Returns raw advantages and the
/// value-function regression targets.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.len() != values.len() || rewards.len() != terminals.len() {
        return Err(PpoError::LengthMismatch(format!(
            "rewards {}, values {}, terminals {}",
            rewards.len(),
            values.len(),
            terminals.len()
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let (next_value, cont) = if terminals[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (bootstrap, 1.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * cont * acc;
        if terminals[t] {
            acc = delta;
        }
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// In-place normalization to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// One minibatch of PPO training data.
pub struct PpoBatch<'a> {
    pub obs: Vec<&'a ObservationMatrix>,
    pub actions: &'a [usize],
    pub old_logp: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Scalar diagnostics of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PpoLossParts {
    pub total: f64,
    /// Negated clipped surrogate: `-E[min(r A, clip(r) A)]`.
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Build the PPO loss graph on `tape`:
/// `-E[min(r A, clip(r, 1-eps, 1+eps) A)] + vf_coef * E[(V - R)^2]
///  - ent_coef * E[H(pi)]`.
pub fn ppo_loss(
    tape: &mut Tape,
    nets: &ExpertNets,
    batch: &PpoBatch,
    eps: f64,
    vf_coef: f64,
    ent_coef: f64,
) -> Result<(ArrayId, PpoLossParts), PpoError> {
    let b = batch.obs.len();
    if batch.actions.len() != b
        || batch.old_logp.len() != b
        || batch.advantages.len() != b
        || batch.returns.len() != b
    {
        return Err(PpoError::LengthMismatch(format!(
            "obs {b}, actions {}, old_logp {}, advantages {}, returns {}",
            batch.actions.len(),
            batch.old_logp.len(),
            batch.advantages.len(),
            batch.returns.len()
        )));
    }

    let logits = nets.policy_logits(tape, &batch.obs)?;
    let logp_all = tape.log_softmax_rows(logits)?;
    let logp_taken = tape.select_per_row(logp_all, batch.actions)?;
    let old = tape.leaf(b, 1, batch.old_logp.to_vec())?;
    let diff = tape.sub(logp_taken, old)?;
    let ratio = tape.exp(diff)?;

    let adv = tape.leaf(b, 1, batch.advantages.to_vec())?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let objective = tape.min_elem(unclipped, clipped)?;
    let surrogate_gain = tape.mean_all(objective)?;
    let surrogate_loss = tape.scale(surrogate_gain, -1.0)?;

    let values = nets.state_values(tape, &batch.obs)?;
    let targets = tape.leaf(b, 1, batch.returns.to_vec())?;
    let err = tape.sub(values, targets)?;
    let sq = tape.mul(err, err)?;
    let value_loss = tape.mean_all(sq)?;

    let probs = tape.softmax_rows(logits)?;
    let plogp = tape.mul(probs, logp_all)?;
    let plogp_mean = tape.mean_all(plogp)?;
    // mean_all averages over B*3 entries; entropy sums over the 3 classes
    let entropy = tape.scale(plogp_mean, -3.0)?;

    let scaled_value = tape.scale(value_loss, vf_coef)?;
    let scaled_entropy = tape.scale(entropy, -ent_coef)?;
    let partial = tape.add(surrogate_loss, scaled_value)?;
    let total = tape.add(partial, scaled_entropy)?;

    let clip_fraction = tape
        .values(ratio)
        .iter()
        .filter(|r| (**r - 1.0).abs() > eps)
        .count() as f64
        / b as f64;
    let parts = PpoLossParts {
        total: tape.scalar(total),
        surrogate: tape.scalar(surrogate_loss),
        value: tape.scalar(value_loss),
        entropy: tape.scalar(entropy),
        clip_fraction,
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{N_OBS, OBS_FEATURES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng) -> ObservationMatrix {
        let mut m = ObservationMatrix { rows: [[0.0; OBS_FEATURES]; N_OBS], presence: [false; N_OBS] };
        let live = rng.gen_range(1..=N_OBS);
        for i in 0..live {
            m.presence[i] = true;
            for f in 0..OBS_FEATURES {
                m.rows[i][f] = rng.gen_range(-1.0..1.0);
            }
        }
        m
    }

    #[test]
    fn one_step_td_when_lambda_zero() {
        let rewards = [1.0, 0.5, -0.25];
        let values = [0.3, 0.2, 0.1];
        let terminals = [false, false, false];
        let (adv, _) = gae_advantages(&rewards, &values, &terminals, 0.7, 0.9, 0.0).unwrap();
        let expect = [
            1.0 + 0.9 * 0.2 - 0.3,
            0.5 + 0.9 * 0.1 - 0.2,
            -0.25 + 0.9 * 0.7 - 0.1,
        ];
        for (a, e) in adv.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_limit_when_lambda_one_and_zero_values() {
        let rewards = [1.0, 2.0, 4.0];
        let values = [0.0; 3];
        let terminals = [false, false, true];
        let (adv, _) = gae_advantages(&rewards, &values, &terminals, 9.9, 0.5, 1.0).unwrap();
        // discounted reward-to-go with gamma = 0.5
        assert!((adv[2] - 4.0).abs() < 1e-12);
        assert!((adv[1] - (2.0 + 0.5 * 4.0)).abs() < 1e-12);
        assert!((adv[0] - (1.0 + 0.5 * 2.0 + 0.25 * 4.0)).abs() < 1e-12);
    }

    /// Brute-force double-loop oracle over a random sequence.
    #[test]
    fn matches_direct_double_loop_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let terminals = vec![false; n];
        let bootstrap = rng.gen_range(-1.0..1.0);
        let (gamma, lambda) = (0.97, 0.93);
        let (adv, returns) =
            gae_advantages(&rewards, &values, &terminals, bootstrap, gamma, lambda).unwrap();

        let value_at = |t: usize| if t < n { values[t] } else { bootstrap };
        for t in 0..n {
            let mut expected = 0.0;
            for k in t..n {
                let delta = rewards[k] + gamma * value_at(k + 1) - values[k];
                expected += (gamma * lambda).powi((k - t) as i32) * delta;
            }
            assert!((adv[t] - expected).abs() < 1e-10, "t={t}: {} vs {expected}", adv[t]);
            assert!((returns[t] - (adv[t] + values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn episode_boundaries_reset_the_accumulator() {
        let rewards = [1.0, 1.0, 1.0, 1.0];
        let values = [0.0; 4];
        let terminals = [false, true, false, false];
        let (adv, _) = gae_advantages(&rewards, &values, &terminals, 0.0, 1.0, 1.0).unwrap();
        assert!((adv[0] - 2.0).abs() < 1e-12); // r0 + r1, stops at terminal
        assert!((adv[1] - 1.0).abs() < 1e-12);
        assert!((adv[2] - 2.0).abs() < 1e-12); // r2 + r3 + bootstrap 0
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(gae_advantages(&[1.0], &[0.0, 0.0], &[false], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn normalization_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut adv: Vec<f64> = (0..257).map(|_| rng.gen_range(-3.0..9.0)).collect();
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }

    fn batch_logp(nets: &ExpertNets, obs: &[&ObservationMatrix], actions: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let logits = nets.policy_logits(&mut tape, obs).unwrap();
        let logp = tape.log_softmax_rows(logits).unwrap();
        let sel = tape.select_per_row(logp, actions).unwrap();
        tape.values(sel).to_vec()
    }

    #[test]
    fn identity_policy_gives_negated_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nets = ExpertNets::init(21).unwrap();
        let obs: Vec<ObservationMatrix> = (0..6).map(|_| random_obs(&mut rng)).collect();
        let obs_refs: Vec<&ObservationMatrix> = obs.iter().collect();
        let actions: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let old_logp = batch_logp(&nets, &obs_refs, &actions);
        let advantages: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let returns = vec![0.5; 6];
        let mut tape = Tape::new();
        let (_, parts) = ppo_loss(
            &mut tape,
            &nets,
            &PpoBatch {
                obs: obs_refs,
                actions: &actions,
                old_logp: &old_logp,
                advantages: &advantages,
                returns: &returns,
            },
            0.2,
            0.5,
            0.01,
        )
        .unwrap();
        let mean_adv = advantages.iter().sum::<f64>() / 6.0;
        assert!((parts.surrogate + mean_adv).abs() < 1e-12, "{} vs {}", parts.surrogate, -mean_adv);
        assert_eq!(parts.clip_fraction, 0.0);
    }

    #[test]
    fn clip_arithmetic_positive_and_negative_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let nets = ExpertNets::init(23).unwrap();
        let obs = random_obs(&mut rng);
        let obs_refs = vec![&obs];
        let actions = [1usize];
        let current = batch_logp(&nets, &obs_refs, &actions);

        // ratio 1.5, advantage +2: objective = min(3.0, 2.4) = 2.4
        let old = [current[0] - 1.5f64.ln()];
        let mut tape = Tape::new();
        let (_, parts) = ppo_loss(
            &mut tape,
            &nets,
            &PpoBatch {
                obs: obs_refs.clone(),
                actions: &actions,
                old_logp: &old,
                advantages: &[2.0],
                returns: &[0.0],
            },
            0.2,
            0.0,
            0.0,
        )
        .unwrap();
        assert!((parts.surrogate - (-2.4)).abs() < 1e-12, "{}", parts.surrogate);

        // ratio 0.5, advantage -1: objective = min(-0.5, -0.8) = -0.8
        let old = [current[0] - 0.5f64.ln()];
        let mut tape = Tape::new();
        let (_, parts) = ppo_loss(
            &mut tape,
            &nets,
            &PpoBatch {
                obs: obs_refs,
                actions: &actions,
                old_logp: &old,
                advantages: &[-1.0],
                returns: &[0.0],
            },
            0.2,
            0.0,
            0.0,
        )
        .unwrap();
        assert!((parts.surrogate - 0.8).abs() < 1e-12, "{}", parts.surrogate);
    }

    #[test]
    fn huge_epsilon_recovers_the_unclipped_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let nets = ExpertNets::init(29).unwrap();
        let obs: Vec<ObservationMatrix> = (0..8).map(|_| random_obs(&mut rng)).collect();
        let obs_refs: Vec<&ObservationMatrix> = obs.iter().collect();
        let actions: Vec<usize> = (0..8).map(|_| rng.gen_range(0..3)).collect();
        let old_logp: Vec<f64> =
            batch_logp(&nets, &obs_refs, &actions).iter().map(|l| l - rng.gen_range(-0.4..0.4)).collect();
        let advantages: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let (_, parts) = ppo_loss(
            &mut tape,
            &nets,
            &PpoBatch {
                obs: obs_refs.clone(),
                actions: &actions,
                old_logp: &old_logp,
                advantages: &advantages,
                returns: &vec![0.0; 8],
            },
            10.0,
            0.0,
            0.0,
        )
        .unwrap();

        // direct unclipped surrogate
        let logp = batch_logp(&nets, &obs_refs, &actions);
        let unclipped: f64 = logp
            .iter()
            .zip(&old_logp)
            .zip(&advantages)
            .map(|((new, old), a)| (new - old).exp() * a)
            .sum::<f64>()
            / 8.0;
        assert!((parts.surrogate + unclipped).abs() < 1e-10);
    }

    /// Finite differences through the composed policy/value networks.
    #[test]
    fn ppo_loss_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck::{check_params, Probe};
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut nets = ExpertNets::init(31).unwrap();
        let obs: Vec<ObservationMatrix> = (0..4).map(|_| random_obs(&mut rng)).collect();
        let actions: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let obs_refs: Vec<&ObservationMatrix> = obs.iter().collect();
        let old_logp: Vec<f64> =
            batch_logp(&nets, &obs_refs, &actions).iter().map(|l| l - 0.1).collect();
        let advantages: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let returns: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..1.5)).collect();

        let mut params = std::mem::take(&mut nets.params);
        let report = check_params(&mut params, 1e-4, Probe::Sample(6), &mut rng, Tape::new, |p, tape| {
            let view = ExpertNets::with_params(p.clone()).unwrap();
            let batch = PpoBatch {
                obs: obs.iter().collect(),
                actions: &actions,
                old_logp: &old_logp,
                advantages: &advantages,
                returns: &returns,
            };
            let (loss, _) = ppo_loss(tape, &view, &batch, 0.2, 0.5, 0.01)
                .map_err(|_| crate::autodiff::NumericsError::NonFinite { op: "ppo_loss" })?;
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel < 1e-4, "max rel {}", report.max_rel);
    }
}
