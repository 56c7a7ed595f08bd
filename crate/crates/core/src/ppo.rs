//! On-policy training core: whole-episode rollout collection, generalized
//! advantage estimation, and the clipped-surrogate PPO update with
//! approximate-KL early stopping.

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvConfig, GoalObservation, PredatorPreyEnv};
use crate::error::CoreError;
use crate::nn::{Adam, GaussianPolicy, NetGrads, ValueNet};

/// PPO hyperparameters. Defaults follow the common reference settings, with
/// `target_kl` at 0.05.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    /// Minimum transitions per rollout (whole episodes, so slightly more in
    /// practice).
    pub n_steps: usize,
    pub minibatch_size: usize,
    pub n_epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub target_kl: f64,
    /// Decoupled L2 weight decay applied by Adam (0 disables).
    pub weight_decay: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            n_steps: 2048,
            minibatch_size: 64,
            n_epochs: 10,
            lr: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            target_kl: 0.05,
            weight_decay: 0.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::InvalidConfig("gamma must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(CoreError::InvalidConfig(
                "gae_lambda must be in [0, 1]".into(),
            ));
        }
        if !(self.clip_range > 0.0) {
            return Err(CoreError::InvalidConfig("clip_range must be > 0".into()));
        }
        if !(self.target_kl > 0.0) {
            return Err(CoreError::InvalidConfig("target_kl must be > 0".into()));
        }
        if self.n_steps == 0 || self.minibatch_size == 0 || self.n_epochs == 0 {
            return Err(CoreError::InvalidConfig(
                "n_steps, minibatch_size and n_epochs must be >= 1".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::InvalidConfig(
                "weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One stored step of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: GoalObservation,
    pub action: Vec<f64>,
    /// Log-probability of `action` under the policy that produced it,
    /// evaluated at `obs` (recomputed for relabeled data).
    pub log_prob: f64,
    /// Critic value of `obs` at collection time.
    pub value: f64,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// A complete episode plus the observation after its last step, used to
/// bootstrap truncated returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub final_obs: GoalObservation,
    /// Critic value of `final_obs`; 0 when the episode terminated (goal
    /// reached), since the return needs no bootstrap there.
    pub final_value: f64,
    /// True for hindsight-relabeled copies.
    pub relabeled: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Episode well-formedness: nonempty, and exactly the last transition may
    /// carry a terminal flag.
    pub fn check_invariant(&self) -> bool {
        if self.transitions.is_empty() {
            return false;
        }
        let last = self.transitions.len() - 1;
        self.transitions
            .iter()
            .enumerate()
            .all(|(i, t)| (i == last) || (!t.terminated && !t.truncated))
    }
}

/// Episodes collected for one update, plus per-transition advantage estimates
/// (flat, in episode-then-time order).
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub episodes: Vec<Episode>,
    /// Unnormalized GAE advantages, filled by [`compute_gae`].
    pub advantages: Vec<f64>,
    /// Return-to-go targets (`advantage + value`), filled by [`compute_gae`].
    pub returns: Vec<f64>,
    /// Advantages standardized over the whole buffer, filled by
    /// [`normalize_advantages`]; this is what the surrogate loss consumes.
    pub norm_advantages: Vec<f64>,
}

impl RolloutBuffer {
    pub fn total_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Flat index of transition `t` of episode `ep`.
    pub fn flat_index(&self, ep: usize, t: usize) -> usize {
        self.episodes[..ep].iter().map(Episode::len).sum::<usize>() + t
    }
}

/// Run whole episodes until at least `n_steps` transitions are stored.
/// Log-probabilities and values are recorded at collection time; truncated
/// episodes store the critic value of the final observation for
/// bootstrapping.
pub fn collect_rollout(
    policy: &GaussianPolicy,
    value_net: &ValueNet,
    env: &mut PredatorPreyEnv,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBuffer, CoreError> {
    let mut buffer = RolloutBuffer::default();
    let mut total = 0;
    while total < n_steps {
        let mut obs = env.reset();
        let mut transitions = Vec::with_capacity(env.config().max_steps);
        loop {
            let flat = obs.flatten();
            let (action, log_prob) = policy.sample(&flat, rng);
            let value = value_net.value(&flat);
            let out = env.step(&action)?;
            let done = out.terminated || out.truncated;
            transitions.push(Transition {
                obs,
                action,
                log_prob,
                value,
                reward: out.reward,
                terminated: out.terminated,
                truncated: out.truncated,
            });
            obs = out.obs;
            if done {
                let final_value = if out.truncated {
                    value_net.value(&obs.flatten())
                } else {
                    0.0
                };
                total += transitions.len();
                buffer.episodes.push(Episode {
                    transitions,
                    final_obs: obs,
                    final_value,
                    relabeled: false,
                });
                break;
            }
        }
    }
    Ok(buffer)
}

/// Generalized advantage estimation over every episode in the buffer:
/// `delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminated_t) - V(s_t)` and
/// `A_t = sum_k (gamma * lambda)^k delta_{t+k}`, with `V` after the last step
/// taken from the episode's stored bootstrap value (0 unless truncated).
/// Returns-to-go are `A_t + V(s_t)`.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let n = buffer.total_transitions();
    buffer.advantages = Vec::with_capacity(n);
    buffer.returns = Vec::with_capacity(n);
    buffer.norm_advantages.clear();
    for ep in &buffer.episodes {
        let len = ep.len();
        let mut adv = vec![0.0; len];
        let mut carried = 0.0;
        for t in (0..len).rev() {
            let tr = &ep.transitions[t];
            let next_value = if t + 1 < len {
                ep.transitions[t + 1].value
            } else {
                ep.final_value
            };
            let non_terminal = if tr.terminated { 0.0 } else { 1.0 };
            let delta = tr.reward + gamma * next_value * non_terminal - tr.value;
            carried = delta + gamma * lambda * carried;
            adv[t] = carried;
        }
        for (t, a) in adv.into_iter().enumerate() {
            buffer.advantages.push(a);
            buffer.returns.push(a + ep.transitions[t].value);
        }
    }
}

/// Standardize advantages to mean 0 / std 1 over the whole buffer. The
/// unnormalized values stay available in `buffer.advantages`.
pub fn normalize_advantages(buffer: &mut RolloutBuffer) {
    let n = buffer.advantages.len() as f64;
    let mean = buffer.advantages.iter().sum::<f64>() / n;
    let var = buffer
        .advantages
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-8);
    buffer.norm_advantages = buffer
        .advantages
        .iter()
        .map(|a| (a - mean) / std)
        .collect();
}

/// The clipped per-sample surrogate objective
/// `min(ratio * adv, clamp(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_range: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range) * advantage;
    unclipped.min(clipped)
}

/// The low-variance KL estimate `mean(ratio - 1 - log ratio)`; nonnegative
/// for any positive ratio.
pub fn approx_kl(old_log_probs: &[f64], new_log_probs: &[f64]) -> f64 {
    let n = old_log_probs.len() as f64;
    old_log_probs
        .iter()
        .zip(new_log_probs)
        .map(|(old, new)| {
            let log_ratio = new - old;
            log_ratio.exp() - 1.0 - log_ratio
        })
        .sum::<f64>()
        / n
}

/// Aggregate statistics of one [`ppo_update`] call.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    /// Mean clipped-surrogate loss over all processed samples.
    pub policy_loss: f64,
    /// Mean squared error of the critic over all processed samples.
    pub value_loss: f64,
    /// Mean `ratio - 1 - log ratio` of the last executed epoch.
    pub approx_kl: f64,
    pub epochs_run: usize,
    /// Fraction of samples with `|ratio - 1| > clip_range`.
    pub clip_fraction: f64,
    /// Policy entropy after the update.
    pub entropy: f64,
}

/// Build the Adam state for a policy: one block per layer weight matrix and
/// bias vector, plus one for log_std.
pub fn adam_for_policy(policy: &GaussianPolicy, lr: f64, weight_decay: f64) -> Adam {
    let mut sizes = Vec::new();
    for l in &policy.mean_net.layers {
        sizes.push(l.w.len());
        sizes.push(l.b.len());
    }
    sizes.push(policy.log_std.len());
    Adam::new(&sizes, lr, weight_decay)
}

pub fn adam_for_value(value_net: &ValueNet, lr: f64, weight_decay: f64) -> Adam {
    let mut sizes = Vec::new();
    for l in &value_net.net.layers {
        sizes.push(l.w.len());
        sizes.push(l.b.len());
    }
    Adam::new(&sizes, lr, weight_decay)
}

/// One PPO update over the buffer: up to `n_epochs` passes of shuffled
/// minibatches against the clipped surrogate plus value and entropy terms,
/// with global gradient-norm clipping. After each full epoch the mean
/// approximate KL is compared against `target_kl`; exceeding it stops the
/// remaining epochs.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut GaussianPolicy,
    value_net: &mut ValueNet,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    policy_adam: &mut Adam,
    value_adam: &mut Adam,
    rng: &mut ChaCha8Rng,
    update_index: usize,
) -> Result<UpdateStats, CoreError> {
    let n = buffer.total_transitions();
    if buffer.norm_advantages.len() != n || buffer.returns.len() != n {
        return Err(CoreError::MissingAdvantages);
    }

    // Flatten once; minibatch indexing then stays cache-friendly.
    let mut obs = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut old_log_probs = Vec::with_capacity(n);
    for ep in &buffer.episodes {
        for tr in &ep.transitions {
            obs.push(tr.obs.flatten());
            actions.push(tr.action.clone());
            old_log_probs.push(tr.log_prob);
        }
    }

    let act_len = policy.act_len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut loss_samples = 0.0;
    let mut policy_loss_sum = 0.0;
    let mut value_loss_sum = 0.0;
    let mut clip_count = 0.0;

    for epoch in 0..cfg.n_epochs {
        indices.shuffle(rng);
        let mut epoch_kl_sum = 0.0;
        for chunk in indices.chunks(cfg.minibatch_size) {
            let bsz = chunk.len() as f64;
            let mut policy_grads = NetGrads::zeros_like(&policy.mean_net);
            let mut value_grads = NetGrads::zeros_like(&value_net.net);
            let mut log_std_grad = vec![0.0; act_len];
            let mut batch_policy_loss = 0.0;
            let mut batch_value_loss = 0.0;

            for &i in chunk {
                let (mean, cache) = policy.mean_net.forward(&obs[i])?;
                let new_lp = policy.log_prob_given_mean(&mean, &actions[i]);
                let log_ratio = new_lp - old_log_probs[i];
                let ratio = log_ratio.exp();
                let adv = buffer.norm_advantages[i];

                let unclipped = ratio * adv;
                let clipped = ratio.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * adv;
                batch_policy_loss -= unclipped.min(clipped);
                if (ratio - 1.0).abs() > cfg.clip_range {
                    clip_count += 1.0;
                }
                epoch_kl_sum += ratio - 1.0 - log_ratio;

                // The clipped branch has zero gradient; the unclipped branch
                // differentiates through the Gaussian log-density.
                let mut mean_grad = vec![0.0; act_len];
                if unclipped <= clipped {
                    let scale = -ratio * adv / bsz;
                    for j in 0..act_len {
                        let inv_var = (-2.0 * policy.log_std[j]).exp();
                        let z2 = {
                            let z = (actions[i][j] - mean[j]) * (-policy.log_std[j]).exp();
                            z * z
                        };
                        mean_grad[j] = scale * (actions[i][j] - mean[j]) * inv_var;
                        log_std_grad[j] += scale * (z2 - 1.0);
                    }
                }
                // Entropy bonus: dH/d log_std = 1 per dimension.
                for g in log_std_grad.iter_mut() {
                    *g -= cfg.ent_coef / bsz;
                }
                let (pg, _) = policy.mean_net.backward(&cache, &mean_grad)?;
                policy_grads.add_scaled(&pg, 1.0);

                let (vout, vcache) = value_net.net.forward(&obs[i])?;
                let verr = vout[0] - buffer.returns[i];
                batch_value_loss += verr * verr;
                let (vg, _) = value_net.net.backward(&vcache, &[2.0 * cfg.vf_coef * verr / bsz])?;
                value_grads.add_scaled(&vg, 1.0);
            }

            batch_policy_loss /= bsz;
            batch_value_loss /= bsz;
            if !batch_policy_loss.is_finite() || !batch_value_loss.is_finite() {
                return Err(CoreError::NonFinite {
                    quantity: format!(
                        "loss (policy {batch_policy_loss}, value {batch_value_loss})"
                    ),
                    update: update_index,
                });
            }
            policy_loss_sum += batch_policy_loss * bsz;
            value_loss_sum += batch_value_loss * bsz;
            loss_samples += bsz;

            // Global gradient-norm clip across every trainable parameter.
            let log_std_sq: f64 = log_std_grad.iter().map(|g| g * g).sum();
            let total_norm =
                (policy_grads.sq_norm() + value_grads.sq_norm() + log_std_sq).sqrt();
            if total_norm > cfg.max_grad_norm {
                let scale = cfg.max_grad_norm / total_norm;
                policy_grads.scale(scale);
                value_grads.scale(scale);
                for g in log_std_grad.iter_mut() {
                    *g *= scale;
                }
            }

            policy_adam.next_step();
            let mut block = 0;
            for (li, layer) in policy.mean_net.layers.iter_mut().enumerate() {
                policy_adam.step_block(block, &mut layer.w, &policy_grads.dw[li])?;
                policy_adam.step_block(block + 1, &mut layer.b, &policy_grads.db[li])?;
                block += 2;
            }
            policy_adam.step_block(block, &mut policy.log_std, &log_std_grad)?;
            policy.clamp_log_std();

            value_adam.next_step();
            let mut block = 0;
            for (li, layer) in value_net.net.layers.iter_mut().enumerate() {
                value_adam.step_block(block, &mut layer.w, &value_grads.dw[li])?;
                value_adam.step_block(block + 1, &mut layer.b, &value_grads.db[li])?;
                block += 2;
            }
        }

        let epoch_kl = epoch_kl_sum / n as f64;
        if !epoch_kl.is_finite() {
            return Err(CoreError::NonFinite {
                quantity: format!("approx_kl {epoch_kl}"),
                update: update_index,
            });
        }
        stats.approx_kl = epoch_kl;
        stats.epochs_run = epoch + 1;
        if epoch_kl > cfg.target_kl {
            break;
        }
    }

    stats.policy_loss = policy_loss_sum / loss_samples;
    stats.value_loss = value_loss_sum / loss_samples;
    stats.clip_fraction = clip_count / loss_samples;
    stats.entropy = policy.entropy();
    Ok(stats)
}

/// Evaluation statistics over deterministic (mean-action) episodes.
#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Run `n_episodes` with the deterministic mean action on a fresh environment
/// seeded from `rng`. Success means the episode terminated with reward 1.
pub fn evaluate(
    policy: &GaussianPolicy,
    env_cfg: &EnvConfig,
    n_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalStats, CoreError> {
    let mut cfg = env_cfg.clone();
    cfg.seed = rng.next_u64();
    let mut env = PredatorPreyEnv::new(cfg)?;
    let mut successes = 0usize;
    let mut return_sum = 0.0;
    for _ in 0..n_episodes {
        let mut obs = env.reset();
        loop {
            let action = policy.mean(&obs.flatten());
            let out = env.step(&action)?;
            return_sum += out.reward;
            obs = out.obs;
            if out.terminated {
                successes += 1;
                break;
            }
            if out.truncated {
                break;
            }
        }
    }
    Ok(EvalStats {
        success_rate: successes as f64 / n_episodes as f64,
        mean_return: return_sum / n_episodes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{PreyPolicy, SpawnPolicy};
    use crate::nn::LOG_STD_FLOOR;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn obs_of(d: usize, fill: f64) -> GoalObservation {
        GoalObservation {
            state: vec![fill; 3 * d],
            achieved_goal: vec![fill; d],
            desired_goal: vec![fill + 1.0; d],
        }
    }

    /// Synthetic episode with given rewards/values; last transition flagged.
    fn synthetic_episode(
        rewards: &[f64],
        values: &[f64],
        terminated: bool,
        final_value: f64,
    ) -> Episode {
        let n = rewards.len();
        let transitions = (0..n)
            .map(|t| Transition {
                obs: obs_of(1, t as f64),
                action: vec![0.0],
                log_prob: 0.0,
                value: values[t],
                reward: rewards[t],
                terminated: terminated && t == n - 1,
                truncated: !terminated && t == n - 1,
            })
            .collect();
        Episode {
            transitions,
            final_obs: obs_of(1, n as f64),
            final_value,
            relabeled: false,
        }
    }

    /// Brute-force GAE: explicit double loop over
    /// `A_t = sum_k (gamma*lambda)^k delta_{t+k}`.
    fn brute_force_gae(ep: &Episode, gamma: f64, lambda: f64) -> Vec<f64> {
        let len = ep.len();
        let delta: Vec<f64> = (0..len)
            .map(|t| {
                let tr = &ep.transitions[t];
                let next_value = if t + 1 < len {
                    ep.transitions[t + 1].value
                } else {
                    ep.final_value
                };
                let mask = if tr.terminated { 0.0 } else { 1.0 };
                tr.reward + gamma * next_value * mask - tr.value
            })
            .collect();
        (0..len)
            .map(|t| {
                (t..len)
                    .map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_single_terminated_transition() {
        let ep = synthetic_episode(&[1.0], &[0.3], true, 0.0);
        let mut buffer = RolloutBuffer {
            episodes: vec![ep],
            ..Default::default()
        };
        compute_gae(&mut buffer, 0.99, 0.95);
        assert!((buffer.advantages[0] - 0.7).abs() < 1e-12);
        assert!((buffer.returns[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_undiscounted_reduces_to_reward_sum() {
        // gamma = lambda = 1, no termination:
        // A_t = sum_{k>=t} r_k + V(s_T) - V(s_t)
        let rewards = [0.5, -0.2, 0.3, 0.1];
        let values = [0.9, -0.4, 0.2, 0.6];
        let final_value = 0.25;
        let ep = synthetic_episode(&rewards, &values, false, final_value);
        let mut buffer = RolloutBuffer {
            episodes: vec![ep.clone()],
            ..Default::default()
        };
        compute_gae(&mut buffer, 1.0, 1.0);
        for t in 0..rewards.len() {
            let expected: f64 = rewards[t..].iter().sum::<f64>() + final_value - values[t];
            assert!((buffer.advantages[t] - expected).abs() < 1e-12);
        }
        let oracle = brute_force_gae(&ep, 1.0, 1.0);
        for t in 0..rewards.len() {
            assert!((buffer.advantages[t] - oracle[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let rewards = [0.5, -0.2, 0.3];
        let values = [0.9, -0.4, 0.2];
        let ep = synthetic_episode(&rewards, &values, false, 0.7);
        let mut buffer = RolloutBuffer {
            episodes: vec![ep],
            ..Default::default()
        };
        let gamma = 0.99;
        compute_gae(&mut buffer, gamma, 0.0);
        let next = [values[1], values[2], 0.7];
        for t in 0..3 {
            let delta = rewards[t] + gamma * next[t] - values[t];
            assert!((buffer.advantages[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_matches_brute_force_on_random_episodes() {
        let mut r = rng(21);
        for _ in 0..200 {
            let len = r.random_range(1..=20);
            let rewards: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            let terminated = r.random_range(0.0..1.0) < 0.5;
            let final_value = r.random_range(-1.0..1.0);
            let ep = synthetic_episode(&rewards, &values, terminated, final_value);
            let gamma = r.random_range(0.9..1.0);
            let lambda = r.random_range(0.0..1.0);
            let oracle = brute_force_gae(&ep, gamma, lambda);
            let mut buffer = RolloutBuffer {
                episodes: vec![ep],
                ..Default::default()
            };
            compute_gae(&mut buffer, gamma, lambda);
            for t in 0..len {
                assert!(
                    (buffer.advantages[t] - oracle[t]).abs() <= 1e-10,
                    "t={t}: {} vs {}",
                    buffer.advantages[t],
                    oracle[t]
                );
                assert!(
                    (buffer.returns[t] - (oracle[t] + values[t])).abs() <= 1e-10
                );
            }
        }
    }

    #[test]
    fn clip_arithmetic() {
        // ratio 1.5, eps 0.2, positive advantage: min picks the clipped 1.2 * adv
        let adv = 0.7;
        assert!((clipped_surrogate(1.5, adv, 0.2) - 1.2 * adv).abs() < 1e-15);
        // negative advantage: unclipped is smaller
        assert!((clipped_surrogate(1.5, -adv, 0.2) - 1.5 * (-adv)).abs() < 1e-15);
        // inside the clip band both branches agree
        assert!((clipped_surrogate(1.1, adv, 0.2) - 1.1 * adv).abs() < 1e-15);
    }

    fn quiet_policy(obs_len: usize, act_len: usize, seed: u64) -> GaussianPolicy {
        // Near-zero actions: zero output layer + log_std at the floor.
        let mut policy = GaussianPolicy::new(obs_len, act_len, &mut rng(seed));
        let last = policy.mean_net.layers.len() - 1;
        policy.mean_net.layers[last].w.iter_mut().for_each(|w| *w = 0.0);
        policy.mean_net.layers[last].b.iter_mut().for_each(|b| *b = 0.0);
        policy.log_std = vec![LOG_STD_FLOOR; act_len];
        policy
    }

    fn far_apart_env(seed: u64) -> PredatorPreyEnv {
        let cfg = EnvConfig {
            prey_policy: PreyPolicy::Static,
            spawn_policy: SpawnPolicy::Apart,
            seed,
            ..EnvConfig::default()
        };
        PredatorPreyEnv::new(cfg).unwrap()
    }

    #[test]
    fn collect_fills_whole_episodes() {
        // A quiet policy never reaches the prey 5 units away, so every
        // episode runs the full 20 steps: 100 steps => exactly 5 episodes.
        let policy = quiet_policy(15, 3, 1);
        let value_net = ValueNet::new(15, &mut rng(2));
        let mut env = far_apart_env(3);
        let buffer =
            collect_rollout(&policy, &value_net, &mut env, 100, &mut rng(4)).unwrap();
        assert_eq!(buffer.episodes.len(), 5);
        assert_eq!(buffer.total_transitions(), 100);
        for ep in &buffer.episodes {
            assert_eq!(ep.len(), 20);
            assert!(ep.check_invariant());
            assert!(ep.transitions.last().unwrap().truncated);
        }
    }

    #[test]
    fn collect_on_trivial_env_terminates_every_episode() {
        // Prey spawns 0.75 < I away: success on the first step regardless of
        // the (quiet) action.
        let policy = quiet_policy(15, 3, 5);
        let value_net = ValueNet::new(15, &mut rng(6));
        let cfg = EnvConfig {
            prey_policy: PreyPolicy::Static,
            spawn_policy: SpawnPolicy::Apart,
            size: 1.5,
            seed: 7,
            ..EnvConfig::default()
        };
        let mut env = PredatorPreyEnv::new(cfg).unwrap();
        let buffer = collect_rollout(&policy, &value_net, &mut env, 50, &mut rng(8)).unwrap();
        for ep in &buffer.episodes {
            let last = ep.transitions.last().unwrap();
            assert!(last.terminated);
            assert_eq!(last.reward, 1.0);
        }
    }

    #[test]
    fn collected_log_probs_replay_exactly() {
        let policy = GaussianPolicy::new(15, 3, &mut rng(9));
        let value_net = ValueNet::new(15, &mut rng(10));
        let mut env = far_apart_env(11);
        let buffer =
            collect_rollout(&policy, &value_net, &mut env, 60, &mut rng(12)).unwrap();
        for ep in &buffer.episodes {
            for tr in &ep.transitions {
                let replayed = policy.log_prob(&tr.obs.flatten(), &tr.action);
                assert!((replayed - tr.log_prob).abs() < 1e-12);
                let v = value_net.value(&tr.obs.flatten());
                assert!((v - tr.value).abs() < 1e-12);
            }
        }
    }

    fn prepared_buffer(seed: u64) -> (GaussianPolicy, ValueNet, RolloutBuffer) {
        let policy = GaussianPolicy::new(15, 3, &mut rng(seed));
        let value_net = ValueNet::new(15, &mut rng(seed + 1));
        let mut env = far_apart_env(seed + 2);
        let mut buffer =
            collect_rollout(&policy, &value_net, &mut env, 128, &mut rng(seed + 3)).unwrap();
        compute_gae(&mut buffer, 0.99, 0.95);
        normalize_advantages(&mut buffer);
        (policy, value_net, buffer)
    }

    #[test]
    fn normalization_is_exact() {
        let (_, _, buffer) = prepared_buffer(31);
        let n = buffer.norm_advantages.len() as f64;
        let mean = buffer.norm_advantages.iter().sum::<f64>() / n;
        let std = (buffer
            .norm_advantages
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-6);
        assert_eq!(buffer.advantages.len(), buffer.norm_advantages.len());
    }

    #[test]
    fn update_with_zero_lr_keeps_ratio_one() {
        let (mut policy, mut value_net, buffer) = prepared_buffer(41);
        let cfg = PpoConfig {
            lr: 0.0,
            minibatch_size: buffer.total_transitions(),
            ..PpoConfig::default()
        };
        let mut pa = adam_for_policy(&policy, cfg.lr, 0.0);
        let mut va = adam_for_value(&value_net, cfg.lr, 0.0);
        let stats = ppo_update(
            &mut policy,
            &mut value_net,
            &buffer,
            &cfg,
            &mut pa,
            &mut va,
            &mut rng(42),
            0,
        )
        .unwrap();
        // New policy == old policy: ratio 1 everywhere, so approx_kl = 0 and
        // the policy loss equals -mean(normalized advantages) ~ 0.
        assert!(stats.approx_kl.abs() < 1e-12);
        assert!(stats.policy_loss.abs() < 1e-10);
        assert_eq!(stats.epochs_run, cfg.n_epochs);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn tiny_target_kl_stops_after_one_epoch() {
        let (mut policy, mut value_net, buffer) = prepared_buffer(51);
        let cfg = PpoConfig {
            target_kl: 1e-12,
            ..PpoConfig::default()
        };
        let mut pa = adam_for_policy(&policy, cfg.lr, 0.0);
        let mut va = adam_for_value(&value_net, cfg.lr, 0.0);
        let stats = ppo_update(
            &mut policy,
            &mut value_net,
            &buffer,
            &cfg,
            &mut pa,
            &mut va,
            &mut rng(52),
            0,
        )
        .unwrap();
        assert_eq!(stats.epochs_run, 1);
    }

    #[test]
    fn update_requires_advantages() {
        let (mut policy, mut value_net, mut buffer) = prepared_buffer(61);
        buffer.norm_advantages.clear();
        let cfg = PpoConfig::default();
        let mut pa = adam_for_policy(&policy, cfg.lr, 0.0);
        let mut va = adam_for_value(&value_net, cfg.lr, 0.0);
        assert!(matches!(
            ppo_update(
                &mut policy,
                &mut value_net,
                &buffer,
                &cfg,
                &mut pa,
                &mut va,
                &mut rng(62),
                0
            ),
            Err(CoreError::MissingAdvantages)
        ));
    }

    /// Policy whose mean is exactly `desired_goal - achieved_goal`, scaled:
    /// a single linear layer reading the goal difference off the flat
    /// observation layout [state(3D), achieved(D), desired(D)].
    fn pursuit_oracle_policy(d: usize, gain: f64) -> GaussianPolicy {
        let mut policy = GaussianPolicy::with_hidden(5 * d, d, &[], &mut rng(71));
        let layer = &mut policy.mean_net.layers[0];
        layer.w.iter_mut().for_each(|w| *w = 0.0);
        layer.b.iter_mut().for_each(|b| *b = 0.0);
        for j in 0..d {
            layer.w[j * 5 * d + 3 * d + j] = -gain; // achieved
            layer.w[j * 5 * d + 4 * d + j] = gain; // desired
        }
        policy.log_std = vec![LOG_STD_FLOOR; d];
        policy
    }

    #[test]
    fn evaluate_perfect_policy_always_succeeds() {
        let policy = pursuit_oracle_policy(3, 10.0);
        let cfg = EnvConfig {
            prey_policy: PreyPolicy::Static,
            spawn_policy: SpawnPolicy::Apart,
            ..EnvConfig::default()
        };
        let stats = evaluate(&policy, &cfg, 50, &mut rng(72)).unwrap();
        assert_eq!(stats.success_rate, 1.0);
        assert_eq!(stats.mean_return, 1.0);
    }

    #[test]
    fn evaluate_random_policy_rarely_solves_straight_away() {
        let policy = GaussianPolicy::new(15, 3, &mut rng(73));
        let cfg = EnvConfig {
            prey_policy: PreyPolicy::StraightAway,
            spawn_policy: SpawnPolicy::Apart,
            ..EnvConfig::default()
        };
        let stats = evaluate(&policy, &cfg, 100, &mut rng(74)).unwrap();
        assert!(stats.success_rate < 0.05, "rate {}", stats.success_rate);
    }

    #[test]
    fn evaluate_zero_policy_succeeds_when_spawned_within_reach() {
        let policy = quiet_policy(15, 3, 75);
        let cfg = EnvConfig {
            prey_policy: PreyPolicy::Static,
            spawn_policy: SpawnPolicy::Apart,
            size: 1.8, // prey at 0.9 < I
            ..EnvConfig::default()
        };
        let stats = evaluate(&policy, &cfg, 20, &mut rng(76)).unwrap();
        assert_eq!(stats.success_rate, 1.0);
    }

    #[test]
    fn approx_kl_nonnegative_on_random_policy_pairs() {
        let mut r = rng(81);
        for _ in 0..50 {
            let old_policy = GaussianPolicy::new(10, 2, &mut r);
            let mut new_policy = GaussianPolicy::new(10, 2, &mut r);
            new_policy.log_std = vec![r.random_range(-1.0..0.5); 2];
            let mut old_lp = Vec::new();
            let mut new_lp = Vec::new();
            for _ in 0..64 {
                let obs: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
                let (action, lp) = old_policy.sample(&obs, &mut r);
                old_lp.push(lp);
                new_lp.push(new_policy.log_prob(&obs, &action));
            }
            assert!(approx_kl(&old_lp, &new_lp) >= -1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn episode_invariant_holds_for_collected_rollouts(seed in 0u64..200) {
            let policy = GaussianPolicy::new(15, 3, &mut rng(seed));
            let value_net = ValueNet::new(15, &mut rng(seed + 1));
            let mut env = far_apart_env(seed + 2);
            let buffer =
                collect_rollout(&policy, &value_net, &mut env, 64, &mut rng(seed + 3)).unwrap();
            for ep in &buffer.episodes {
                prop_assert!(ep.check_invariant());
            }
            prop_assert!(buffer.total_transitions() >= 64);
        }
    }
}
