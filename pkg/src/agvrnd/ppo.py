"""Clipped-surrogate PPO over a Gaussian actor-critic.

Rollout arrays are time-major, ``(T, n_envs, ...)``. Returns are plain
discounted sums inside each episode, bootstrapped from the critic where an
episode was cut by the step budget or by the end of the rollout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from agvrnd.nn import (LOG_STD_MAX, LOG_STD_MIN, ActorCritic, AdamState, adam_step, clip_grad_norm,
                       gaussian_entropy, gaussian_log_prob)


@dataclass
class PpoConfig:
    discount: float = 0.99
    clip_eps: float = 0.2
    epochs: int = 3
    minibatch_size: int = 512
    collect_horizon: int = 2048
    alpha_ext: float = 1.0
    beta_int: float = 1.0
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    normalize_ext: bool = False

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must be in (0, 1), got {self.discount}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.epochs < 0 or self.minibatch_size < 1 or self.collect_horizon < 1:
            raise ValueError("epochs must be >= 0; minibatch_size and collect_horizon >= 1")


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, N, D)
    next_obs: np.ndarray  # (T, N, D) true successors, before any auto-reset
    actions: np.ndarray  # (T, N, A) unclamped draws
    log_probs: np.ndarray  # (T, N) behaviour log-probabilities
    rewards_e: np.ndarray  # (T, N)
    rewards_i: np.ndarray  # (T, N)
    values: np.ndarray  # (T, N) V(s_t)
    next_values: np.ndarray  # (T, N) V(s_{t+1})
    terminated: np.ndarray  # (T, N) bool
    truncated: np.ndarray  # (T, N) bool

    @classmethod
    def allocate(cls, horizon: int, n_envs: int, obs_dim: int, act_dim: int) -> Trajectory:
        f = np.float64
        return cls(np.zeros((horizon, n_envs, obs_dim), f), np.zeros((horizon, n_envs, obs_dim), f),
                   np.zeros((horizon, n_envs, act_dim), f), np.zeros((horizon, n_envs), f),
                   np.zeros((horizon, n_envs), f), np.zeros((horizon, n_envs), f),
                   np.zeros((horizon, n_envs), f), np.zeros((horizon, n_envs), f),
                   np.zeros((horizon, n_envs), bool), np.zeros((horizon, n_envs), bool))

    @property
    def length(self) -> int:
        return self.rewards_e.shape[0]


@dataclass
class UpdateStats:
    objective: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_frac: float = 0.0
    approx_kl: float = 0.0
    n_minibatches: int = 0


def combine_rewards(r_e: np.ndarray, r_i: np.ndarray, alpha_ext: float, beta_int: float) -> np.ndarray:
    r_e, r_i = np.asarray(r_e, dtype=np.float64), np.asarray(r_i, dtype=np.float64)
    if r_e.shape != r_i.shape:
        raise ValueError(f"reward sequences differ in shape: {r_e.shape} vs {r_i.shape}")
    return alpha_ext * r_e + beta_int * r_i


def compute_advantages(rewards, values, next_values, terminated, truncated, discount: float):
    """Discounted returns and raw advantages ``A_t = G_t - V(s_t)``.

    Works on ``(T,)`` or ``(T, N)`` arrays. A terminated step contributes no
    future; a truncated step, or the last step of the rollout, is
    bootstrapped with ``next_values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=bool)
    truncated = np.asarray(truncated, dtype=bool)
    returns = np.zeros_like(rewards)
    T = rewards.shape[0]
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            future = next_values[t]
        else:
            future = np.where(truncated[t], next_values[t], running)
        future = np.where(terminated[t], 0.0, future)
        running = rewards[t] + discount * future
        returns[t] = running
    return returns, returns - values


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / (x.std() + 1e-8)


def policy_ratio(logp_new, logp_old):
    return np.exp(np.asarray(logp_new) - np.asarray(logp_old))


def clipped_objective(ratio, advantage, clip_eps: float):
    ratio = np.asarray(ratio)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def ppo_loss_and_grads(ac: ActorCritic, obs, actions, logp_old, advantages, returns, config: PpoConfig):
    """Loss ``-surrogate + c_v * MSE - c_e * entropy`` with exact gradients.

    Returns ``(loss, grads, info)``; grads align with ``ac.params()``.
    """
    n = obs.shape[0]
    mean, value, cache = ac.forward(obs)
    log_std = ac.log_std
    diff = np.asarray(actions, dtype=mean.dtype) - mean
    logp = gaussian_log_prob(mean, log_std, np.asarray(actions, dtype=mean.dtype))
    ratio = policy_ratio(logp, logp_old)
    adv = np.asarray(advantages, dtype=np.float64)
    surr_unclipped = ratio * adv
    surr_clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
    objective = np.minimum(surr_unclipped, surr_clipped)
    unclipped_active = surr_unclipped <= surr_clipped

    err = value - np.asarray(returns, dtype=np.float64)
    value_loss = float(np.mean(err * err))
    entropy = gaussian_entropy(log_std)
    loss = -float(np.mean(objective)) + config.value_coef * value_loss - config.entropy_coef * entropy

    d_logp = np.where(unclipped_active, -adv * ratio / n, 0.0)
    inv_var = np.exp(-2.0 * log_std.astype(np.float64))
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = np.sum(d_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - config.entropy_coef
    d_value = config.value_coef * 2.0 * err / n
    dt = ac.dtype
    grads = ac.backward(cache, d_mean.astype(dt), d_value.astype(dt), d_log_std.astype(dt))

    log_ratio = logp - np.asarray(logp_old)
    info = {
        "objective": float(np.mean(objective)),
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)),
        "approx_kl": float(np.mean(np.expm1(log_ratio) - log_ratio)),
    }
    return loss, grads, info


def ppo_update(ac: ActorCritic, optimizer: AdamState, obs: np.ndarray, actions: np.ndarray,
               logp_old: np.ndarray, advantages: np.ndarray, returns: np.ndarray,
               config: PpoConfig, rng: np.random.Generator) -> UpdateStats:
    """E epochs of shuffled minibatch Adam steps on flattened rollout data.

    Advantages are standardised once over the whole batch. Parameters are
    updated in place.
    """
    n = obs.shape[0]
    adv = standardize(advantages) if n > 1 else np.asarray(advantages, dtype=np.float64)
    stats = UpdateStats()
    params = ac.params()
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            _, grads, info = ppo_loss_and_grads(ac, obs[idx], actions[idx], logp_old[idx], adv[idx],
                                                returns[idx], config)
            if config.max_grad_norm:
                clip_grad_norm(grads, config.max_grad_norm)
            adam_step(params, grads, optimizer)
            np.clip(ac.log_std, LOG_STD_MIN, LOG_STD_MAX, out=ac.log_std)
            stats.objective += info["objective"]
            stats.value_loss += info["value_loss"]
            stats.entropy += info["entropy"]
            stats.clip_frac += info["clip_frac"]
            stats.approx_kl += info["approx_kl"]
            stats.n_minibatches += 1
    if stats.n_minibatches:
        k = stats.n_minibatches
        stats.objective /= k
        stats.value_loss /= k
        stats.entropy /= k
        stats.clip_frac /= k
        stats.approx_kl /= k
    return stats
