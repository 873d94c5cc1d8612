"""Clipped policy-gradient trainer over vectorized rollouts.

Rollouts store pre-squash samples so the update can re-evaluate exact
log-probabilities under new parameters; the tanh-squash correction is
constant w.r.t. parameters and cancels inside the ratio. Gradients come
from the package's own reverse-mode tape (autodiff.py); the optimizer is
a bias-corrected per-parameter first/second-moment scheme (eps 1e-8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .policy import LOG_2PI, ActorCritic, squash_correction


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    lr: float = 3e-4
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    horizon: int = 128
    n_envs: int = 64
    hidden: tuple[int, int] = (64, 64)


@dataclass
class RolloutBatch:
    """Per (step, env) rollout data, horizon x n_envs leading dims."""

    obs: np.ndarray        # [H, E, obs_dim]
    actions: np.ndarray    # [H, E, act_dim] squashed
    pre_squash: np.ndarray  # [H, E, act_dim]
    log_probs: np.ndarray  # [H, E]
    rewards: np.ndarray    # [H, E]
    values: np.ndarray     # [H, E]
    dones: np.ndarray      # [H, E] episode ended at this step
    last_values: np.ndarray  # [E] bootstrap values for the state after H
    episode_successes: list[bool] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.obs.shape[0]

    @property
    def n_envs(self) -> int:
        return self.obs.shape[1]


def compute_gae(batch: RolloutBatch, gamma: float = 0.99,
                lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Standard recursive generalized advantage estimation with done
    masking; returns (advantages, returns), both [H, E]."""
    h, e = batch.rewards.shape
    adv = np.zeros((h, e))
    lastgaelam = np.zeros(e)
    for t in range(h - 1, -1, -1):
        nonterminal = 1.0 - batch.dones[t]
        next_values = batch.last_values if t == h - 1 else batch.values[t + 1]
        delta = (batch.rewards[t] + gamma * next_values * nonterminal
                 - batch.values[t])
        lastgaelam = delta + gamma * lam * nonterminal * lastgaelam
        adv[t] = lastgaelam
    return adv, adv + batch.values


class Adam:
    """Bias-corrected adaptive moments over the flat parameter vector."""

    def __init__(self, n_params: int, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float,
             ) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return flat - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load(self, s: dict) -> None:
        self.m = np.asarray(s["m"], dtype=np.float64).copy()
        self.v = np.asarray(s["v"], dtype=np.float64).copy()
        self.t = int(s["t"])


def minibatch_loss(policy: ActorCritic, obs: np.ndarray, u: np.ndarray,
                   logp_old: np.ndarray, adv: np.ndarray, ret: np.ndarray,
                   cfg: PPOConfig):
    """Build the taped PPO loss on one minibatch.

    Returns (loss tensor, param tensors, stats dict).
    """
    obs_n = (obs - policy.obs_offset) / policy.obs_scale
    params, actor_mean, critic, log_std = policy.taped()
    mean = actor_mean(obs_n)
    ls = log_std()
    inv_std = ad.exp(-1.0 * ls)
    z = (ad.as_tensor(u) - mean) * inv_std
    act_dim = u.shape[1]
    gauss = (ad.square(z) * -0.5 - ls).sum(axis=1) + (-0.5 * LOG_2PI * act_dim)
    logp_new = gauss - squash_correction(u)
    ratio = ad.exp(logp_new - logp_old)
    surr1 = ratio * adv
    surr2 = ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    surr = ad.minimum(surr1, surr2)
    # the applied surrogate can never exceed the unclipped one where
    # advantage > 0 and the ratio left the trust region
    guard = (adv > 0.0) & (ratio.data > 1.0 + cfg.clip)
    assert np.all(surr.data[guard] <= surr1.data[guard] + 1e-12)
    policy_loss = -1.0 * surr.mean()
    v = critic(obs_n)
    value_loss = ad.square(v - ret[:, None]).mean()
    entropy = (ls + 0.5 * (1.0 + LOG_2PI)).sum()
    loss = (policy_loss + cfg.vf_coef * value_loss
            - cfg.entropy_coef * entropy)
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "approx_kl": float(np.mean(logp_old - logp_new.data)),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip)),
    }
    return loss, params, stats


def update(policy: ActorCritic, optimizer: Adam, batch: RolloutBatch,
           cfg: PPOConfig, shuffle_rng: np.random.Generator) -> dict:
    """One PPO update: epochs x minibatches of clipped-surrogate steps.

    Mutates policy.flat and the optimizer moments; deterministic given
    the shuffle generator state. A non-finite loss aborts the update
    (parameters untouched) and reports {"aborted": True, ...}.
    """
    adv, ret = compute_gae(batch, cfg.gamma, cfg.lam)
    adv = adv.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ret = ret.reshape(-1)
    n = adv.size
    obs = batch.obs.reshape(n, -1)
    u = batch.pre_squash.reshape(n, -1)
    logp_old = batch.log_probs.reshape(n)

    flat_backup = policy.flat.copy()
    agg: dict[str, float] = {}
    count = 0
    grad_norm_last = 0.0
    mb_size = n // cfg.minibatches
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for k in range(cfg.minibatches):
            idx = perm[k * mb_size:(k + 1) * mb_size]
            loss, params, stats = minibatch_loss(
                policy, obs[idx], u[idx], logp_old[idx], adv[idx], ret[idx],
                cfg)
            if not np.isfinite(loss.data):
                policy.set_flat(flat_backup)
                return {"aborted": True, "loss": float(loss.data)}
            loss.backward()
            grad = policy.grad_flat(params)
            gnorm = math.sqrt(float(grad @ grad))
            grad_norm_last = gnorm
            if gnorm > cfg.max_grad_norm:
                grad = grad * (cfg.max_grad_norm / gnorm)
            policy.flat = optimizer.step(policy.flat, grad, cfg.lr)
            for key, val in stats.items():
                agg[key] = agg.get(key, 0.0) + val
            count += 1
    out = {k: v / count for k, v in agg.items()}
    out["grad_norm"] = grad_norm_last
    out["aborted"] = False
    return out
