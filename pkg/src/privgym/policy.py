"""Actor-critic policy: two [64, 64] tanh MLPs over a fixed input scaling.

The actor outputs the mean of a diagonal Gaussian over the action
channels; the log-std is a state-independent parameter clamped to
[-5, 2]. Actions are tanh-squashed into [-1, 1] and log-probabilities
carry the squash correction. Parameters live in a flat float64 vector
with a deterministic layout, so checkpoints and the optimizer state are
plain arrays.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
_SQUASH_EPS = 1e-6

# fixed normalization for the 18-channel tabletop observation
# (positions ~0.5 m about the table top, aperture ~cm, damped velocities)
TABLETOP_OBS_OFFSET = np.array(
    [0.0, 0.4, 0.0, 0.04, 0.0, 0.4, 0.0,
     0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
     0.0, 0.4, 0.0, 0.0])
TABLETOP_OBS_SCALE = np.array(
    [0.5, 0.5, 1.6, 0.04, 0.5, 0.5, 1.6,
     2.0, 2.0, 12.0, 0.1, 2.0, 2.0, 12.0,
     0.5, 0.5, 0.5, 0.5])


class PolicyDivergedError(RuntimeError):
    pass


def _orthogonal(rng: np.random.Generator, rows: int, cols: int,
                gain: float) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a if rows >= cols else a.T)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class ActorCritic:
    """Parameter container plus forward passes (plain and taped)."""

    def __init__(self, obs_dim: int, act_dim: int,
                 hidden: tuple[int, int] = (64, 64), seed: int = 0,
                 obs_offset: np.ndarray | None = None,
                 obs_scale: np.ndarray | None = None):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.hidden = tuple(hidden)
        self.obs_offset = (np.zeros(obs_dim) if obs_offset is None
                           else np.asarray(obs_offset, dtype=np.float64))
        self.obs_scale = (np.ones(obs_dim) if obs_scale is None
                          else np.asarray(obs_scale, dtype=np.float64))
        rng = np.random.Generator(np.random.PCG64(seed))
        sizes = (obs_dim, *self.hidden)
        spec = []
        for i in range(len(sizes) - 1):
            spec.append((f"a_w{i}", (sizes[i], sizes[i + 1]), math.sqrt(2)))
            spec.append((f"a_b{i}", (sizes[i + 1],), 0.0))
        spec.append(("a_head_w", (sizes[-1], act_dim), 0.01))
        spec.append(("a_head_b", (act_dim,), 0.0))
        spec.append(("log_std", (act_dim,), None))
        for i in range(len(sizes) - 1):
            spec.append((f"c_w{i}", (sizes[i], sizes[i + 1]), math.sqrt(2)))
            spec.append((f"c_b{i}", (sizes[i + 1],), 0.0))
        spec.append(("c_head_w", (sizes[-1], 1), 1.0))
        spec.append(("c_head_b", (1,), 0.0))

        self.layout: list[tuple[str, tuple, int, int]] = []
        chunks = []
        offset = 0
        for name, shape, gain in spec:
            if name == "log_std":
                arr = np.zeros(shape)
            elif len(shape) == 2:
                arr = _orthogonal(rng, shape[0], shape[1], gain)
            else:
                arr = np.zeros(shape)
            size = arr.size
            self.layout.append((name, shape, offset, offset + size))
            chunks.append(arr.ravel())
            offset += size
        self.flat = np.concatenate(chunks)

    # -- parameter access ----------------------------------------------------

    def view(self, name: str) -> np.ndarray:
        for n, shape, lo, hi in self.layout:
            if n == name:
                return self.flat[lo:hi].reshape(shape)
        raise KeyError(name)

    @property
    def n_params(self) -> int:
        return self.flat.size

    def set_flat(self, flat: np.ndarray) -> None:
        if flat.shape != self.flat.shape:
            raise ValueError("parameter vector shape mismatch")
        self.flat = flat.astype(np.float64).copy()

    # -- plain numpy forward ---------------------------------------------------

    def _norm(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.obs_offset) / self.obs_scale

    def actor_mean(self, obs: np.ndarray) -> np.ndarray:
        h = self._norm(obs)
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.view(f"a_w{i}") + self.view(f"a_b{i}"))
        return h @ self.view("a_head_w") + self.view("a_head_b")

    def value(self, obs: np.ndarray) -> np.ndarray:
        h = self._norm(obs)
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.view(f"c_w{i}") + self.view(f"c_b{i}"))
        return (h @ self.view("c_head_w") + self.view("c_head_b"))[:, 0]

    def log_std(self) -> np.ndarray:
        return np.clip(self.view("log_std"), LOG_STD_MIN, LOG_STD_MAX)

    # -- sampling --------------------------------------------------------------

    def act(self, obs: np.ndarray, rng: np.random.Generator,
            deterministic: bool = False):
        """Sample squashed actions.

        Returns (action, pre_squash, log_prob, value); action = tanh(u)
        with u ~ N(mean, std). Raises PolicyDivergedError on non-finite
        network output.
        """
        obs = np.atleast_2d(obs)
        mean = self.actor_mean(obs)
        if not np.isfinite(mean).all():
            raise PolicyDivergedError("diverged parameters")
        std = np.exp(self.log_std())
        if deterministic:
            u = mean
        else:
            u = mean + std * rng.standard_normal(mean.shape)
        action = np.tanh(u)
        logp = gaussian_logp(u, mean, np.log(std)) - squash_correction(u)
        value = self.value(obs)
        if not (np.isfinite(logp).all() and np.isfinite(value).all()):
            raise PolicyDivergedError("diverged parameters")
        return action, u, logp, value

    # -- taped forward for the update ------------------------------------------

    def taped(self):
        """Parameter tensors plus taped forward closures."""
        params = {name: ad.parameter(self.flat[lo:hi].reshape(shape))
                  for name, shape, lo, hi in self.layout}

        def actor_mean(obs_norm: np.ndarray) -> ad.Tensor:
            h: ad.Tensor = ad.as_tensor(obs_norm)
            for i in range(len(self.hidden)):
                h = ad.tanh(h @ params[f"a_w{i}"] + params[f"a_b{i}"])
            return h @ params["a_head_w"] + params["a_head_b"]

        def critic(obs_norm: np.ndarray) -> ad.Tensor:
            h: ad.Tensor = ad.as_tensor(obs_norm)
            for i in range(len(self.hidden)):
                h = ad.tanh(h @ params[f"c_w{i}"] + params[f"c_b{i}"])
            return h @ params["c_head_w"] + params["c_head_b"]

        def log_std() -> ad.Tensor:
            return ad.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)

        return params, actor_mean, critic, log_std

    def grad_flat(self, params: dict) -> np.ndarray:
        out = np.zeros_like(self.flat)
        for name, shape, lo, hi in self.layout:
            g = params[name].grad
            if g is not None:
                out[lo:hi] = g.ravel()
        return out


def gaussian_logp(u: np.ndarray, mean: np.ndarray,
                  log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def squash_correction(u: np.ndarray) -> np.ndarray:
    """sum_i log(1 - tanh(u_i)^2 + eps), evaluated stably."""
    return np.log(1.0 - np.tanh(u) ** 2 + _SQUASH_EPS).sum(axis=-1)


def tabletop_policy(seed: int = 0, obs_dim: int = 18, act_dim: int = 6,
                    hidden: tuple[int, int] = (64, 64)) -> ActorCritic:
    return ActorCritic(obs_dim, act_dim, hidden=hidden, seed=seed,
                       obs_offset=TABLETOP_OBS_OFFSET[:obs_dim],
                       obs_scale=TABLETOP_OBS_SCALE[:obs_dim])
