"""Random Network Distillation: novelty as predictor error against a frozen random net."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from agvrnd.nn import AdamState, MlpParams, adam_step, backward, forward, init_mlp


class RunningNormalizer:
    """Streaming mean and unbiased variance with batch merging (Chan et al.).

    The merged moments equal the moments of the concatenated data no matter
    how it was split into batches.
    """

    def __init__(self, shape: tuple[int, ...] | int = (), clip_bound: float = 5.0):
        self.count = 0
        self.mean = np.zeros(shape, dtype=np.float64)
        self._m2 = np.zeros(shape, dtype=np.float64)
        self.clip_bound = clip_bound

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self._m2 / (self.count - 1)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape((-1,) + self.mean.shape)
        n_b = batch.shape[0]
        if n_b == 0:
            return
        mean_b = batch.mean(axis=0)
        m2_b = np.square(batch - mean_b).sum(axis=0)
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self._m2 = self._m2 + m2_b + np.square(delta) * (self.count * n_b / n)
        self.count = n

    def normalize(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip_bound, self.clip_bound)

    def state(self) -> dict[str, np.ndarray]:
        return {"count": np.array([self.count], dtype=np.float64), "mean": self.mean, "var": self.var}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], clip_bound: float = 5.0) -> RunningNormalizer:
        norm = cls(state["mean"].shape, clip_bound)
        norm.count = int(round(float(state["count"][0])))
        norm.mean = np.asarray(state["mean"], dtype=np.float64).copy()
        norm._m2 = np.asarray(state["var"], dtype=np.float64) * max(norm.count - 1, 0)
        return norm


class IntrinsicReturnNormalizer:
    """Scales rewards by the running RMS of their per-env discounted return.

    The return accumulator never resets at episode ends. No mean is
    subtracted, so non-negative rewards stay non-negative.
    """

    def __init__(self, n_envs: int, gamma: float = 0.99):
        self.gamma = gamma
        self.returns = np.zeros(n_envs, dtype=np.float64)
        self.count = 0
        self.mean_square = 0.0

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.mean_square))

    def normalize(self, rewards: np.ndarray) -> np.ndarray:
        """``rewards`` is time-major ``(T, n_envs)``."""
        rewards = np.asarray(rewards, dtype=np.float64)
        seen = np.empty_like(rewards)
        for t in range(rewards.shape[0]):
            self.returns = self.returns * self.gamma + rewards[t]
            seen[t] = self.returns
        n = seen.size
        if n:
            total = self.count + n
            self.mean_square += (float(np.mean(seen * seen)) - self.mean_square) * (n / total)
            self.count = total
        return rewards / (self.scale + 1e-8)

    def state(self) -> dict[str, np.ndarray]:
        return {"returns": self.returns, "count": np.array([self.count], dtype=np.float64),
                "mean_square": np.array([self.mean_square])}


def params_digest(params: MlpParams) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class RndModel:
    target: MlpParams
    predictor: MlpParams
    optimizer: AdamState

    @property
    def out_dim(self) -> int:
        return self.target.out_dim

    @classmethod
    def create(cls, obs_dim: int, rng: np.random.Generator, out_dim: int = 64, hidden: int = 128,
               lr: float = 3e-4, dtype=np.float32) -> RndModel:
        # predictor gets one extra hidden layer so it cannot copy the target exactly
        target = init_mlp([obs_dim, hidden, hidden, out_dim], rng, dtype=dtype)
        predictor = init_mlp([obs_dim, hidden, hidden, hidden, out_dim], rng, dtype=dtype)
        return cls(target, predictor, AdamState.for_params(predictor.arrays(), lr=lr))

    def embed_target(self, x: np.ndarray) -> np.ndarray:
        return forward(self.target, x)[0]


def intrinsic_rewards(model: RndModel, obs_next: np.ndarray, obs_norm: RunningNormalizer) -> np.ndarray:
    """Squared predictor error per observation; zero until ``obs_norm`` has data."""
    obs_next = np.atleast_2d(obs_next)
    if obs_norm.count == 0:
        return np.zeros(obs_next.shape[0])
    x = obs_norm.normalize(obs_next)
    diff = forward(model.predictor, x)[0] - forward(model.target, x)[0]
    return np.sum(np.square(diff, dtype=np.float64), axis=1)


def intrinsic_reward(model: RndModel, obs_next: np.ndarray, obs_norm: RunningNormalizer) -> float:
    return float(intrinsic_rewards(model, np.asarray(obs_next)[None], obs_norm)[0])


def distillation_loss_and_grads(model: RndModel, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Batch mean of ``||f_hat(x) - f(x)||^2`` and its predictor gradients."""
    target = forward(model.target, x)[0]
    pred, cache = forward(model.predictor, x)
    diff = pred - target
    n = x.shape[0]
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / n)
    grads, _ = backward(model.predictor, cache, diff * (2.0 / n))
    return loss, grads


def train_predictor(model: RndModel, batch: np.ndarray, n_passes: int, minibatch_size: int | None = None,
                    rng: np.random.Generator | None = None) -> float | None:
    """Adam passes over already-normalised observations; the target is never touched.

    With ``minibatch_size`` each pass shuffles and walks the batch in chunks,
    otherwise each pass is one full-batch step. Returns the loss of the last
    minibatch, or None when no step was taken.
    """
    batch = np.asarray(batch)
    if batch.shape[0] == 0:
        raise ValueError("train_predictor needs a non-empty batch")
    n = batch.shape[0]
    loss = None
    params = model.predictor.arrays()
    for _ in range(n_passes):
        if minibatch_size is None or minibatch_size >= n:
            chunks = [np.arange(n)]
        else:
            if rng is None:
                raise ValueError("minibatch training needs an rng for shuffling")
            perm = rng.permutation(n)
            chunks = [perm[i:i + minibatch_size] for i in range(0, n, minibatch_size)]
        for idx in chunks:
            loss, grads = distillation_loss_and_grads(model, batch[idx])
            adam_step(params, grads, model.optimizer)
    return loss
