"""Small dense-network toolkit: MLPs with exact backprop, Adam, Gaussian heads.

Inputs are batch-first ``(B, in)``; weights are stored ``(out, in)``. The
dtype of the parameters decides the compute dtype, so gradient checks run
in float64 while training runs in float32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")


@dataclass
class MlpParams:
    layers: list[Dense]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError(f"layer sizes do not chain: {a.weight.shape} -> {b.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in layer order ``[W0, b0, W1, b1, ...]`` (views)."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> MlpParams:
        return MlpParams([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_dense(n_in: int, n_out: int, activation: str, gain: float, rng: np.random.Generator,
               dtype=np.float32) -> Dense:
    return Dense(orthogonal((n_out, n_in), gain, rng).astype(dtype), np.zeros(n_out, dtype=dtype), activation)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, hidden_activation: str = "relu",
             out_activation: str = "identity", out_gain: float = 1.0, dtype=np.float32) -> MlpParams:
    """Orthogonal init, gain sqrt(2) on hidden layers and ``out_gain`` on the last."""
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        last = i == n - 1
        layers.append(init_dense(sizes[i], sizes[i + 1], out_activation if last else hidden_activation,
                                 out_gain if last else np.sqrt(2.0), rng, dtype))
    return MlpParams(layers)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1 - a * a)
    return g


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Returns the output and a cache for :func:`backward`."""
    dtype = params.layers[0].weight.dtype
    h = np.asarray(x, dtype=dtype)
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ValueError(f"expected input of shape (B, {params.in_dim}), got {h.shape}")
    cache = []
    for layer in params.layers:
        z = h @ layer.weight.T + layer.bias
        a = _act(layer.activation, z)
        cache.append((h, z, a))
        h = a
    return h, cache


def backward(params: MlpParams, cache: list, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients aligned with ``params.arrays()`` plus the input gradient."""
    grads: list[np.ndarray] = []
    g = grad_out
    for layer, (h, z, a) in zip(reversed(params.layers), reversed(cache)):
        g = _act_grad(layer.activation, z, a, g)
        grads += [g.sum(axis=0), g.T @ h]
        g = g @ layer.weight
    grads.reverse()
    return grads, g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 3e-4, **kw) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


# -- diagonal Gaussian policy head ---------------------------------------

class GaussianPolicyOutput(NamedTuple):
    mean: np.ndarray  # (B, A)
    log_std: np.ndarray  # (A,)


class ActionSample(NamedTuple):
    action: np.ndarray  # clamped to [-1, 1], what the environment sees
    raw: np.ndarray  # the unclamped draw
    log_prob: np.ndarray


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 + _HALF_LOG_2PI))


def sample_action(out: GaussianPolicyOutput, rng: np.random.Generator) -> ActionSample:
    """Draw from N(mean, exp(log_std)^2); log-prob is of the unclamped draw."""
    log_std = np.clip(out.log_std, LOG_STD_MIN, LOG_STD_MAX)
    mean = np.atleast_2d(out.mean)
    noise = rng.standard_normal(mean.shape).astype(mean.dtype, copy=False)
    raw = mean + np.exp(log_std) * noise
    return ActionSample(np.clip(raw, -1.0, 1.0), raw, gaussian_log_prob(mean, log_std, raw))


@dataclass
class ActorCritic:
    """Shared ReLU trunk with a Gaussian mean head, a value head and a free log-std."""

    trunk: MlpParams
    mean_head: Dense
    value_head: Dense
    log_std: np.ndarray
    input_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.input_scale is None:
            self.input_scale = np.ones(self.trunk.in_dim, dtype=self.trunk.layers[0].weight.dtype)

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (128, 128),
               input_scale: np.ndarray | None = None, value_gain: float = 0.01, dtype=np.float32) -> ActorCritic:
        trunk = init_mlp([obs_dim, *hidden], rng, out_activation="relu", out_gain=np.sqrt(2.0), dtype=dtype)
        mean_head = init_dense(hidden[-1], act_dim, "identity", 0.01, rng, dtype)
        # a near-flat initial critic; a gain-1 value head sends an unrewarded
        # policy chasing the random value landscape through the bootstrap
        value_head = init_dense(hidden[-1], 1, "identity", value_gain, rng, dtype)
        scale = None if input_scale is None else np.asarray(input_scale, dtype=dtype)
        return cls(trunk, mean_head, value_head, np.zeros(act_dim, dtype=dtype), scale)

    @property
    def dtype(self):
        return self.log_std.dtype

    def params(self) -> list[np.ndarray]:
        return self.trunk.arrays() + [self.mean_head.weight, self.mean_head.bias,
                                      self.value_head.weight, self.value_head.bias, self.log_std]

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.trunk.layers):
            out[f"policy.trunk.{i}.weight"] = layer.weight
            out[f"policy.trunk.{i}.bias"] = layer.bias
        out.update({
            "policy.mean.weight": self.mean_head.weight, "policy.mean.bias": self.mean_head.bias,
            "policy.value.weight": self.value_head.weight, "policy.value.bias": self.value_head.bias,
            "policy.log_std": self.log_std, "policy.input_scale": self.input_scale,
        })
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> ActorCritic:
        layers = []
        i = 0
        while f"policy.trunk.{i}.weight" in arrays:
            layers.append(Dense(arrays[f"policy.trunk.{i}.weight"].copy(), arrays[f"policy.trunk.{i}.bias"].copy(), "relu"))
            i += 1
        return cls(MlpParams(layers),
                   Dense(arrays["policy.mean.weight"].copy(), arrays["policy.mean.bias"].copy(), "identity"),
                   Dense(arrays["policy.value.weight"].copy(), arrays["policy.value.bias"].copy(), "identity"),
                   arrays["policy.log_std"].copy(), arrays["policy.input_scale"].copy())

    def copy(self) -> ActorCritic:
        return ActorCritic.from_named({k: v for k, v in self.named_params().items()})

    def forward(self, obs: np.ndarray):
        """Returns ``(mean, value, cache)``; value has shape ``(B,)``."""
        x = np.asarray(obs, dtype=self.dtype) * self.input_scale
        h, trunk_cache = forward(self.trunk, x)
        mean = h @ self.mean_head.weight.T + self.mean_head.bias
        value = (h @ self.value_head.weight.T + self.value_head.bias)[:, 0]
        return mean, value, (h, trunk_cache)

    def policy(self, obs: np.ndarray) -> tuple[GaussianPolicyOutput, np.ndarray]:
        mean, value, _ = self.forward(obs)
        return GaussianPolicyOutput(mean, self.log_std), value

    def backward(self, cache, d_mean: np.ndarray, d_value: np.ndarray, d_log_std: np.ndarray) -> list[np.ndarray]:
        h, trunk_cache = cache
        d_value = d_value[:, None]
        dh = d_mean @ self.mean_head.weight + d_value @ self.value_head.weight
        trunk_grads, _ = backward(self.trunk, trunk_cache, dh)
        return trunk_grads + [d_mean.T @ h, d_mean.sum(axis=0), d_value.T @ h, d_value.sum(axis=0),
                              np.asarray(d_log_std, dtype=self.dtype)]


# -- checkpoint file -------------------------------------------------------
#
# b"AGVRNDCK" | u32 version | u32 count | count x (u16 name_len, name,
# u8 ndim, u32 dims...) | all arrays as little-endian float32 in header order

CHECKPOINT_MAGIC = b"AGVRNDCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    header = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    body = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)) + encoded)
        header.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(header + body))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    try:
        return _decode_arrays(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None


def _decode_arrays(data: bytes, path) -> dict[str, np.ndarray]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        out[name] = arr.astype(np.float32)
        off += 4 * size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out
