"""Single-layer GRU classifier with hand-written BPTT, losses, optimizers and LR scheduling.

Gate order everywhere is (reset, update, candidate). Class order is
(unknown=0, wuw=1).
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fairwake.errors import ConfigError, ContractError, DataError, DimensionError, DomainError

PARAM_NAMES = ("w_ih", "w_hh", "b_ih", "b_hh", "head_w", "head_b")
CLASS_NAMES = ("unknown", "wuw")
UNKNOWN, WUW = 0, 1


@dataclass
class ModelParams:
    w_ih: np.ndarray  # (3, hidden, input)
    w_hh: np.ndarray  # (3, hidden, hidden)
    b_ih: np.ndarray  # (3, hidden)
    b_hh: np.ndarray  # (3, hidden)
    head_w: np.ndarray  # (classes, hidden)
    head_b: np.ndarray  # (classes,)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, i = self.hidden_size, self.input_size
        c = self.n_classes
        expected = {"w_ih": (3, h, i), "w_hh": (3, h, h), "b_ih": (3, h), "b_hh": (3, h),
                    "head_w": (c, h), "head_b": (c,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_ih.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[2]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    def fingerprint(self) -> tuple:
        return tuple((float(a.sum()), float(np.abs(a).sum())) for a in self.arrays().values())

    def architecture(self) -> dict:
        return {"input_size": self.input_size, "hidden_size": self.hidden_size, "n_classes": self.n_classes}

    @classmethod
    def zeros(cls, input_size=13, hidden_size=200, n_classes=2) -> "ModelParams":
        h, i = hidden_size, input_size
        return cls(np.zeros((3, h, i)), np.zeros((3, h, h)), np.zeros((3, h)), np.zeros((3, h)),
                   np.zeros((n_classes, h)), np.zeros(n_classes))


ParamGrads = ModelParams


def init_params(rng: np.random.Generator, input_size=13, hidden_size=200, n_classes=2) -> ModelParams:
    """Weights ~ U(-1/sqrt(hidden), 1/sqrt(hidden)); biases zero."""
    k = 1.0 / math.sqrt(hidden_size)
    p = ModelParams.zeros(input_size, hidden_size, n_classes)
    p.w_ih = rng.uniform(-k, k, p.w_ih.shape)
    p.w_hh = rng.uniform(-k, k, p.w_hh.shape)
    p.head_w = rng.uniform(-k, k, p.head_w.shape)
    return p


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardCache:
    params: ModelParams
    fingerprint: tuple
    x: np.ndarray  # (B, T, I)
    hs: np.ndarray  # (T + 1, B, H); hs[0] is the zero initial state
    r: np.ndarray  # (T, B, H)
    z: np.ndarray
    n: np.ndarray
    hn: np.ndarray  # hidden-side candidate pre-activation W_hn h + b_hn
    batched: bool


def gru_forward(p: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the GRU over frames x of shape (T, I) or (B, T, I); return logits of the final state."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != p.input_size:
        raise DimensionError(f"expected features with {p.input_size} columns, got shape {x.shape}")
    b, t, _ = x.shape
    if t < 1:
        raise DimensionError("need at least one frame")
    h = p.hidden_size
    w_hh = p.w_hh.reshape(3 * h, h).T
    b_hh = p.b_hh.reshape(3 * h)
    xp = x @ p.w_ih.reshape(3 * h, -1).T + p.b_ih.reshape(3 * h)  # (B, T, 3H)
    hs = np.zeros((t + 1, b, h))
    r = np.empty((t, b, h))
    z = np.empty((t, b, h))
    n = np.empty((t, b, h))
    hn = np.empty((t, b, h))
    for k in range(t):
        hp = hs[k] @ w_hh + b_hh
        xk = xp[:, k]
        r[k] = sigmoid(xk[:, :h] + hp[:, :h])
        z[k] = sigmoid(xk[:, h:2 * h] + hp[:, h:2 * h])
        hn[k] = hp[:, 2 * h:]
        n[k] = np.tanh(xk[:, 2 * h:] + r[k] * hn[k])
        hs[k + 1] = (1.0 - z[k]) * n[k] + z[k] * hs[k]
    logits = hs[t] @ p.head_w.T + p.head_b
    cache = ForwardCache(p, p.fingerprint(), x, hs, r, z, n, hn, batched)
    return (logits if batched else logits[0]), cache


def gru_backward(cache: ForwardCache, grad_logits: np.ndarray) -> ParamGrads:
    """Gradients of sum(logits * grad_logits) with respect to every parameter (BPTT)."""
    p = cache.params
    if p.fingerprint() != cache.fingerprint:
        raise ContractError("parameters changed since the forward pass; cache is stale")
    g = np.asarray(grad_logits, dtype=np.float64)
    if not cache.batched:
        g = g[None]
    b = cache.x.shape[0]
    if g.shape != (b, p.n_classes):
        raise ContractError(f"grad_logits shape {g.shape} does not match cache batch ({b}, {p.n_classes})")
    h = p.hidden_size
    t = cache.x.shape[1]
    w_hh = p.w_hh.reshape(3 * h, h)
    grads = ModelParams.zeros(p.input_size, h, p.n_classes)
    grads.head_w = g.T @ cache.hs[t]
    grads.head_b = g.sum(axis=0)
    dh = g @ p.head_w
    dxp = np.empty((t, b, 3 * h))
    dhp = np.empty((t, b, 3 * h))
    for k in range(t - 1, -1, -1):
        r, z, n, hn, h_prev = cache.r[k], cache.z[k], cache.n[k], cache.hn[k], cache.hs[k]
        da_n = dh * (1.0 - z) * (1.0 - n * n)
        dz = dh * (h_prev - n)
        da_r = da_n * hn * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dxp[k, :, :h] = da_r
        dxp[k, :, h:2 * h] = da_z
        dxp[k, :, 2 * h:] = da_n
        dhp[k, :, :h] = da_r
        dhp[k, :, h:2 * h] = da_z
        dhp[k, :, 2 * h:] = da_n * r
        dh = dh * z + dhp[k] @ w_hh
    x_flat = cache.x.transpose(1, 0, 2).reshape(t * b, -1)
    grads.w_ih = (dxp.reshape(t * b, 3 * h).T @ x_flat).reshape(3, h, -1)
    grads.w_hh = (dhp.reshape(t * b, 3 * h).T @ cache.hs[:t].reshape(t * b, h)).reshape(3, h, h)
    grads.b_ih = dxp.sum(axis=(0, 1)).reshape(3, h)
    grads.b_hh = dhp.sum(axis=(0, 1)).reshape(3, h)
    return grads


# ------------------------------------------------------------------ losses

def temperature_softmax(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: np.ndarray) -> np.ndarray:
    return temperature_softmax(z, 1.0)


def cross_entropy(p: np.ndarray, y: int, eps: float = 1e-12) -> float:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError(f"not a probability vector: {p}")
    return float(-np.log(p[y] + eps))


def batch_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over a batch of logits and its gradient w.r.t. the logits."""
    prob = softmax(logits)
    b = logits.shape[0]
    idx = np.arange(b)
    loss = float(-np.mean(np.log(prob[idx, y] + 1e-12)))
    grad = prob.copy()
    grad[idx, y] -= 1.0
    return loss, grad / b


# -------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str  # "adam" | "sgd"
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    step: int = 0
    buffers: dict = field(default_factory=dict)


def adam(learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState("adam", learning_rate, beta1=beta1, beta2=beta2, eps=eps)


def sgd_momentum(learning_rate=1e-4, momentum=0.9, weight_decay=1e-4) -> OptimizerState:
    return OptimizerState("sgd", learning_rate, momentum=momentum, weight_decay=weight_decay)


def _check_shapes(params: ModelParams, grads: ModelParams):
    for name in PARAM_NAMES:
        a, g = getattr(params, name), getattr(grads, name)
        if a.shape != g.shape:
            raise DimensionError(f"gradient {name} shape {g.shape} != parameter shape {a.shape}")


def adam_step(state: OptimizerState, params: ModelParams, grads: ParamGrads) -> ModelParams:
    if state.kind != "adam":
        raise ConfigError(f"adam_step on a {state.kind} optimizer")
    _check_shapes(params, grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for name in PARAM_NAMES:
        g = getattr(grads, name)
        m = state.buffers.get("m_" + name, np.zeros_like(g))
        v = state.buffers.get("v_" + name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.buffers["m_" + name] = m
        state.buffers["v_" + name] = v
        new[name] = getattr(params, name) - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return ModelParams(**new)


def sgd_momentum_step(state: OptimizerState, params: ModelParams, grads: ParamGrads) -> ModelParams:
    if state.kind != "sgd":
        raise ConfigError(f"sgd_momentum_step on a {state.kind} optimizer")
    _check_shapes(params, grads)
    state.step += 1
    new = {}
    for name in PARAM_NAMES:
        theta = getattr(params, name)
        vel = state.buffers.get("v_" + name, np.zeros_like(theta))
        vel = state.momentum * vel + (getattr(grads, name) + state.weight_decay * theta)
        state.buffers["v_" + name] = vel
        new[name] = theta - state.learning_rate * vel
    return ModelParams(**new)


def optimizer_step(state: OptimizerState, params: ModelParams, grads: ParamGrads) -> ModelParams:
    if state.kind == "adam":
        return adam_step(state, params, grads)
    return sgd_momentum_step(state, params, grads)


@dataclass
class PlateauState:
    lr: float
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-4
    max_reductions: int = 4
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0  # successive reductions with no improvement in between


def plateau_scheduler_update(state: PlateauState, validation_loss: float) -> tuple[float, bool]:
    """Advance one epoch. Returns (lr for the next epoch, stop flag)."""
    if validation_loss < state.best - state.threshold:
        state.best = validation_loss
        state.bad_epochs = 0
        state.reductions = 0
        return state.lr, False
    state.bad_epochs += 1
    if state.bad_epochs < state.patience:
        return state.lr, False
    state.bad_epochs = 0
    state.reductions += 1
    state.lr *= state.factor
    return state.lr, state.reductions >= state.max_reductions


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FWCKPT\x00\x01"
CHECKPOINT_FORMAT = "fairwake-gru"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: ModelParams, seed: int, extras: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write a byte-stable checkpoint atomically (write, then rename).

    Layout: magic, u64 header length, JSON header (sorted keys), then every
    tensor as little-endian float64 in header order.
    """
    tensors = [(name, getattr(params, name)) for name in PARAM_NAMES]
    for name in sorted(extras or {}):
        tensors.append((name, np.asarray(extras[name], dtype=np.float64)))
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.architecture(),
        "seed": int(seed),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    params: ModelParams
    seed: int
    extras: dict
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    off = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(raw[off:off + hlen])
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {header.get('format')} v{header.get('version')}")
    off += hlen
    arrays = {}
    for spec in header["tensors"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(spec["shape"]).copy()
        off += 8 * size
    params = ModelParams(**{n: arrays.pop(n) for n in PARAM_NAMES})
    return Checkpoint(params, header["seed"], arrays, header.get("meta", {}))
