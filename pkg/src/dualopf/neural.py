"""One-hidden-layer ReLU network with a sigmoid + box output head, written in numpy.

Arrays are batch-first: ``x`` has shape (B, dim_x) and ``y`` (B, dim_y).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .opf_model import apply_box

CHECKPOINT_VERSION = 1


@dataclass
class MLPParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    def arrays(self):
        return [getattr(self, k) for k in self.NAMES]

    def map(self, fn, *others):
        """Apply ``fn`` leaf-wise across this and other parameter sets."""
        return MLPParams(*[fn(*leaves) for leaves in zip(self.arrays(), *(o.arrays() for o in others))])

    def copy(self):
        return self.map(np.copy)

    @classmethod
    def zeros_like(cls, other):
        return other.map(np.zeros_like)

    @property
    def shape(self):
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]


def init_params(dim_x: int, hidden: int, dim_y: int, rng: np.random.Generator) -> MLPParams:
    """He-style uniform fan-in init for weights, zero biases."""
    lim1 = np.sqrt(6.0 / dim_x)
    lim2 = np.sqrt(6.0 / hidden)
    return MLPParams(
        W1=rng.uniform(-lim1, lim1, size=(hidden, dim_x)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-lim2, lim2, size=(dim_y, hidden)),
        b2=np.zeros(dim_y),
    )


@dataclass
class Scaler:
    """Per-component standardization of the input loads."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, x):
        return (x - self.mean) / self.std


@dataclass
class ForwardTrace:
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    beta: np.ndarray
    y: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    W2: np.ndarray


def sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def forward(params: MLPParams, x, lo, hi) -> ForwardTrace:
    """y = box(sigmoid(W2 relu(W1 x + b1) + b2)); the trace keeps every intermediate."""
    x = np.atleast_2d(x)
    a1 = x @ params.W1.T + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.W2.T + params.b2
    beta = sigmoid(a2)
    y = apply_box(beta, lo, hi)
    return ForwardTrace(x, a1, h1, a2, beta, y, lo, hi, params.W2)


def backward(trace: ForwardTrace, dl_dy) -> MLPParams:
    """Reverse-mode gradients summed over the batch (ReLU'(0) taken as 0)."""
    dl_dy = np.atleast_2d(dl_dy)
    d_beta = dl_dy * (trace.lo - trace.hi)
    d_a2 = d_beta * trace.beta * (1.0 - trace.beta)
    d_a1 = (d_a2 @ trace.W2) * (trace.a1 > 0)
    return MLPParams(
        W1=d_a1.T @ trace.x,
        b1=d_a1.sum(axis=0),
        W2=d_a2.T @ trace.h1,
        b2=d_a2.sum(axis=0),
    )


@dataclass
class AdamState:
    m: MLPParams
    v: MLPParams
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: MLPParams, lr: float = 1e-3, **kw):
        return cls(MLPParams.zeros_like(params), MLPParams.zeros_like(params), lr=lr, **kw)


def adam_step(params: MLPParams, grads: MLPParams, state: AdamState) -> tuple[MLPParams, AdamState]:
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = params.map(lambda p, m_, v_: p - state.lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps), m, v)
    return new, AdamState(m, v, t, state.lr, b1, b2, state.eps)


@dataclass
class Sensitivities:
    """Per-sample total derivatives of the dependent blocks w.r.t. y."""

    dz1_dy: np.ndarray  # (B, dim_z1, dim_y)
    dz2_dy: np.ndarray  # (B, dim_z2, dim_y)


def total_y_gradient(dl_dy, dl_dz1, dl_dz2, sens: Sensitivities):
    """dL/dy through the recovery map, batch-wise."""
    return (dl_dy + np.einsum("bij,bi->bj", sens.dz1_dy, dl_dz1)
            + np.einsum("bij,bi->bj", sens.dz2_dy, dl_dz2))


def chain_total_gradient(trace: ForwardTrace, dl_dy, dl_dz1, dl_dz2, sens: Sensitivities) -> MLPParams:
    return backward(trace, total_y_gradient(dl_dy, dl_dz1, dl_dz2, sens))


@dataclass
class Checkpoint:
    params: MLPParams
    scaler: Scaler
    kind: str  # "split" (predicts y) or "ngt" (predicts all-bus V, theta)
    seed: int
    case_checksum: str
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        dim_x, hidden, dim_y = self.params.shape
        return {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "dims": {"x": dim_x, "hidden": hidden, "y": dim_y},
            "seed": self.seed,
            "case_checksum": self.case_checksum,
            "scaler": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "params": {k: a.tolist() for k, a in zip(MLPParams.NAMES, self.params.arrays())},
            "config": self.config,
            "extra": self.extra,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, d: dict) -> "Checkpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        p = d["params"]
        params = MLPParams(*[np.array(p[k], dtype=float) for k in MLPParams.NAMES])
        sc = d["scaler"]
        return cls(params, Scaler(np.array(sc["mean"]), np.array(sc["std"])), d["kind"], d["seed"],
                   d["case_checksum"], d.get("config", {}), d.get("extra", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(json.loads(Path(path).read_text()))
