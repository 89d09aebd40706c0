"""Generalized batch normalization.

Each channel c is normalized as ``(x - S_c) / (D_c + eps)`` and then mapped
through the learnable affine ``gamma_c * xhat + beta_c``. In training mode
S and D come from the current batch (for N×C×H×W input a channel's sample
pools N, H and W); in inference mode they come from exponential moving
averages collected during training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import risk
from .deviation import DeviationSpec, evaluate_rows, parse_spec
from .tensor import Tensor, custom_op

__all__ = [
    "ModeError",
    "StatisticsNotInitialized",
    "GbnState",
    "GbnCache",
    "gbn_forward",
    "gbn_backward",
    "sparsity_fraction",
    "bpoe_equivalence_check",
]


class ModeError(RuntimeError):
    """Operation not valid in the layer's current train/infer mode."""


class StatisticsNotInitialized(RuntimeError):
    """Inference requested before any training batch has been seen."""


def _to_rows(x: np.ndarray) -> np.ndarray:
    # (N, C, *spatial) -> (C, N * prod(spatial))
    c = x.shape[1]
    return np.moveaxis(x, 1, 0).reshape(c, -1)


def _from_rows(rows: np.ndarray, shape: tuple) -> np.ndarray:
    moved = (shape[1], shape[0]) + tuple(shape[2:])
    return np.moveaxis(rows.reshape(moved), 0, 1)


@dataclass
class GbnCache:
    mode: str
    shape: tuple
    xhat: np.ndarray  # (C, M), pre-affine output
    denom: np.ndarray  # (C,), D + eps
    s_grad: np.ndarray | None = None
    d_grad: np.ndarray | None = None


class GbnState:
    """Per-channel GBN parameters, running statistics and mode flag.

    ``gamma`` and ``beta`` are trainable tensors; ``running_s`` and
    ``running_d`` are plain arrays that never receive gradients. Calling the
    state on a :class:`Tensor` runs the layer and records it on the active tape.
    """

    def __init__(self, channels: int, spec="sd", epsilon: float = 1e-5, momentum: float = 0.1):
        if channels < 1:
            raise ValueError("channels must be positive")
        if epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        self.channels = channels
        self.spec: DeviationSpec = parse_spec(spec)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_s = np.zeros(channels)
        self.running_d = np.ones(channels)
        self.batches_seen = 0
        self.mode = "train"
        self.track_running = True
        self.last_zero_fraction = float("nan")

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    def parameters(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict:
        return {"running_s": self.running_s, "running_d": self.running_d}

    def __repr__(self) -> str:
        return f"GbnState(channels={self.channels}, spec={self.spec.name}, eps={self.epsilon:g}, mode={self.mode})"

    def __call__(self, x: Tensor) -> Tensor:
        out, cache = gbn_forward(self, x.data, track=self.track_running)
        self.last_zero_fraction = float(np.mean(out <= 0))

        def _bw(g):
            if cache.mode == "train":
                return gbn_backward(self, cache, g)
            return _frozen_backward(self, cache, g)

        return custom_op("gbn", out, (x, self.gamma, self.beta), _bw)


def gbn_forward(state: GbnState, x: np.ndarray, track: bool = True):
    """Normalize ``x`` (N×C or N×C×H×W); returns ``(output, cache)``.

    In training mode the running statistics are updated by EMA unless
    ``track`` is False.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ValueError(f"expected input with {state.channels} channels on axis 1, got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if np.isnan(x).any():
        raise ValueError("NaN in GBN input")
    rows = _to_rows(x).astype(np.float64)
    gamma = state.gamma.data.astype(np.float64)[:, None]
    beta = state.beta.data.astype(np.float64)[:, None]

    if state.mode == "train":
        if rows.shape[1] < 2:
            raise ValueError("training-mode GBN needs at least 2 values per channel")
        ev = evaluate_rows(state.spec, rows)
        denom = ev.d + state.epsilon
        xhat = (rows - ev.s[:, None]) / denom[:, None]
        if track:
            m = state.momentum
            state.running_s = (1.0 - m) * state.running_s + m * ev.s
            state.running_d = (1.0 - m) * state.running_d + m * ev.d
            state.batches_seen += 1
        cache = GbnCache("train", x.shape, xhat, denom, ev.s_grad, ev.d_grad)
    elif state.mode == "infer":
        if state.batches_seen == 0:
            raise StatisticsNotInitialized("GBN running statistics are uninitialized; train on a batch first")
        denom = state.running_d + state.epsilon
        xhat = (rows - state.running_s[:, None]) / denom[:, None]
        cache = GbnCache("infer", x.shape, xhat, denom)
    else:
        raise ModeError(f"unknown mode {state.mode!r}")

    out = gamma * xhat + beta
    return _from_rows(out, x.shape).astype(x.dtype if x.dtype.kind == "f" else np.float64), cache


def gbn_backward(state: GbnState, cache: GbnCache, upstream: np.ndarray):
    """Gradients ``(dx, dgamma, dbeta)`` for a training-mode forward.

    With g = upstream * gamma, per channel::

        dx = (g - sum(g) * dS/dx - sum(g * xhat) * dD/dx) / (D + eps)
    """
    if cache.mode != "train" or state.mode != "train":
        raise ModeError("gbn_backward needs a training-mode forward and a layer still in training mode")
    up = _to_rows(np.asarray(upstream, dtype=np.float64))
    xhat = cache.xhat
    g = up * state.gamma.data.astype(np.float64)[:, None]
    sum_g = g.sum(axis=1, keepdims=True)
    sum_gx = (g * xhat).sum(axis=1, keepdims=True)
    dx = (g - sum_g * cache.s_grad - sum_gx * cache.d_grad) / cache.denom[:, None]
    dgamma = (up * xhat).sum(axis=1)
    dbeta = up.sum(axis=1)
    return _from_rows(dx, cache.shape), dgamma, dbeta


def _frozen_backward(state: GbnState, cache: GbnCache, upstream: np.ndarray):
    # inference mode: S and D are constants
    up = _to_rows(np.asarray(upstream, dtype=np.float64))
    dx = up * (state.gamma.data.astype(np.float64) / cache.denom)[:, None]
    return _from_rows(dx, cache.shape), (up * cache.xhat).sum(axis=1), up.sum(axis=1)


def sparsity_fraction(state: GbnState, x) -> np.ndarray:
    """Per-channel fraction of zeros after GBN followed by ReLU.

    Uses batch statistics without touching the running averages. With a
    quantile statistic at level a, beta = 0 and gamma > 0, a channel sample
    of n distinct values yields exactly ceil(a n) / n.
    """
    if not state.spec.has_quantile_statistic:
        raise ValueError(f"{state.spec.name} has no quantile statistic; sparsity is not controlled")
    if state.mode != "train":
        raise ModeError("sparsity_fraction uses batch statistics; put the layer in training mode")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out, _ = gbn_forward(state, data, track=False)
    rows = _to_rows(np.maximum(out, 0.0))
    return (rows == 0.0).mean(axis=1)


def bpoe_equivalence_check(values):
    """Compare GBN-with-ReLU output mass against the tail form of bPOE.

    The probability level is set where the mean sits, a = #{x <= mean} / N.
    Returns ``(lhs, rhs, gap)`` with
    ``lhs = mean(relu((x - q_a) / (qbar_a - q_a)))`` and
    ``rhs = E[x - q_a]^+ / (qbar_a - q_a)``.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty sample")
    alpha = np.count_nonzero(x <= x.mean()) / x.size
    if alpha >= 1.0:
        raise risk.DegenerateTailError("no sample lies above the mean")
    q = risk.quantile(x, alpha)
    qbar = risk.superquantile(x, alpha)
    if not qbar > q:
        raise risk.DegenerateTailError("superquantile equals quantile at the mean level")
    lhs = float(np.mean(np.maximum((x - q) / (qbar - q), 0.0)))
    rhs = risk.bpoe_tail_form(x, alpha)
    return lhs, rhs, abs(lhs - rhs)
