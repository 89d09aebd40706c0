"""Deviation measures D(x) and their paired statistics S(x), with subgradients.

=====  =========================  =====================
name   D(x)                       S(x)
=====  =========================  =====================
sd     sqrt(E[(x - E x)^2])       E x
mad    E|x - E x|                 E x
rsd    E[x - E x]^+               E x
sqd    qbar_a(x - E x)            q_a(x)
rbd    sup x - inf x              (sup x + inf x) / 2
wcd    sup x - E x                sup x
=====  =========================  =====================

Expectations use population (1/N) weights. Gradients are taken with respect
to every sample value; ties are broken towards the lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .risk import tail_index

__all__ = [
    "KINDS",
    "PRESETS",
    "DeviationSpec",
    "DevEval",
    "parse_spec",
    "evaluate",
    "evaluate_rows",
]

KINDS = ("sd", "mad", "rsd", "sqd", "rbd", "wcd")


@dataclass(frozen=True)
class DeviationSpec:
    kind: str
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown deviation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "sqd":
            if self.alpha is None or not 0.0 < self.alpha < 1.0:
                raise ValueError(f"sqd needs alpha in (0, 1), got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"{self.kind} takes no alpha")

    @property
    def name(self) -> str:
        if self.kind != "sqd":
            return self.kind
        for key, spec in PRESETS.items():
            if spec == self:
                return key
        return f"sqd:{self.alpha:g}"

    @property
    def has_quantile_statistic(self) -> bool:
        return self.kind == "sqd"

    def __str__(self) -> str:
        return self.name


PRESETS = {
    "sd": DeviationSpec("sd"),
    "mad": DeviationSpec("mad"),
    "rsd": DeviationSpec("rsd"),
    "sqd1": DeviationSpec("sqd", 0.25),
    "sqd2": DeviationSpec("sqd", 0.5),
    "sqd3": DeviationSpec("sqd", 0.75),
    "rbd": DeviationSpec("rbd"),
    "wcd": DeviationSpec("wcd"),
}


def parse_spec(name) -> DeviationSpec:
    """Accept a preset name (``sd``, ``sqd2``, ...) or ``sqd:<alpha>``."""
    if isinstance(name, DeviationSpec):
        return name
    key = str(name).strip().lower()
    if key in PRESETS:
        return PRESETS[key]
    if key.startswith("sqd:"):
        try:
            alpha = float(key[4:])
        except ValueError:
            raise ValueError(f"bad sqd level in {name!r}") from None
        return DeviationSpec("sqd", alpha)
    raise ValueError(f"unknown deviation spec {name!r}; known: {', '.join(PRESETS)}")


@dataclass
class DevEval:
    d_value: float
    s_value: float
    d_grad: np.ndarray
    s_grad: np.ndarray


@dataclass
class RowsEval:
    """Row-wise results of :func:`evaluate_rows` (one row per channel)."""

    d: np.ndarray
    s: np.ndarray
    d_grad: np.ndarray
    s_grad: np.ndarray


def _indicator(shape, idx) -> np.ndarray:
    out = np.zeros(shape)
    out[np.arange(shape[0]), idx] = 1.0
    return out


def evaluate_rows(spec: DeviationSpec, x: np.ndarray) -> RowsEval:
    """Evaluate ``spec`` independently on each row of a 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError(f"expected a non-empty (rows, samples) array, got shape {x.shape}")
    c, n = x.shape
    mu = x.mean(axis=1, keepdims=True)
    dev = x - mu
    uniform = np.full((c, n), 1.0 / n)
    kind = spec.kind

    if kind == "sd":
        sd = np.sqrt((dev**2).mean(axis=1))
        safe = np.where(sd > 0, sd, 1.0)
        d_grad = np.where((sd > 0)[:, None], dev / (n * safe[:, None]), 0.0)
        return RowsEval(sd, mu[:, 0], d_grad, uniform)

    if kind == "mad":
        sg = np.sign(dev)
        d_grad = (sg - sg.mean(axis=1, keepdims=True)) / n
        return RowsEval(np.abs(dev).mean(axis=1), mu[:, 0], d_grad, uniform)

    if kind == "rsd":
        ind = (x > mu).astype(np.float64)
        d_grad = (ind - ind.mean(axis=1, keepdims=True)) / n
        return RowsEval(np.maximum(dev, 0.0).mean(axis=1), mu[:, 0], d_grad, uniform)

    if kind == "sqd":
        alpha = spec.alpha
        m = tail_index(alpha, n)
        pos = max(m, 1) - 1
        order = np.argsort(x, axis=1, kind="stable")
        rows = np.arange(c)
        xs = np.take_along_axis(x, order, axis=1)
        q = xs[:, pos]
        # statistic subgradient: first occurrence (in sorted order) of the quantile value
        first = (xs < q[:, None]).sum(axis=1)
        s_grad = _indicator((c, n), order[rows, first])
        qc = q - mu[:, 0]
        d = qc + np.maximum(dev - qc[:, None], 0.0).mean(axis=1) / (1.0 - alpha)
        per = 1.0 / (n * (1.0 - alpha))
        w_sorted = np.zeros((c, n))
        w_sorted[:, m:] = per
        if m > 0:
            w_sorted[:, m - 1] = max(0.0, 1.0 - (n - m) * per)
        w = np.empty((c, n))
        np.put_along_axis(w, order, w_sorted, axis=1)
        return RowsEval(np.maximum(d, 0.0), q, w - 1.0 / n, s_grad)

    if kind == "rbd":
        hi, lo = np.argmax(x, axis=1), np.argmin(x, axis=1)
        rows = np.arange(c)
        top, bot = x[rows, hi], x[rows, lo]
        d_grad = _indicator((c, n), hi) - _indicator((c, n), lo)
        s_grad = 0.5 * (_indicator((c, n), hi) + _indicator((c, n), lo))
        return RowsEval(top - bot, 0.5 * (top + bot), d_grad, s_grad)

    if kind == "wcd":
        hi = np.argmax(x, axis=1)
        top = x[np.arange(c), hi]
        ind = _indicator((c, n), hi)
        return RowsEval(np.maximum(top - mu[:, 0], 0.0), top, ind - 1.0 / n, ind)

    raise AssertionError(kind)


def evaluate(spec, values) -> DevEval:
    """D and S of a single sample, with their gradients w.r.t. each value.

    Constant samples give ``d_value == 0`` for every kind; guarding the
    division is the caller's job.
    """
    spec = parse_spec(spec)
    x = np.asarray(values, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("sample contains non-finite values")
    r = evaluate_rows(spec, x)
    return DevEval(float(r.d[0]), float(r.s[0]), r.d_grad[0], r.s_grad[0])
