"""Empirical quantile, superquantile (CVaR) and bPOE on equally weighted samples.

All functions take a 1-D array-like of finite reals. Ties are resolved with a
stable sort, so equal values keep their original order.

The ``*_grid`` functions minimise the defining optimisation problems by dense
grid search and are meant as slow, independent references for testing.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DegenerateTailError",
    "tail_index",
    "quantile",
    "quantile_weights",
    "superquantile",
    "superquantile_tail_weights",
    "bpoe",
    "bpoe_tail_form",
    "superquantile_grid",
    "bpoe_grid",
    "bpoe_a_form_grid",
]


class DegenerateTailError(ValueError):
    """The upper tail beyond the quantile carries no spread (superquantile == quantile)."""


def _sample(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample contains non-finite values")
    return x


def _check_alpha(alpha: float, upper_open: bool = False) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if upper_open and alpha >= 1.0:
        raise ValueError(f"alpha must be < 1 for the superquantile, got {alpha}")


def tail_index(alpha: float, n: int) -> int:
    """m = ceil(alpha * n), ignoring float noise when alpha * n is integral."""
    k = alpha * n
    r = round(k)
    if abs(k - r) <= 1e-9 * max(1, n):
        return int(r)
    return math.ceil(k)


def _quantile_position(alpha: float, n: int) -> int:
    # 0-based sorted position of the lower quantile; alpha == 0 gives the minimum
    return max(tail_index(alpha, n), 1) - 1


def quantile(values, alpha: float) -> float:
    """Lower empirical quantile min{z : P(x <= z) >= alpha}."""
    x = _sample(values)
    _check_alpha(alpha)
    xs = np.sort(x, kind="stable")
    return float(xs[_quantile_position(alpha, x.size)])


def quantile_weights(values, alpha: float) -> np.ndarray:
    """Subgradient of :func:`quantile`: 1 on the selected element, 0 elsewhere.

    Among equal values the one with the lowest original index is selected.
    """
    x = _sample(values)
    _check_alpha(alpha)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    pos = _quantile_position(alpha, x.size)
    first = int(np.searchsorted(xs, xs[pos], side="left"))
    w = np.zeros_like(x)
    w[order[first]] = 1.0
    return w


def superquantile(values, alpha: float) -> float:
    """CVaR via min_g g + E[x - g]^+ / (1 - alpha), evaluated at g = q_alpha."""
    x = _sample(values)
    _check_alpha(alpha, upper_open=True)
    q = quantile(x, alpha)
    return float(q + np.maximum(x - q, 0.0).mean() / (1.0 - alpha))


def superquantile_tail_weights(values, alpha: float) -> np.ndarray:
    """Nonnegative weights summing to one with ``weights @ values == superquantile``.

    With m = ceil(alpha N), every sorted position above m carries
    1 / (N (1 - alpha)); position m carries the remaining mass.
    """
    x = _sample(values)
    _check_alpha(alpha, upper_open=True)
    n = x.size
    m = tail_index(alpha, n)
    order = np.argsort(x, kind="stable")
    per = 1.0 / (n * (1.0 - alpha))
    w_sorted = np.zeros(n)
    w_sorted[m:] = per
    if m > 0:
        w_sorted[m - 1] = max(0.0, 1.0 - (n - m) * per)
    w = np.empty(n)
    w[order] = w_sorted
    return w


def bpoe(values, z: float) -> float:
    """Buffered probability of exceedance of threshold ``z``.

    Minimises E[x - g]^+ / (z - g) over g < z. The objective is linear-
    fractional between sample points, so only sample points below ``z`` and
    the limits g -> -inf (value 1) and g -> z- need checking.
    """
    x = _sample(values)
    n = x.size
    xs = np.sort(x)
    top = xs[-1]
    if z > top:
        return 0.0
    if z == top:
        # g -> z-: only the atom at the maximum survives
        return float(np.count_nonzero(xs == top)) / n
    if z <= xs.mean():
        return 1.0
    below = xs[xs < z]
    suffix = np.cumsum(xs[::-1])[::-1]  # suffix[k] = sum_{j >= k} xs[j]
    k = np.arange(below.size)
    excess = (suffix[k] - (n - k) * below) / n
    with np.errstate(over="ignore"):  # z a hair above a point: ratio -> +inf, harmless for the min
        ratio = excess / (z - below)
    return float(min(1.0, np.min(ratio)))


def bpoe_tail_form(values, alpha: float) -> float:
    """E[x - q_alpha]^+ / (qbar_alpha - q_alpha); equals bpoe at z = qbar_alpha."""
    x = _sample(values)
    if alpha >= 1.0:
        raise DegenerateTailError("alpha = 1 leaves no upper tail")
    q = quantile(x, alpha)
    qbar = superquantile(x, alpha)
    if not qbar > q:
        raise DegenerateTailError(f"superquantile equals quantile ({q}); tail is constant")
    return float(np.maximum(x - q, 0.0).mean() / (qbar - q))


def _zoom_min(f, lo: float, hi: float, points: int, rounds: int, include_hi: bool = True) -> float:
    best = np.inf
    upper = hi
    for _ in range(rounds):
        grid = np.linspace(lo, hi, points, endpoint=include_hi)
        vals = f(grid)
        i = int(np.argmin(vals))
        best = min(best, float(vals[i]))
        step = grid[1] - grid[0]
        lo, hi = grid[i] - step, grid[i] + step
        if not include_hi:
            hi = min(hi, upper)
    return best


def superquantile_grid(values, alpha: float, points: int = 10_000, rounds: int = 4) -> float:
    """Brute-force superquantile: grid-minimise g + E[x - g]^+/(1 - alpha) over [min-1, max+1].

    Each round re-grids around the best point; the objective is convex, so
    the bracket always contains the minimiser.
    """
    x = _sample(values)
    _check_alpha(alpha, upper_open=True)

    def f(g):
        return g + np.maximum(x[None, :] - g[:, None], 0.0).mean(axis=1) / (1.0 - alpha)

    return _zoom_min(f, x.min() - 1.0, x.max() + 1.0, points, rounds)


def bpoe_grid(values, z: float, points: int = 10_000, rounds: int = 4, span: float = 10.0) -> float:
    """Brute-force bpoe: grid-minimise E[x - g]^+ / (z - g) over g in [min - span, z)."""
    x = _sample(values)
    lo = min(x.min(), z) - span

    def f(g):
        return np.maximum(x[None, :] - g[:, None], 0.0).mean(axis=1) / (z - g)

    return min(1.0, _zoom_min(f, lo, z, points, rounds, include_hi=False))


def bpoe_a_form_grid(values, z: float, points: int = 10_000, rounds: int = 4, a_max: float = 1e6) -> float:
    """Brute-force bpoe through min_{a >= 0} E[a (x - z) + 1]^+ (convex in a).

    The first round grids log-spaced a so that both tiny and huge slopes are
    covered; later rounds zoom linearly around the best a.
    """
    x = _sample(values)

    def f(a):
        return np.maximum(a[:, None] * (x[None, :] - z) + 1.0, 0.0).mean(axis=1)

    a0 = np.concatenate([[0.0], np.logspace(-8, np.log10(a_max), points - 1)])
    v0 = f(a0)
    i = int(np.argmin(v0))
    best = float(v0[i])
    lo, hi = a0[max(i - 1, 0)], a0[min(i + 1, a0.size - 1)]
    return min(best, _zoom_min(f, lo, hi, points, rounds))
