"""Analytical oracles: the detection-accuracy lower bound and its feasibility
constraints, the single-class utility optimum on a fitted load curve, and the
training-complexity formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BoundParams:
    n_users: int
    n_antennas: int
    phi: float
    theta_sep: float = 1.0
    a1: float = 1.0
    a2: float = 1.0

    def __post_init__(self):
        if self.n_users < 2:
            raise ValueError("n_users must be >= 2")
        if self.phi <= 2.0:
            raise ValueError("phi must exceed 2")
        if self.a1 < 0 or self.a2 <= 0:
            raise ValueError(
                "a1 must be non-negative and a2 positive"
            )

    @property
    def eta(self) -> float:
        """Compressive measurement ratio M / N."""
        return self.n_antennas / self.n_users


def epsilon_n(params: BoundParams) -> float:
    """Regularization level sqrt(2 phi log N / (eta N))."""
    n = params.n_users
    return math.sqrt(2.0 * params.phi * math.log(n) / (params.eta * n))


@dataclass(frozen=True)
class MaxSparsityResult:
    value: float
    feasible: bool
    lower_bound: float
    residual: float


def _sparsity_residual(x: float, params: BoundParams, eps: float) -> float:
    return (
        2.0 * (x + 1.0 / eps**2) * math.log(params.n_users - x)
        - params.n_antennas
    )


def max_sparsity(params: BoundParams, grid_points: int = 4096) -> MaxSparsityResult:
    """Largest tolerable sparsity: the root of
    M = 2 (k + 1/eps^2) log(N - k), found by bisection after a sign-change
    scan, then checked against the eta N (1 - 1/phi) / (2 log N) lower bound.
    """
    eps = epsilon_n(params)
    hi = min(params.n_antennas, params.n_users - 1) - 1e-9
    xs = np.linspace(0.0, hi, grid_points)
    vals = np.array([_sparsity_residual(x, params, eps) for x in xs])
    sign_change = np.flatnonzero(np.diff(np.sign(vals)) != 0)
    lower_bound = (
        params.eta
        * params.n_users
        * (1.0 - 1.0 / params.phi)
        / (2.0 * math.log(params.n_users))
    )
    if sign_change.size == 0:
        return MaxSparsityResult(float("nan"), False, lower_bound, float("nan"))
    lo, up = xs[sign_change[0]], xs[sign_change[0] + 1]
    for _ in range(200):
        mid = 0.5 * (lo + up)
        if _sparsity_residual(lo, params, eps) * _sparsity_residual(
            mid, params, eps
        ) <= 0:
            up = mid
        else:
            lo = mid
        if up - lo < 1e-13:
            break
    root = float(0.5 * (lo + up))
    residual = _sparsity_residual(root, params, eps)
    return MaxSparsityResult(root, bool(root >= lower_bound), lower_bound, residual)


def theorem1_bound(sparsity: float, params: BoundParams) -> float:
    """Accuracy lower bound 1 - a1 exp(-a2 min(k, log(N - k))), clamped to [0,1]."""
    if not 0.0 <= sparsity < params.n_users:
        raise ValueError("sparsity must lie in [0, N)")
    inner = min(sparsity, math.log(params.n_users - sparsity))
    value = 1.0 - params.a1 * math.exp(-params.a2 * inner)
    return min(1.0, max(0.0, value))


def fit_bound_constants(
    sparsities: Sequence[float], accuracies: Sequence[float], n_users: int
) -> tuple:
    """Least-squares fit of (a1, a2) on log(1 - c) = log a1 - a2 * m(k), then
    a1 is inflated so the bound envelopes every sample from below."""
    ks = np.asarray(sparsities, dtype=float)
    cs = np.clip(np.asarray(accuracies, dtype=float), 0.0, 1.0 - 1e-12)
    m = np.minimum(ks, np.log(n_users - ks))
    rhs = np.log(1.0 - cs)
    design = np.column_stack([np.ones_like(m), -m])
    coef, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    a1 = math.exp(coef[0])
    a2 = max(coef[1], 1e-12)
    a1 = max(a1, float(np.max((1.0 - cs) * np.exp(a2 * m))))
    return a1, a2


def _pava_decreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto non-increasing sequences."""
    values = list(-np.asarray(y, dtype=float))
    weights = [1.0] * len(values)
    sizes = [1] * len(values)
    i = 0
    while i < len(values) - 1:
        if values[i] > values[i + 1] + 1e-15:
            merged_w = weights[i] + weights[i + 1]
            merged_v = (
                values[i] * weights[i] + values[i + 1] * weights[i + 1]
            ) / merged_w
            values[i : i + 2] = [merged_v]
            weights[i : i + 2] = [merged_w]
            sizes[i : i + 2] = [sizes[i] + sizes[i + 1]]
            i = max(i - 1, 0)
        else:
            i += 1
    return -np.repeat(values, sizes)


def _concave_majorant(x: np.ndarray, y: np.ndarray):
    """Upper concave hull vertices of the sample points."""
    hull_x = [x[0]]
    hull_y = [y[0]]
    for xi, yi in zip(x[1:], y[1:]):
        while len(hull_x) >= 2:
            slope_new = (yi - hull_y[-1]) / (xi - hull_x[-1])
            slope_old = (hull_y[-1] - hull_y[-2]) / (hull_x[-1] - hull_x[-2])
            if slope_new > slope_old + 1e-15:
                hull_x.pop()
                hull_y.pop()
            else:
                break
        hull_x.append(xi)
        hull_y.append(yi)
    return np.array(hull_x), np.array(hull_y)


@dataclass(frozen=True)
class LoadCurve:
    """Non-increasing, weakly concave interpolant of accuracy vs permitted load."""

    loads: np.ndarray
    accuracies: np.ndarray

    @classmethod
    def fit(cls, loads: Sequence[float], accuracies: Sequence[float]) -> "LoadCurve":
        """Monotone-decreasing isotonic smoothing followed by the concave
        majorant, so the interpolant satisfies the shape assumptions."""
        order = np.argsort(loads)
        x = np.asarray(loads, dtype=float)[order]
        y = np.asarray(accuracies, dtype=float)[order]
        if x.size < 2:
            raise ValueError("need at least two samples")
        if np.any(np.diff(x) <= 0):
            raise ValueError("loads must be distinct")
        y = _pava_decreasing(y)
        hx, hy = _concave_majorant(x, y)
        return cls(hx, hy)

    def __call__(self, load) -> np.ndarray:
        return np.interp(load, self.loads, self.accuracies)

    def validate(self) -> None:
        if np.any(np.diff(self.accuracies) > 1e-12):
            raise ValueError("load curve is not non-increasing")
        slopes = np.diff(self.accuracies) / np.diff(self.loads)
        if np.any(np.diff(slopes) > 1e-9):
            raise ValueError("load curve is not concave")


def theorem2_optimum(
    curve: Union[LoadCurve, Callable[[float], float]],
    r: float,
    n: int,
    rho2: float,
) -> tuple:
    """Maximize u(p) = f(p) (p r N + rho2) - rho2 over p in [0, 1], where
    f(p) is the load curve evaluated at the permitted load p * N.

    A coarse grid locates the bracket and golden-section search refines the
    maximizer to 1e-6.
    """
    if isinstance(curve, LoadCurve):
        curve.validate()
        f = lambda p: float(curve(p * n))
    else:
        f = lambda p: float(curve(p * n))
        grid = np.linspace(0.0, 1.0, 257)
        vals = np.array([f(p) for p in grid])
        if np.any(np.diff(vals) > 1e-9):
            raise ValueError("curve is not non-increasing on [0, 1]")
        if np.any(np.diff(np.diff(vals)) > 1e-6):
            raise ValueError("curve is not concave on [0, 1]")

    def u(p: float) -> float:
        return f(p) * (p * r * n + rho2) - rho2

    grid = np.linspace(0.0, 1.0, 1001)
    values = np.array([u(p) for p in grid])
    i = int(np.argmax(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    while b - a > 1e-7:
        if u(c) >= u(d):
            b = d
        else:
            a = c
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
    p_star = 0.5 * (a + b)
    if values[i] > u(p_star):
        p_star = float(grid[i])
    return float(p_star), float(u(p_star))


@dataclass(frozen=True)
class ComplexityReport:
    total: int
    threshold: Optional[float]
    valid: Optional[bool]


def rl_complexity(
    tau: int,
    xi: int,
    table_states: Optional[int] = None,
    table_actions: Optional[int] = None,
) -> ComplexityReport:
    """Dominating slot count tau * xi; when the table dimensions are supplied
    the validity condition is checked against the product of the three roots
    of the monic cubic (the stated polynomial's constant-term magnitude)."""
    if tau < 1 or xi < 1:
        raise ValueError("tau and xi must be positive")
    total = tau * xi
    if table_states is None or table_actions is None:
        return ComplexityReport(total, None, None)
    threshold = float(table_states) * float(table_actions) * float(tau)
    return ComplexityReport(total, threshold, total > threshold)


def drl_flops(
    tau: int, xi: int, in_channels: int, input_width: int, out_channels: int,
    kernel: int, stride: int,
) -> int:
    """Training FLOPs of the conv-dominated architecture over tau * xi slots."""
    wo = (input_width - kernel) // stride + 1
    if (input_width - kernel) % stride != 0 or wo < 1:
        raise ValueError("kernel/stride do not tile the input width")
    return tau * xi * in_channels * input_width**2 * out_channels * wo**2
