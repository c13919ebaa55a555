"""Hermite eigenbasis of ``L = d2/dy2 - (y/2) d/dy + 1`` in ``L^2_rho``.

The weight is ``rho(y) = exp(-y^2/4) / sqrt(4 pi)``, a probability density,
and ``L h_m = (1 - m/2) h_m`` for the rescaled Hermite polynomials ``h_m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .grid import Field, GridSpec

__all__ = [
    "QuadratureOverflow",
    "QuadratureRule",
    "hermite_poly",
    "eigenvalue",
    "rho",
    "gauss_hermite_rule",
    "grid_rule",
    "weighted_integral",
    "hermite_norm_sq",
    "semigroup_apply",
]

_LD = np.longdouble


class QuadratureOverflow(ArithmeticError):
    """A weighted integral produced a non-finite value."""


def hermite_poly(ell: int, xi):
    """Evaluate ``h_ell(xi) = sum_j (-1)^j ell!/(j!(ell-2j)!) xi^(ell-2j)``.

    Uses the equivalent three-term recurrence ``h_{k+1} = xi h_k - 2k h_{k-1}``,
    which is better conditioned than the power sum. Scalars in, scalars out.
    """
    if ell < 0:
        raise ValueError(f"ell must be nonnegative, got {ell}")
    x = np.asarray(xi)
    prev = np.ones_like(x, dtype=np.result_type(x, float))
    if ell == 0:
        out = prev
    else:
        cur = x * prev
        for k in range(1, ell):
            prev, cur = cur, x * cur - 2 * k * prev
        out = cur
    return out.item() if np.ndim(out) == 0 else out


def eigenvalue(m: int) -> float:
    """Eigenvalue ``1 - m/2`` of ``L`` on polynomials of total degree ``m``."""
    if m < 0:
        raise ValueError(f"m must be nonnegative, got {m}")
    return 1.0 - m / 2.0


def rho(y):
    return np.exp(-np.square(y) / 4.0) / math.sqrt(4.0 * math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Discrete approximation ``sum_i w_i f(y_i)`` of ``int f rho dy``.

    ``degree`` is the largest polynomial degree integrated exactly. Nodes and
    weights may be long double; callables are then evaluated in that precision.
    """

    nodes: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        if len(self.nodes) != len(self.weights):
            raise ValueError("nodes and weights differ in length")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")


def _orthonormal_hermite_pair(n: int, x: np.ndarray):
    # orthonormal Hermite functions for weight exp(-x^2): returns (psi_n, psi_{n-1})
    prev = np.full_like(x, _LD(math.pi) ** _LD(-0.25))
    cur = np.sqrt(_LD(2)) * x * prev
    for k in range(1, n):
        prev, cur = cur, np.sqrt(_LD(2) / (k + 1)) * x * cur - np.sqrt(_LD(k) / (k + 1)) * prev
    return cur, prev


@lru_cache(maxsize=8)
def gauss_hermite_rule(n: int = 64) -> QuadratureRule:
    """Gauss rule for ``rho``: ``n`` nodes, exact through degree ``2n - 1``.

    Starts from numpy's float64 nodes for ``exp(-x^2)``, polishes them by
    Newton iteration in long double, and maps ``y = 2x`` (so that
    ``exp(-x^2) = exp(-y^2/4)``).
    """
    if n < 1:
        raise ValueError("need at least one node")
    x = np.polynomial.hermite.hermgauss(n)[0].astype(_LD)
    for _ in range(6):
        pn, pn1 = _orthonormal_hermite_pair(n, x)
        x = x - pn / (np.sqrt(_LD(2 * n)) * pn1 - x * pn)
    _, pn1 = _orthonormal_hermite_pair(n, x)
    w = _LD(1) / (n * pn1 * pn1)
    w = w / np.sum(w)
    y = 2 * x
    y.flags.writeable = False
    w.flags.writeable = False
    return QuadratureRule(y, w, 2 * n - 1)


def _moment(k: int) -> float:
    # E[y^k] for y ~ N(0, 2)
    if k % 2:
        return 0.0
    return float(math.factorial(k) / math.factorial(k // 2))


@lru_cache(maxsize=32)
def grid_rule(grid: GridSpec) -> QuadratureRule:
    """Trapezoid rule with weights ``h rho(y_j)`` on the nodes of ``grid``.

    The degree is measured: the largest even power whose moment is reproduced
    to relative accuracy 1e-12 (capped at 60).
    """
    y = grid.nodes
    w = grid.h * rho(y)
    w[0] *= 0.5
    w[-1] *= 0.5
    keep = w > 0
    degree = -1
    for k in range(0, 61, 2):
        approx = float(np.sum(w * y**k))
        if abs(approx - _moment(k)) > 1e-12 * _moment(k):
            break
        degree = k + 1
    # zero-weight nodes far in the tails are kept as exact zeros
    w = np.where(keep, w, 0.0)
    return _GridRule(y, w, degree, grid)


@dataclass(frozen=True)
class _GridRule(QuadratureRule):
    grid: GridSpec = None

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("quadrature weights must be nonnegative")


def weighted_integral(f, rule: QuadratureRule | None = None) -> float:
    """Approximate ``int f(y) rho(y) dy``.

    ``f`` may be a :class:`Field` (integrated with the trapezoid rule of its
    grid), a callable (evaluated at the nodes of ``rule``, Gauss-Hermite with
    64 nodes by default), or an array already sampled at ``rule.nodes``.
    """
    if isinstance(f, Field):
        if f.frame != "y":
            raise ValueError("weighted integrals are taken in similarity variables")
        rule = grid_rule(f.grid)
        vals = f.values
    elif callable(f):
        rule = rule or gauss_hermite_rule()
        vals = f(rule.nodes)
    else:
        if rule is None:
            raise ValueError("sampled values need an explicit rule")
        vals = np.asarray(f)
        if vals.shape != rule.weights.shape:
            raise ValueError("sample count does not match the rule")
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(rule.weights * vals)
    if not np.isfinite(total):
        raise QuadratureOverflow("weighted integral is not finite")
    return float(total)


def hermite_norm_sq(ell: int) -> float:
    """``||h_ell||^2`` in ``L^2_rho``, equal to ``2^ell ell!``.

    The closed form is checked against Gauss-Hermite quadrature in the tests.
    """
    if ell < 0:
        raise ValueError(f"ell must be nonnegative, got {ell}")
    return float(2**ell * math.factorial(ell))


def semigroup_apply(theta: float, f: Field, truncation: float = 8.0) -> Field:
    """Exact semigroup ``exp(theta L) f`` through its Gaussian kernel.

    ``(exp(theta L) f)(y) = e^theta E[f(y e^{-theta/2} + sigma Z)]`` with
    ``sigma^2 = 2(1 - e^{-theta})``. The expectation is a trapezoid sum over the
    grid nodes within ``truncation`` standard deviations; beyond the grid ``f``
    is continued by its edge values, whose Gaussian tail mass is added exactly.
    """
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    if f.frame != "y":
        raise ValueError("the semigroup acts in similarity variables")
    z = f.grid.nodes
    h = f.grid.h
    vals = np.asarray(f.values)
    n = len(z)
    sigma = math.sqrt(2.0 * (1.0 - math.exp(-theta)))
    centers = z * math.exp(-theta / 2.0)

    tw = np.full(n, h)
    tw[0] = tw[-1] = 0.5 * h
    half_width = int(math.ceil(truncation * sigma / h))
    width = 2 * half_width + 1
    out = np.empty(n)
    norm = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    chunk = max(1, 4_000_000 // width)
    for start in range(0, n, chunk):
        c = centers[start:start + chunk]
        mid = np.rint((c - z[0]) / h).astype(int)
        idx = mid[:, None] + np.arange(-half_width, half_width + 1)[None, :]
        inside = (idx >= 0) & (idx < n)
        idx_c = np.clip(idx, 0, n - 1)
        d = z[idx_c] - c[:, None]
        kern = norm * np.exp(-0.5 * (d / sigma) ** 2) * tw[idx_c]
        kern[~inside | (np.abs(d) > truncation * sigma)] = 0.0
        acc = np.sum(kern * vals[idx_c], axis=1)
        acc += vals[0] * ndtr((z[0] - c) / sigma)
        acc += vals[-1] * ndtr((c - z[-1]) / sigma)
        out[start:start + chunk] = acc
    return f.with_values(math.exp(theta) * out, time=f.time + theta)
