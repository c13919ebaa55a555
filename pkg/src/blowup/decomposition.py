"""Cut-off splitting, Hermite-mode expansion and the shrinking set.

A field ``r`` is split as ``r = chi r + (1 - chi) r = r_b + r_e`` with
``chi(y, s) = chi0(|y| / (K sqrt s))``, and the inner part as
``r_b = q0 + q1 y + q2 h2(y) + q_minus`` on ``|y| <= 2 K sqrt s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Field
from .spectral import QuadratureOverflow, grid_rule, hermite_norm_sq, hermite_poly

MEMBERSHIP_COLUMNS = [
    "s", "q0", "q1", "q2", "norm_minus", "norm_e",
    "margin_q0", "margin_q1", "margin_q2", "margin_minus", "margin_e",
    "aggregate_bound", "in_set",
]
COMPONENTS = ("q0", "q1", "q2", "q_minus", "q_e")


def chi0(xi):
    """C^2 cut-off: 1 on [0, 1], quintic smoothstep down to 0 on [1, 2]."""
    xi = np.abs(np.asarray(xi, dtype=float))
    t = np.clip(xi - 1.0, 0.0, 1.0)
    val = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t)
    return float(val) if val.ndim == 0 else val


def cutoff_chi(y, s: float, K: float):
    if s <= 0 or K <= 0:
        raise ValueError("cut-off needs s > 0 and K > 0")
    return chi0(np.abs(np.asarray(y, dtype=float)) / (K * math.sqrt(s)))


def project(r_b: Field, beta: int, s: float | None = None) -> float:
    """Coefficient of ``h_beta`` in ``r_b``: ``int r_b h_beta rho / ||h_beta||^2``.

    ``r_b`` should already be cut off; ``s`` is accepted for symmetry with
    :func:`decompose` and does not enter the integral.
    """
    rule = grid_rule(r_b.grid)
    integrand = np.asarray(r_b.values) * hermite_poly(beta, r_b.nodes)
    total = np.sum(rule.weights * integrand)
    if not np.isfinite(total):
        raise QuadratureOverflow(f"projection on h_{beta} is not finite")
    return float(total) / hermite_norm_sq(beta)


@dataclass(frozen=True)
class ModeDecomposition:
    """The five components of a field at cut-off time ``s``.

    ``q2`` is the coefficient of ``h2(y) = y^2 - 2`` (the 1-D form of
    ``y^T q2 y - 2 tr q2``).
    """

    q0: float
    q1: float
    q2: float
    q_minus: Field
    q_e: Field
    s: float
    K: float

    def inner_mask(self) -> np.ndarray:
        return np.abs(self.q_minus.nodes) <= 2.0 * self.K * math.sqrt(self.s)

    def norm_minus(self) -> float:
        """``max_j |q_minus(y_j)| / (1 + |y_j|^3)`` over grid nodes."""
        y = self.q_minus.nodes
        return float(np.max(np.abs(self.q_minus.values) / (1.0 + np.abs(y) ** 3)))

    def norm_e(self) -> float:
        return self.q_e.sup()


def decompose(r: Field, s: float, K: float) -> ModeDecomposition:
    """Split ``r`` into ``(q0, q1, q2, q_minus, q_e)`` at cut-off time ``s``."""
    if r.frame != "y":
        raise ValueError("decompose expects a similarity-frame field")
    y = r.nodes
    vals = np.asarray(r.values)
    chi = cutoff_chi(y, s, K)
    r_b = r.with_values(chi * vals)
    q_e = vals - chi * vals
    q0 = project(r_b, 0)
    q1 = project(r_b, 1)
    q2 = project(r_b, 2)
    inner = np.abs(y) <= 2.0 * K * math.sqrt(s)
    poly = q0 + q1 * y + q2 * (y * y - 2.0)
    q_minus = np.where(inner, r_b.values - poly, 0.0)
    return ModeDecomposition(q0, q1, q2, r.with_values(q_minus), r.with_values(q_e), s, K)


def reconstruct(dec: ModeDecomposition) -> Field:
    y = dec.q_minus.nodes
    poly = dec.q0 + dec.q1 * y + dec.q2 * (y * y - 2.0)
    vals = np.where(dec.inner_mask(), poly + dec.q_minus.values, 0.0) + dec.q_e.values
    return dec.q_minus.with_values(vals)


@dataclass(frozen=True)
class ShrinkingParams:
    K: float = 10.0
    A: float = 50.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.A < 1:
            raise ValueError(f"A must be >= 1, got {self.A}")

    def bounds(self, s: float) -> dict:
        if s <= 1:
            raise ValueError("shrinking-set bounds need s > 1")
        A, ln = self.A, math.log(s)
        return {
            "q0": A / s**2,
            "q1": A / s**2,
            "q2": A**2 * ln / s**2,
            "q_minus": A**6 * ln / s**2.5,
            "q_e": A**7 * ln / s,
        }

    def envelope(self, s: float) -> float:
        """Sup-norm bound on any ``q`` in the set, from the component bounds.

        Maximizes ``|q0| + |q1||y| + |q2||h2| + bound_minus (1 + |y|^3)`` over
        ``|y| <= 2 K sqrt s`` and adds the outer bound.
        """
        bd = self.bounds(s)
        ymax = 2.0 * self.K * math.sqrt(s)
        inner = (bd["q0"] + bd["q1"] * ymax + bd["q2"] * max(2.0, ymax**2 - 2.0)
                 + bd["q_minus"] * (1.0 + ymax**3))
        return inner + bd["q_e"]

    def to_dict(self) -> dict:
        return {"K": self.K, "A": self.A}


@dataclass(frozen=True)
class MembershipReport:
    s: float
    measured: dict
    bounds: dict
    aggregate_bound: float

    @property
    def margins(self) -> dict:
        return {k: self.bounds[k] - abs(self.measured[k]) for k in COMPONENTS}

    @property
    def in_set(self) -> bool:
        return all(m >= 0 for m in self.margins.values())

    @property
    def violations(self) -> list:
        return [k for k, m in self.margins.items() if m < 0]

    def row(self) -> list:
        m, g = self.measured, self.margins
        return [self.s, m["q0"], m["q1"], m["q2"], m["q_minus"], m["q_e"],
                g["q0"], g["q1"], g["q2"], g["q_minus"], g["q_e"],
                self.aggregate_bound, int(self.in_set)]


def shrinking_check(dec: ModeDecomposition, s: float, params: ShrinkingParams) -> MembershipReport:
    measured = {
        "q0": dec.q0,
        "q1": dec.q1,
        "q2": dec.q2,
        "q_minus": dec.norm_minus(),
        "q_e": dec.norm_e(),
    }
    return MembershipReport(s, measured, params.bounds(s), params.envelope(s))


def zero_decomposition(grid, s: float, K: float) -> ModeDecomposition:
    zero = Field(np.zeros(grid.n_points), grid, "y", s)
    return ModeDecomposition(0.0, 0.0, 0.0, zero, zero, s, K)
