"""Closed-form ingredients of the linearization around the blow-up profile.

With ``a = p - 1``, ``b = a^2/(4p)`` and ``kappa = a^(-1/a)`` the approximate
profile in similarity variables is

    phi(y, s) = (a + b y^2/s)^(-1/a) + kappa N / (2 p s),

and ``q = w - phi`` obeys ``q_s = (L + V) q + B(q) + R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .grid import Field, GridSpec


@dataclass(frozen=True)
class Params:
    p: float = 3.0
    N: int = 1

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"nonlinearity exponent p must satisfy p > 1, got {self.p}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"dimension N must be a positive integer, got {self.N}")

    @property
    def b(self) -> float:
        return (self.p - 1.0) ** 2 / (4.0 * self.p)

    @property
    def kappa(self) -> float:
        return (self.p - 1.0) ** (-1.0 / (self.p - 1.0))

    def to_dict(self) -> dict:
        return {"p": self.p, "N": self.N}


def _check_s(s):
    if np.any(np.asarray(s) <= 1):
        raise ValueError("profile quantities need s > 1")


def profile_phi0(z, params: Params):
    """Intermediate profile ``phi0(z) = (p-1 + b z^2)^(-1/(p-1))`` and its derivative."""
    a = params.p - 1.0
    z = np.asarray(z, dtype=float)
    base = a + params.b * z * z
    value = base ** (-1.0 / a)
    grad = -(2.0 * params.b * z / a) * base ** (-params.p / a)
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def profile_phi(y, s, params: Params):
    _check_s(s)
    a = params.p - 1.0
    y = np.asarray(y, dtype=float)
    val = (a + params.b * y * y / s) ** (-1.0 / a) + params.kappa * params.N / (2.0 * params.p * s)
    return float(val) if val.ndim == 0 else val


def profile_phi_derivatives(y, s, params: Params):
    """Return ``(phi, d_s phi, d_r phi, laplacian phi)`` for radial ``|y|``.

    Hand-derived; the finite-difference consistency test in the suite guards them.
    """
    _check_s(s)
    p, N, b = params.p, params.N, params.b
    a = p - 1.0
    r = np.abs(np.asarray(y, dtype=float))
    theta = a + b * r * r / s
    t_p = theta ** (-p / a)
    c = params.kappa * N / (2.0 * p * s)
    phi = theta ** (-1.0 / a) + c
    phi_s = (b * r * r / (a * s * s)) * t_p - c / s
    phi_r = -(2.0 * b * r / (a * s)) * t_p
    lap = -(2.0 * b * N / (a * s)) * t_p + (4.0 * p * b * b * r * r / (a * a * s * s)) * t_p / theta
    return phi, phi_s, phi_r, lap


def potential_V(y, s, params: Params):
    phi = profile_phi(y, s, params)
    p = params.p
    return p * (np.power(phi, p - 1.0) - 1.0 / (p - 1.0))


def nonlinear_B(q, y, s, params: Params):
    """``|q+phi|^(p-1)(q+phi) - phi^p - p phi^(p-1) q``."""
    p = params.p
    phi = profile_phi(y, s, params)
    q = np.asarray(q, dtype=float)
    w = q + phi
    val = np.abs(w) ** (p - 1.0) * w - np.abs(phi) ** (p - 1.0) * phi - p * phi ** (p - 1.0) * q
    return float(val) if np.ndim(val) == 0 else val


def remainder_R(y, s, params: Params):
    """``-phi_s + laplacian phi - (y/2) phi_y - phi/(p-1) + |phi|^(p-1) phi``."""
    p = params.p
    phi, phi_s, phi_r, lap = profile_phi_derivatives(y, s, params)
    r = np.abs(np.asarray(y, dtype=float))
    val = -phi_s + lap - 0.5 * r * phi_r - phi / (p - 1.0) + np.abs(phi) ** (p - 1.0) * phi
    return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True)
class SimilarityFrame:
    """The change of variables ``y = x/sqrt(T-t)``, ``s = -ln(T-t)``,
    ``w = (T-t)^(1/(p-1)) u`` for blow-up time ``T``."""

    T: float
    params: Params

    def _gap(self, t):
        gap = self.T - np.asarray(t, dtype=float)
        if np.any(gap <= 0):
            raise ValueError(f"frame maps need t < T = {self.T}")
        return gap

    def s_of_t(self, t):
        return -np.log(self._gap(t))

    def t_of_s(self, s):
        return self.T - np.exp(-np.asarray(s, dtype=float))

    def y_of_x(self, x, t):
        return np.asarray(x) / np.sqrt(self._gap(t))

    def x_of_y(self, y, s):
        return np.asarray(y) * np.exp(-np.asarray(s) / 2.0)

    def w_of_u(self, u, t):
        return self._gap(t) ** (1.0 / (self.params.p - 1.0)) * np.asarray(u)

    def u_of_w(self, w, s):
        return np.exp(np.asarray(s) / (self.params.p - 1.0)) * np.asarray(w)


def _remap(values, src_nodes, dst_nodes):
    # cubic spline: linear interpolation would cap round trips at O(h^2)
    spline = CubicSpline(src_nodes, values, extrapolate=False)
    out = spline(dst_nodes)
    outside = np.isnan(out)
    out[outside] = np.interp(dst_nodes[outside], src_nodes, values)
    return out


def to_similarity(u: Field, T: float, params: Params, grid: GridSpec | None = None) -> Field:
    """Map a physical field at time ``u.time`` to ``w`` at ``s = -ln(T - t)``.

    Without ``grid`` the result lives on the image grid ``y_j = x_j/sqrt(T-t)``
    (no interpolation); otherwise it is interpolated onto ``grid`` by a cubic spline.
    """
    if u.frame != "x":
        raise ValueError("to_similarity expects a physical-frame field")
    frame = SimilarityFrame(T, params)
    t = u.time
    s = float(frame.s_of_t(t))
    scale = math.sqrt(T - t)
    image = GridSpec(u.grid.y_max / scale, u.grid.n_points)
    w = frame.w_of_u(u.values, t)
    if grid is None:
        return Field(w, image, "y", s)
    return Field(_remap(w, image.nodes, grid.nodes), grid, "y", s)


def from_similarity(w: Field, T: float, params: Params, grid: GridSpec | None = None) -> Field:
    """Inverse of :func:`to_similarity`."""
    if w.frame != "y":
        raise ValueError("from_similarity expects a similarity-frame field")
    frame = SimilarityFrame(T, params)
    s = w.time
    t = float(frame.t_of_s(s))
    if not t < T:
        raise ValueError("similarity time maps to t >= T")
    scale = math.exp(-s / 2.0)
    image = GridSpec(w.grid.y_max * scale, w.grid.n_points)
    u = frame.u_of_w(w.values, s)
    if grid is None:
        return Field(u, image, "x", t)
    return Field(_remap(u, image.nodes, grid.nodes), grid, "x", t)
