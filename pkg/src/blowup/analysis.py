"""Checks of computed solutions against the predicted blow-up profiles.

Three families of checks:

* the intermediate profile ``w(y, s) ~ phi0(y / sqrt s)`` along a trapped
  similarity trajectory, with error envelope ``C ln s / s``;
* the rescaled solution ``U(x0, xi, tau)`` near a point ``x0`` close to the
  blow-up point, compared with the explicit ODE solution ``U_hat``;
* the final profile ``u*(x)`` left behind at ``t = T``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import Field
from .model import Params, profile_phi, profile_phi0
from .solver import RunRecord, TrajectoryStore, gradient

PROFILE_FIT_COLUMNS = ["coord", "measured", "envelope", "ratio"]


class FrozenRegionWarning(UserWarning):
    """A sample point lies where the solution has not yet settled to its final profile."""


# --------------------------------------------------------------------------
# envelope fits


@dataclass
class ProfileFitReport:
    """A measured quantity against an envelope ``C * envelope``.

    ``fitted_C`` is the maximum of ``measured / envelope``; the verdict is
    ``"bounded"`` when the maximum over the second half of the samples is at
    most 1.2 times the maximum over the first half.
    """

    name: str
    coord_name: str
    coords: np.ndarray
    measured: np.ndarray
    envelope: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self) -> np.ndarray:
        return self.measured / self.envelope

    @property
    def fitted_C(self) -> float:
        return float(np.max(self.ratio))

    def _halves(self):
        mid = len(self.coords) // 2
        return self.ratio[:max(mid, 1)], self.ratio[mid:]

    @property
    def C_first(self) -> float:
        return float(np.max(self._halves()[0]))

    @property
    def C_last(self) -> float:
        return float(np.max(self._halves()[1]))

    @property
    def verdict(self) -> str:
        return "bounded" if self.C_last <= 1.2 * self.C_first else "unbounded"

    def non_increasing(self, factor: float = 1.5) -> bool:
        """``ratio`` never exceeds ``factor`` times any earlier value."""
        running_min = np.minimum.accumulate(self.ratio)
        return bool(np.all(self.ratio <= factor * running_min))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(PROFILE_FIT_COLUMNS)
            for row in zip(self.coords, self.measured, self.envelope, self.ratio):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, name: str = "", coord_name: str = "coord") -> "ProfileFitReport":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != len(PROFILE_FIT_COLUMNS):
            raise ValueError(f"{path}: expected {len(PROFILE_FIT_COLUMNS)} columns")
        return cls(name, coord_name, data[:, 0], data[:, 1], data[:, 2])


def log_envelope(s):
    """``ln s / s``, the rate at which the intermediate profile is approached."""
    s = np.asarray(s, dtype=float)
    return np.log(s) / s


# --------------------------------------------------------------------------
# intermediate profile


def intermediate_error(w: Field, s: float, params: Params):
    """``(sup|w - phi0(y/sqrt s)|, sup|w_y - phi0'(y/sqrt s)/sqrt s|)`` over the grid."""
    z = w.nodes / math.sqrt(s)
    target, dtarget = profile_phi0(z, params)
    err_u = float(np.max(np.abs(w.values - target)))
    dw = gradient(w).values
    err_grad = float(np.max(np.abs(dw - dtarget / math.sqrt(s))))
    return err_u, err_grad


def intermediate_series(record: RunRecord, params: Params | None = None):
    """``(s, err_u, err_grad)`` over the snapshots stored in ``record``."""
    params = params or record.params
    if not record.snapshots:
        raise ValueError("record holds no stored snapshots")
    grid = record.grid
    out = []
    for s, q in record.snapshots:
        w = Field(q + profile_phi(grid.nodes, s, params), grid, "y", s)
        out.append((s, *intermediate_error(w, s, params)))
    arr = np.array(out)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def intermediate_fit(record: RunRecord, s_range=None, params: Params | None = None):
    """Envelope fits of ``err_u`` and ``err_grad`` against ``ln s / s``."""
    s, eu, eg = intermediate_series(record, params)
    keep = np.ones(len(s), bool) if s_range is None else (s >= s_range[0]) & (s <= s_range[1] + 1e-9)
    s, eu, eg = s[keep], eu[keep], eg[keep]
    env = log_envelope(s)
    return (ProfileFitReport("err_u", "s", s, eu, env),
            ProfileFitReport("err_grad", "s", s, eg, env))


def gradient_regularity(record: RunRecord) -> ProfileFitReport:
    """``sup|q_y|`` at each membership check, against ``ln s / s``."""
    s = record.s
    g = np.array(record.grad_norms)
    return ProfileFitReport("grad_q", "s", s, g, log_envelope(s))


# --------------------------------------------------------------------------
# mode dynamics


def mode_residuals(record: RunRecord, s_range=None) -> dict:
    """Scaled residuals of the leading-order mode equations.

    Returns arrays ``s``, ``q0``, ``q1``, ``q2``, ``r0 = |q0' - q0| s^2``, ``r1 = |q1' - q1/2| s^2``
    and ``r2 = |q2' + 2 q2 / s| s^3 / A``, derivatives by centered differences
    over the membership checks.
    """
    s = record.s
    if len(s) < 3:
        raise ValueError("need at least three membership checks")
    q0, q1, q2 = (record.series(k) for k in ("q0", "q1", "q2"))
    d0, d1, d2 = (np.gradient(q, s, edge_order=2) for q in (q0, q1, q2))
    A = record.shrink.A
    res = {
        "s": s, "q0": q0, "q1": q1, "q2": q2,
        "r0": np.abs(d0 - q0) * s**2,
        "r1": np.abs(d1 - 0.5 * q1) * s**2,
        "r2": np.abs(d2 + 2.0 * q2 / s) * s**3 / A,
    }
    # drop the end points, where the one-sided differences are less accurate
    keep = np.zeros(len(s), bool)
    keep[1:-1] = True
    if s_range is not None:
        keep &= (s >= s_range[0]) & (s <= s_range[1] + 1e-9)
    return {k: v[keep] for k, v in res.items()}


def mode_constants(record: RunRecord, s_range=None) -> dict:
    """Fitted constants: one shared ``C_bar`` for both expanding modes, one for ``q2``."""
    res = mode_residuals(record, s_range)
    c0 = float(np.max(res["r0"]))
    c1 = float(np.max(res["r1"]))
    return {"C_bar": max(c0, c1), "C_q0": c0, "C_q1": c1, "C_q2": float(np.max(res["r2"]))}


# --------------------------------------------------------------------------
# rescaled solution near a point x0


def t_of_x0(x0: float, K: float, T: float, rtol: float = 1e-12) -> float:
    """Time ``t < T`` with ``|x0| = K sqrt((T - t) |ln(T - t)|)``.

    The map ``g -> g |ln g|`` is increasing on ``0 < g < 1/e``; the root is
    searched there (and below ``T``) by bisection in ``ln g``.
    """
    if x0 == 0:
        raise ValueError("x0 must be nonzero")
    if K <= 0 or T <= 0:
        raise ValueError("K and T must be positive")
    target = (x0 / K) ** 2
    g_hi = min(T, math.exp(-1.0))
    if target >= g_hi * abs(math.log(g_hi)):
        raise ValueError(f"|x0| = {abs(x0)} is too large for a monotone root (K={K}, T={T})")
    lo, hi = math.log(1e-300), math.log(g_hi)
    # an absolute tolerance in ln g is a relative tolerance in g
    while hi - lo > rtol:
        mid = 0.5 * (lo + hi)
        if math.exp(mid) * abs(mid) < target:
            lo = mid
        else:
            hi = mid
    return T - math.exp(0.5 * (lo + hi))


def frozen_radius(K: float, gap: float) -> float:
    """``K sqrt(g |ln g|)``: inside this radius the profile is still evolving at ``T - t = g``."""
    return K * math.sqrt(gap * abs(math.log(gap)))


def _interp_time(store: TrajectoryStore, T: float, t: float, arrays):
    gaps = T - np.asarray(store.times)
    if np.any(gaps <= 0):
        raise ValueError("stored times must precede the blow-up time")
    lg = np.log(gaps)  # decreasing in the snapshot index
    target = math.log(T - t) if t < T else -math.inf
    if not lg[-1] <= target <= lg[0]:
        raise ValueError(f"t = {t!r} lies outside the stored snapshots")
    k = int(np.searchsorted(-lg, -target, side="right")) - 1
    k = min(max(k, 0), len(lg) - 2)
    theta = 0.0 if lg[k] == lg[k + 1] else (lg[k] - target) / (lg[k] - lg[k + 1])
    return (1.0 - theta) * arrays[k] + theta * arrays[k + 1]


def _interp_space(store: TrajectoryStore, x: float, values):
    xs = store.x
    if not xs[0] <= x <= xs[-1]:
        raise ValueError(f"x = {x!r} lies outside the stored window")
    return float(np.interp(x, xs, values))


def rescaled_UV(store: TrajectoryStore, x0: float, xi: float, tau: float, params: Params,
                K: float = 10.0, T: float | None = None):
    """``(U, V)`` at ``(x0, xi, tau)``.

    ``U = g^(1/(p-1)) u(x0 + xi sqrt g, t(x0) + tau g)`` with ``g = T - t(x0)``,
    ``V = dU/dxi``. Interpolation is linear in ``x`` and in ``ln(T - t)``.
    """
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    T = store.T_est if T is None else T
    t0 = t_of_x0(x0, K, T)
    g = T - t0
    t = t0 + tau * g
    x = x0 + xi * math.sqrt(g)
    u_t = _interp_time(store, T, t, store.u)
    du_t = _interp_time(store, T, t, store.du)
    a = 1.0 / (params.p - 1.0)
    U = g**a * _interp_space(store, x, u_t)
    V = g ** (a + 0.5) * _interp_space(store, x, du_t)
    return U, V


def hat_UV(tau: float, x0: float, K: float, T: float, params: Params):
    """Explicit ``(U_hat, V_hat)`` solving ``U' = U^p``, ``V' = p U^(p-1) V``."""
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    p, b = params.p, params.b
    a = p - 1.0
    theta = a * (1.0 - tau) + b * K * K
    t0 = t_of_x0(x0, K, T)
    ln_gap = abs(math.log(T - t0))
    U = theta ** (-1.0 / a)
    V = -math.copysign(1.0, x0) * (2.0 * b * K / (a * math.sqrt(ln_gap))) * theta ** (-p / a)
    return U, V


def hat_residuals(tau: float, x0: float, K: float, T: float, params: Params, step: float = 1e-4):
    """Centered-difference residuals ``(|U' - U^p|, |V' - p U^(p-1) V|)`` at ``tau``."""
    lo, hi = max(tau - step, 0.0), tau + step
    U_lo, V_lo = hat_UV(lo, x0, K, T, params)
    U_hi, V_hi = hat_UV(hi, x0, K, T, params)
    U, V = hat_UV(tau, x0, K, T, params)
    p = params.p
    dU = (U_hi - U_lo) / (hi - lo)
    dV = (V_hi - V_lo) / (hi - lo)
    return abs(dU - U**p), abs(dV - p * U ** (p - 1.0) * V)


def predicted_UV_start(x0: float, K: float, T: float, params: Params):
    """Leading-order prediction of ``(U, V)`` at ``xi = tau = 0``."""
    return hat_UV(0.0, x0, K, T, params)


# --------------------------------------------------------------------------
# final profile


def u_star(x, params: Params):
    """``[b x^2 / (2 |ln|x||)]^(-1/(p-1))``."""
    x = np.asarray(x, dtype=float)
    L = np.abs(np.log(np.abs(x)))
    val = (params.b * x * x / (2.0 * L)) ** (-1.0 / (params.p - 1.0))
    return float(val) if val.ndim == 0 else val


def grad_u_star(x, params: Params):
    p, b = params.p, params.b
    x = np.asarray(x, dtype=float)
    L = np.abs(np.log(np.abs(x)))
    val = (-(math.sqrt(2.0 * b) / (p - 1.0)) * np.sign(x) * L**-0.5
           * (b * x * x / (2.0 * L)) ** (-(p + 1.0) / (2.0 * (p - 1.0))))
    return float(val) if val.ndim == 0 else val


def final_profile_fit(store: TrajectoryStore, params: Params, x_range, K: float = 10.0,
                      T: float | None = None):
    """Ratios ``u/u*`` and ``u_x/u*'`` at the last stored time for each ``x0``.

    Returns two reports whose ``measured`` is the computed value, ``envelope``
    the limiting profile, so ``ratio`` is the curve of interest.
    """
    T = store.T_est if T is None else T
    t_last = store.times[-1]
    gap = T - t_last
    if not gap > 0:
        raise ValueError("last snapshot is not before the blow-up time")
    xs = np.asarray(x_range, dtype=float)
    r_frozen = frozen_radius(K, gap)
    inside = np.abs(xs) < r_frozen
    if np.any(inside):
        warnings.warn(f"{int(inside.sum())} sample points lie inside |x| < {r_frozen:.3g}, "
                      "where the profile is still evolving", FrozenRegionWarning, stacklevel=2)
    u = np.array([_interp_space(store, x, store.u[-1]) for x in xs])
    du = np.array([_interp_space(store, x, store.du[-1]) for x in xs])
    extra = {"t_last": t_last, "T": T, "frozen_radius": r_frozen}
    return (ProfileFitReport("u_final", "x", xs, u, u_star(xs, params), dict(extra)),
            ProfileFitReport("grad_u_final", "x", xs, du, grad_u_star(xs, params), dict(extra)))
