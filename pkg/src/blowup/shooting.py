"""Search the two-parameter family of initial perturbations for a trapped trajectory.

Initial data ``psi = (A/s0^2)(d0 + d1 y) chi0(2|y|/(K sqrt s0))`` excites only
the two expanding modes. A trajectory that leaves the shrinking set does so
through ``q0`` or ``q1``, and the sign at exit tells on which side of the
trapped parameters it started. Bisecting on those signs closes in on ``(d0, d1)``.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decomposition import ShrinkingParams, chi0
from .grid import Field, GridSpec
from .model import Params, from_similarity, profile_phi
from .solver import NumericalDivergence, RunRecord, StepperConfig, run_similarity

log = logging.getLogger(__name__)

SHOOT_LOG_COLUMNS = [
    "level", "center_d0", "center_d1", "radius", "center_exit",
    "exit_lower_left", "exit_lower_right", "exit_upper_left", "exit_upper_right",
]
SHOOT_EXIT_COLUMNS = ["level", "point", "d0", "d1", "exit_s", "components", "transverse", "blowup"]
POINT_NAMES = ("center", "lower_left", "lower_right", "upper_left", "upper_right")


class ShootingFailure(RuntimeError):
    """The search square shows no sign change, so it cannot contain a trapped point."""


@dataclass(frozen=True)
class ShotParams:
    d0: float
    d1: float
    s0: float

    def __post_init__(self):
        if not (-2.0 <= self.d0 <= 2.0 and -2.0 <= self.d1 <= 2.0):
            raise ValueError(f"(d0, d1) = ({self.d0}, {self.d1}) lies outside [-2, 2]^2")
        if not self.s0 > 1:
            raise ValueError("s0 must exceed 1")


def prepare_psi(shot: ShotParams, K: float, A: float, grid: GridSpec) -> Field:
    s0 = shot.s0
    if not 2.0 * K * math.sqrt(s0) < grid.y_max:
        raise ValueError(f"grid half-width {grid.y_max} does not contain |y| <= 2K sqrt(s0)")
    y = grid.nodes
    cut = chi0(2.0 * np.abs(y) / (K * math.sqrt(s0)))
    return Field((A / s0**2) * (shot.d0 + shot.d1 * y) * cut, grid, "y", s0)


@dataclass(frozen=True)
class ExitReport:
    """How a trajectory left the shrinking set.

    ``crossing`` maps each exiting unstable mode to
    ``sigma d/ds (q_i - sigma A/s^2)`` (``sigma`` the sign of ``q_i``), which
    is positive for an outgoing crossing.
    """

    s: float
    components: tuple
    ambiguous: bool
    signs: dict
    crossing: dict

    @property
    def unstable_only(self) -> bool:
        return set(self.components) <= {"q0", "q1"}

    @property
    def transverse(self) -> bool:
        return all(v > 0 for v in self.crossing.values())


def exit_classify(record: RunRecord) -> ExitReport | None:
    """Classify the first exit in ``record``; ``None`` if it never left the set."""
    reports = record.reports
    idx = next((i for i, r in enumerate(reports) if not r.in_set), None)
    if idx is None:
        return None
    rep = reports[idx]
    comps = tuple(rep.violations)
    signs = {k: float(np.sign(rep.measured[k])) for k in ("q0", "q1")}
    crossing = {}
    lo = max(idx - 1, 0)
    hi = min(idx + 1, len(reports) - 1)
    if hi > lo:
        a, b = reports[lo], reports[hi]
        for k in comps:
            if k not in ("q0", "q1"):
                continue
            sigma = signs[k] or 1.0
            ga = a.measured[k] - sigma * a.bounds[k]
            gb = b.measured[k] - sigma * b.bounds[k]
            crossing[k] = sigma * (gb - ga) / (b.s - a.s)
    return ExitReport(rep.s, comps, len(comps) > 1, signs, crossing)


@dataclass(frozen=True)
class _Shot:
    d0: float
    d1: float
    survival: float
    trapped: bool
    components: tuple
    sign0: float
    sign1: float
    final_load: float = math.inf
    exit_s: float = math.nan
    transverse: bool = True
    blowup: bool = False

    @property
    def signature(self):
        return (self.components, self.sign0, self.sign1)

    def exit_row(self, level: int, point: str) -> list:
        return [level, point, self.d0, self.d1, self.exit_s, "+".join(self.components),
                int(self.transverse), int(self.blowup)]


@dataclass
class ShootResult:
    d0: float
    d1: float
    exit_time: float
    trapped: bool
    levels: list = field(default_factory=list)
    corner_exits: list = field(default_factory=list)
    exits: list = field(default_factory=list)
    record: RunRecord | None = None

    def __iter__(self):
        return iter((self.d0, self.d1, self.exit_time))

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SHOOT_LOG_COLUMNS)
            writer.writerows(self.levels)

    def write_exits(self, path):
        """One row per trajectory that left the set during the search."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SHOOT_EXIT_COLUMNS)
            writer.writerows(self.exits)


def _fire(args) -> _Shot:
    d0, d1, s0, horizon, K, A, params, grid, cfg = args
    shrink = ShrinkingParams(K, A)
    psi = prepare_psi(ShotParams(d0, d1, s0), K, A, grid)
    try:
        rec = run_similarity(psi, s0, horizon, cfg, params, shrink)
    except NumericalDivergence:
        return _Shot(d0, d1, s0, False, ("diverged",), 0.0, 0.0, blowup=True)
    last = rec.reports[-1]
    load = max(abs(last.measured[k]) / last.bounds[k] for k in ("q0", "q1"))
    report = exit_classify(rec)
    return _Shot(d0, d1, rec.survival_time(), rec.trapped, tuple(rec.exit_components),
                 _significant_sign(last, "q0"), _significant_sign(last, "q1"), load,
                 exit_s=rec.exit_s if rec.exit_s is not None else math.nan,
                 transverse=report is None or report.transverse, blowup=rec.blowup)


def _significant_sign(report, name: str, rel: float = 1e-6) -> float:
    # a mode far below its bound carries only roundoff, e.g. q1 for even data
    value = report.measured[name]
    if abs(value) <= rel * report.bounds[name]:
        return 0.0
    return float(np.sign(value))


def _better(a: _Shot, b: _Shot) -> bool:
    if a.trapped and b.trapped:
        return a.final_load < b.final_load
    return (a.trapped, a.survival) > (b.trapped, b.survival)


def default_grid(K: float, horizon: float, h: float = 0.1) -> GridSpec:
    """Grid reaching ``3 K sqrt(horizon)`` (plus a margin) at spacing ``h``."""
    return GridSpec.from_spacing(math.ceil(3.0 * K * math.sqrt(horizon)) + 4.0, h)


def shoot(s0: float, K: float, A: float, horizon: float, tol: float = 1e-9, *,
          params: Params | None = None, grid: GridSpec | None = None,
          cfg: StepperConfig | None = None, workers: int = 1,
          max_levels: int = 60, refine: bool = False) -> ShootResult:
    """Nested bisection on the square ``[-2, 2]^2``.

    Each level integrates the center and the four corners of the current
    square. Stops when the center survives to ``horizon`` or the radius falls
    below ``tol``. With ``refine`` a surviving center does not stop the search:
    bisection continues on the signs of ``(q0, q1)`` at the horizon until the
    radius is below ``tol``, which pushes the unstable modes further from
    their bounds at the end of the window.

    Returns the point with the latest exit; among trapped points, the one whose
    unstable modes end furthest inside their bounds.
    """
    if not horizon > s0:
        raise ValueError("horizon must exceed s0")
    params = params or Params()
    cfg = cfg or StepperConfig()
    grid = grid or default_grid(K, horizon)
    ShrinkingParams(K, A)  # validates K and A

    def fire_all(points):
        jobs = [(d0, d1, s0, horizon, K, A, params, grid, cfg) for d0, d1 in points]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                return list(pool.map(_fire, jobs))
        return [_fire(j) for j in jobs]

    c0, c1, r = 0.0, 0.0, 2.0
    result = ShootResult(0.0, 0.0, s0, False)
    best = None
    for level in range(max_levels):
        points = [(c0, c1), (c0 - r, c1 - r), (c0 + r, c1 - r), (c0 - r, c1 + r), (c0 + r, c1 + r)]
        center, *corners = fire_all(points)
        result.levels.append([level, c0, c1, r, center.survival] + [c.survival for c in corners])
        result.corner_exits.append(corners)
        result.exits.extend(shot.exit_row(level, name)
                            for shot, name in zip((center, *corners), POINT_NAMES)
                            if not shot.trapped)
        log.info("level %d center (%.12g, %.12g) radius %.3g exit %.4f",
                 level, c0, c1, r, center.survival)
        for shot in (center, *corners):
            if best is None or _better(shot, best):
                best = shot
        if len({c.signature for c in corners}) == 1 and not corners[0].trapped:
            raise ShootingFailure(
                f"all four corners of the square at level {level} exit via "
                f"{corners[0].components} with the same signs")
        if r < tol or (center.trapped and not refine):
            break
        step0 = -center.sign0 * r / 2.0
        step1 = -center.sign1 * r / 2.0
        c0, c1, r = c0 + step0, c1 + step1, r / 2.0
    result.d0, result.d1 = best.d0, best.d1
    result.exit_time = best.survival
    result.trapped = best.trapped
    return result


def trapped_record(result: ShootResult, s0: float, K: float, A: float, horizon: float, *,
                   params: Params | None = None, grid: GridSpec | None = None,
                   cfg: StepperConfig | None = None, store_every: float | None = 0.05) -> RunRecord:
    """Re-run the shot found by :func:`shoot`, keeping snapshots for analysis."""
    params = params or Params()
    cfg = cfg or StepperConfig()
    grid = grid or default_grid(K, horizon)
    psi = prepare_psi(ShotParams(result.d0, result.d1, s0), K, A, grid)
    return run_similarity(psi, s0, horizon, cfg, params, ShrinkingParams(K, A),
                          store_every=store_every, stop_on_exit=False)


def physical_initial_data(shot: ShotParams, K: float, A: float, params: Params,
                          grid: GridSpec) -> Field:
    """``phi(., s0) + psi`` mapped to physical variables with ``T = exp(-s0)``, at ``t = 0``.

    ``grid`` is the similarity grid; the physical grid is its exact image.
    """
    psi = prepare_psi(shot, K, A, grid)
    w = Field(profile_phi(grid.nodes, shot.s0, params) + psi.values, grid, "y", shot.s0)
    u = from_similarity(w, math.exp(-shot.s0), params)
    return Field(u.values, u.grid, "x", 0.0)
