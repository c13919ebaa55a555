"""Command-line driver: shoot, integrate, analyse, and write a self-describing run directory.

Subcommands::

    blowup run   [--config FILE] [--p 3 --K 10 ...] [--output DIR]
    blowup sweep --axis h --values 0.1 0.05 [--config FILE] [--workers 3]
    blowup check DIR

Exit codes: 0 success, 2 configuration or integrity error, 3 numerical
divergence, 4 shooting failure, 5 a failed check.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .decomposition import MEMBERSHIP_COLUMNS, ShrinkingParams
from .grid import GridSpec
from .model import Params
from .shooting import (
    ShootingFailure,
    ShotParams,
    SHOOT_LOG_COLUMNS,
    physical_initial_data,
    shoot,
    trapped_record,
)
from .solver import NumericalDivergence, PhysicalConfig, StepperConfig, run_physical

log = logging.getLogger("blowup")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SHOOTING, EXIT_CHECK = 0, 2, 3, 4, 5
SWEEP_AXES = ("p", "s0", "K", "A", "h", "ds")
OUTPUT_ROOT_ENV = "BLOWUP_OUTPUT_ROOT"

SNAPSHOT_PREFIX = ["s"]
INTERMEDIATE_COLUMNS = ["s", "err_u", "err_grad"]
MODES_COLUMNS = ["s", "q0", "q1", "q2", "r0", "r1", "r2"]
UV_COLUMNS = ["x0", "s_x0", "U", "U_hat", "V", "V_hat"]
SWEEP_COLUMNS = ["value", "exit_code", "exit_time", "C_bar", "C_q2", "C_err_u", "C_err_grad"]


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    p: float = 3.0
    N: int = 1
    K: float = 10.0
    A: float = 50.0
    s0: float = 30.0
    horizon: float = 45.0
    h: float = 0.1
    y_max: float | None = None
    ds: float = 0.01
    scheme: str = "imex-bdf2"
    boundary: str = "extrapolation"
    snapshot_every: float = 0.05
    store_every: float = 0.25
    tol: float = 1e-12
    refine: bool = True
    seed: int = 0
    workers: int = 1
    physical: bool = True
    phys_y_max: float = 120.0
    phys_h: float = 0.0025
    c_dt: float = 0.005
    stop_ratio: float = 1e-6
    n_profile_points: int = 7
    output_dir: str | None = None

    @property
    def grid_y_max(self) -> float:
        if self.y_max is not None:
            return self.y_max
        return math.ceil(3.0 * self.K * math.sqrt(self.horizon)) + 4.0

    def validate(self):
        """Raise :class:`ConfigError` naming the first violated constraint."""
        checks = [
            (self.p > 1, f"p > 1 (got p={self.p})"),
            (int(self.N) == self.N and self.N >= 1, f"N a positive integer (got N={self.N})"),
            (self.K >= 1, f"K >= 1 (got K={self.K})"),
            (self.A >= 1, f"A >= 1 (got A={self.A})"),
            (self.s0 > 1, f"s0 > 1 (got s0={self.s0})"),
            (self.horizon > self.s0, f"horizon > s0 (got horizon={self.horizon}, s0={self.s0})"),
            (self.h > 0, f"h > 0 (got h={self.h})"),
            (self.ds > 0, f"ds > 0 (got ds={self.ds})"),
            (self.snapshot_every >= self.ds, "snapshot_every >= ds"),
            (self.store_every >= self.ds, "store_every >= ds"),
            (self.workers >= 1, "workers >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"constraint violated: {msg}")
        need = 3.0 * self.K * math.sqrt(self.horizon)
        if self.grid_y_max < need:
            raise ConfigError(
                f"constraint violated: y_max >= 3 K sqrt(horizon) = {need:.4g} (got y_max={self.grid_y_max})")
        try:
            self.stepper().check_stability(self.params())
        except ValueError as exc:
            raise ConfigError(f"constraint violated: {exc}") from None
        if self.physical and self.phys_y_max <= 2.0 * self.K * math.sqrt(self.s0):
            raise ConfigError("constraint violated: phys_y_max > 2 K sqrt(s0)")

    def params(self) -> Params:
        return Params(self.p, int(self.N))

    def shrink(self) -> ShrinkingParams:
        return ShrinkingParams(self.K, self.A)

    def stepper(self) -> StepperConfig:
        return StepperConfig(self.ds, self.scheme, self.boundary)

    def grid(self) -> GridSpec:
        return GridSpec.from_spacing(self.grid_y_max, self.h)

    def physical_config(self) -> PhysicalConfig:
        return PhysicalConfig(c_dt=self.c_dt, stop_ratio=self.stop_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_id(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "workers")}
        return hashlib.sha1(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)


def output_dir_for(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"run-{config.run_id()}"


# --------------------------------------------------------------------------
# writing


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _membership_rows(record):
    return [r.row() for r in record.reports]


def _snapshot_rows(record):
    return [[s, *q] for s, q in record.snapshots]


def _mode_rows(record):
    res = analysis.mode_residuals(record)
    return zip(*(res[k] for k in MODES_COLUMNS))


def _profile_points(store, K: float, n: int):
    gap = store.T_est - store.times[-1]
    r = analysis.frozen_radius(K, gap)
    return np.geomspace(r, 10.0 * r, n)


def cmd_run(config: ExperimentConfig) -> int:
    """Shoot, integrate the trapped trajectory, analyse, and write the run directory."""
    try:
        config.validate()
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = output_dir_for(config)
    out.mkdir(parents=True, exist_ok=True)
    params, grid, cfg = config.params(), config.grid(), config.stepper()

    try:
        result = shoot(config.s0, config.K, config.A, config.horizon, config.tol,
                       params=params, grid=grid, cfg=cfg, workers=config.workers,
                       refine=config.refine)
    except ShootingFailure as exc:
        log.error("shooting failed: %s", exc)
        return EXIT_SHOOTING
    except NumericalDivergence as exc:
        log.error("numerical divergence during shooting: %s", exc)
        return EXIT_DIVERGED
    result.write_log(out / "shoot_log.csv")
    result.write_exits(out / "shoot_exits.csv")
    stray = [row for row in result.exits if not set(row[5].split("+")) <= {"q0", "q1"}]
    if stray:
        log.warning("%d of %d exits during the search left through other components than q0/q1",
                    len(stray), len(result.exits))
    if not result.trapped:
        log.error("no trapped trajectory found; best exit time %.4f", result.exit_time)
        _write_manifest(out, config, result, None, None)
        return EXIT_SHOOTING

    try:
        record = trapped_record(result, config.s0, config.K, config.A, config.horizon,
                                params=params, grid=grid, cfg=cfg, store_every=config.store_every)
    except NumericalDivergence as exc:
        log.error("numerical divergence: %s", exc)
        return EXIT_DIVERGED

    _write_csv(out / "membership.csv", MEMBERSHIP_COLUMNS, _membership_rows(record))
    _write_csv(out / "snapshots.csv", SNAPSHOT_PREFIX + [f"y{j}" for j in range(grid.n_points)],
               _snapshot_rows(record))
    s, eu, eg = analysis.intermediate_series(record)
    _write_csv(out / "intermediate.csv", INTERMEDIATE_COLUMNS, zip(s, eu, eg))
    fit_u, fit_g = analysis.intermediate_fit(record)
    fit_u.to_csv(out / "fit_err_u.csv")
    fit_g.to_csv(out / "fit_err_grad.csv")
    _write_csv(out / "modes.csv", MODES_COLUMNS, _mode_rows(record))

    store = None
    if config.physical:
        ygrid = GridSpec.from_spacing(config.phys_y_max, config.phys_h)
        u0 = physical_initial_data(ShotParams(result.d0, result.d1, config.s0), config.K,
                                   config.A, params, ygrid)
        try:
            store = run_physical(u0, config.physical_config(), params)
        except NumericalDivergence as exc:
            log.error("physical run diverged: %s", exc)
            return EXIT_DIVERGED
        if store.status == "blowup":
            xs = _profile_points(store, config.K, config.n_profile_points)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", analysis.FrozenRegionWarning)
                fu, fg = analysis.final_profile_fit(store, params, xs, config.K)
            fu.to_csv(out / "final_u.csv")
            fg.to_csv(out / "final_grad.csv")
            rows = []
            for x0 in xs:
                U, V = analysis.rescaled_UV(store, x0, 0.0, 0.0, params, config.K)
                Uh, Vh = analysis.hat_UV(0.0, x0, config.K, store.T_est, params)
                s_x0 = -math.log(store.T_est - analysis.t_of_x0(x0, config.K, store.T_est))
                rows.append([x0, s_x0, U, Uh, V, Vh])
            _write_csv(out / "uv.csv", UV_COLUMNS, rows)

    _write_manifest(out, config, result, record, store)
    code, failed = evaluate_run_dir(out)
    if failed:
        log.error("failed checks: %s", ", ".join(failed))
    return code


def _write_manifest(out: Path, config, result, record, store):
    files = {}
    for path in sorted(out.glob("*.csv")):
        with open(path) as fh:
            rows = sum(1 for _ in fh) - 1
        files[path.name] = {"sha256": _sha256(path), "rows": rows}
    manifest = {
        "run_id": config.run_id(),
        "config": config.to_dict(),
        "params": config.params().to_dict(),
        "grid": config.grid().to_dict(),
        "stepper": config.stepper().to_dict(),
        "shrinking": config.shrink().to_dict(),
        "shot": {"d0": result.d0, "d1": result.d1, "exit_time": result.exit_time,
                 "trapped": result.trapped, "levels": len(result.levels)},
        "files": files,
    }
    if record is not None:
        manifest["status"] = record.status
    if store is not None:
        manifest["physical"] = {"T_est": store.T_est, "T_nominal": math.exp(-config.s0),
                                "t_last": store.times[-1], "steps": store.steps,
                                "status": store.status}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# checking


def _read_table(path: Path, header, expected_rows: int | None):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IntegrityError(f"{path.name}: {exc}") from None
    if not rows or rows[0] != list(header):
        raise IntegrityError(f"{path.name}: unexpected header")
    body = rows[1:]
    if expected_rows is not None and len(body) != expected_rows:
        raise IntegrityError(f"{path.name}: {len(body)} rows, manifest lists {expected_rows}")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError:
        raise IntegrityError(f"{path.name}: unparseable value") from None
    if body and any(len(r) != len(header) for r in body):
        raise IntegrityError(f"{path.name}: ragged rows")
    return data.reshape(len(body), len(header))


def _checks(out: Path, manifest: dict) -> dict:
    """Named checks evaluated from the stored tables; each maps to ``(passed, detail)``."""
    files = manifest["files"]
    rows = {name: meta["rows"] for name, meta in files.items()}
    for name, meta in files.items():
        path = out / name
        if not path.exists():
            raise IntegrityError(f"{name} is listed in the manifest but missing")
        if _sha256(path) != meta["sha256"]:
            log.warning("%s differs from its manifest hash", name)

    cfg = manifest["config"]
    shrink = ShrinkingParams(cfg["K"], cfg["A"])
    results = {}
    if "membership.csv" not in files:
        results["trapped"] = (False, "no membership table (shooting did not trap)")
        return results

    mem = _read_table(out / "membership.csv", MEMBERSHIP_COLUMNS, rows["membership.csv"])
    s = mem[:, 0]
    bounds = [shrink.bounds(v) for v in s]
    for col, key, name in [(1, "q0", "q0_envelope"), (2, "q1", "q1_envelope"),
                           (3, "q2", "q2_envelope"), (4, "q_minus", "q_minus_envelope"),
                           (5, "q_e", "q_e_envelope")]:
        worst = max(abs(m) / b[key] for m, b in zip(mem[:, col], bounds))
        results[name] = (bool(worst <= 1.0), f"max |{key}|/bound = {worst:.4g}")
    reaches = bool(s[-1] >= cfg["horizon"] - 1e-9)
    results["trapped"] = (reaches and all(r[0] for r in results.values()),
                          f"membership checked up to s = {s[-1]:.4g}")

    n_grid = ExperimentConfig.from_dict(cfg).grid().n_points
    _read_table(out / "snapshots.csv", SNAPSHOT_PREFIX + [f"y{j}" for j in range(n_grid)],
                rows["snapshots.csv"])

    inter = _read_table(out / "intermediate.csv", INTERMEDIATE_COLUMNS, rows["intermediate.csv"])
    # the initial layer is excluded: trends are judged over the last two thirds
    late = inter[:, 0] >= cfg["s0"] + (cfg["horizon"] - cfg["s0"]) / 3.0 - 1e-9
    inter = inter[late]
    env = analysis.log_envelope(inter[:, 0])
    for col, name in [(1, "err_u"), (2, "err_grad")]:
        fit = analysis.ProfileFitReport(name, "s", inter[:, 0], inter[:, col], env)
        results[f"{name}_envelope"] = (
            fit.verdict == "bounded" and fit.non_increasing(1.5),
            f"C = {fit.fitted_C:.4g}, first/last half {fit.C_first:.4g}/{fit.C_last:.4g}")

    modes = _read_table(out / "modes.csv", MODES_COLUMNS, rows["modes.csv"])
    finite = bool(np.all(np.isfinite(modes)))
    results["mode_residuals_finite"] = (finite, f"C_bar = {max(modes[:, 4].max(), modes[:, 5].max()):.4g}, "
                                                f"C_q2 = {modes[:, 6].max():.4g}")

    if "final_u.csv" in files:
        for fname, name in [("final_u.csv", "final_u"), ("final_grad.csv", "final_grad")]:
            data = _read_table(out / fname, analysis.PROFILE_FIT_COLUMNS, rows[fname])
            ratio = data[:, 3]
            inside = bool(np.all((ratio >= 0.5) & (ratio <= 2.0)))
            dist = np.abs(ratio - 1.0)  # ordered by increasing |x0|
            monotone = bool(np.all(np.diff(dist) >= 0))
            results[f"{name}_ratio"] = (inside and monotone,
                                        f"ratios {np.round(ratio, 4).tolist()}")
        uv = _read_table(out / "uv.csv", UV_COLUMNS, rows["uv.csv"])
        results.update(uv_checks(uv))
    return results


def uv_checks(uv: np.ndarray) -> dict:
    """Errors of ``U``/``V`` at ``xi = tau = 0`` should decrease as ``s(x0)`` grows.

    Accepted when the error at the largest ``s(x0)`` is below the one at the
    smallest, and no error exceeds 1.5 times an error at smaller ``s(x0)``.
    """
    order = np.argsort(uv[:, 1])
    out = {}
    for name, (a, b) in {"U": (2, 3), "V": (4, 5)}.items():
        err = np.abs(uv[order, a] - uv[order, b])
        running_min = np.minimum.accumulate(err)
        ok = bool(err[-1] < err[0] and np.all(err <= 1.5 * running_min))
        out[f"{name}_start_error"] = (ok, f"errors {np.array2string(err, precision=3)}")
    return out


def evaluate_run_dir(out: Path):
    """Return ``(exit code, failed check names)`` for a run directory."""
    out = Path(out)
    try:
        manifest = json.loads((out / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read manifest: %s", exc)
        return EXIT_CONFIG, ["manifest"]
    try:
        results = _checks(out, manifest)
    except (IntegrityError, KeyError) as exc:
        log.error("integrity: %s", exc)
        return EXIT_CONFIG, ["integrity"]
    for name, (ok, detail) in results.items():
        log.info("%-22s %s  %s", name, "pass" if ok else "FAIL", detail)
    failed = [name for name, (ok, _) in results.items() if not ok]
    return (EXIT_CHECK if failed else EXIT_OK), failed


def cmd_check(out_dir) -> int:
    code, failed = evaluate_run_dir(out_dir)
    if failed and code == EXIT_CHECK:
        print("failed: " + ", ".join(failed))
    return code


# --------------------------------------------------------------------------
# sweeps


def _sweep_one(args):
    config, = args
    logging.getLogger("blowup").setLevel(logging.WARNING)
    code = cmd_run(config)
    out = output_dir_for(config)
    row = {"exit_code": code, "exit_time": math.nan, "C_bar": math.nan, "C_q2": math.nan,
           "C_err_u": math.nan, "C_err_grad": math.nan}
    try:
        manifest = json.loads((out / "manifest.json").read_text())
        row["exit_time"] = manifest["shot"]["exit_time"]
        modes = np.loadtxt(out / "modes.csv", delimiter=",", skiprows=1, ndmin=2)
        row["C_bar"] = float(max(modes[:, 4].max(), modes[:, 5].max()))
        row["C_q2"] = float(modes[:, 6].max())
        inter = np.loadtxt(out / "intermediate.csv", delimiter=",", skiprows=1, ndmin=2)
        for col, key in [(1, "C_err_u"), (2, "C_err_grad")]:
            row[key] = float(np.max(inter[:, col] / analysis.log_envelope(inter[:, 0])))
    except (OSError, KeyError, ValueError):
        pass
    return row


def cmd_sweep(config: ExperimentConfig, axis: str, values, workers: int = 1) -> int:
    """Run ``cmd_run`` once per value of ``axis`` and write ``summary.csv``."""
    if axis not in SWEEP_AXES:
        log.error("axis must be one of %s, got %r", SWEEP_AXES, axis)
        return EXIT_CONFIG
    values = list(values)
    if not values:
        log.error("sweep needs at least one value")
        return EXIT_CONFIG
    root = output_dir_for(config)
    configs = []
    for v in values:
        cast = float(v)
        cfg = config.replace(**{axis: cast, "output_dir": str(root / f"{axis}={cast:g}")})
        try:
            cfg.validate()
        except ConfigError as exc:
            log.error("%s=%s: %s", axis, v, exc)
            return EXIT_CONFIG
        configs.append(cfg)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(c,) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    _write_csv(root / "summary.csv", SWEEP_COLUMNS,
               [[float(v), r["exit_code"], r["exit_time"], r["C_bar"], r["C_q2"],
                 r["C_err_u"], r["C_err_grad"]] for v, r in zip(values, rows)])
    return EXIT_OK if all(r["exit_code"] == EXIT_OK for r in rows) else EXIT_CHECK


# --------------------------------------------------------------------------
# command line


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON file with ExperimentConfig fields")
    for f in dataclasses.fields(ExperimentConfig):
        if f.type in (bool, "bool"):
            parser.add_argument(f"--no-{f.name}", dest=f.name, action="store_const", const=False,
                                default=None)
            continue
        kind = {"N": int, "seed": int, "workers": int, "n_profile_points": int,
                "scheme": str, "boundary": str, "output_dir": str}.get(f.name, float)
        flag = "--output" if f.name == "output_dir" else f"--{f.name.replace('_', '-')}"
        parser.add_argument(flag, dest=f.name, type=kind, default=None)


def _config_from_args(args) -> ExperimentConfig:
    base = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    changes = {f.name: getattr(args, f.name) for f in dataclasses.fields(ExperimentConfig)
               if getattr(args, f.name, None) is not None}
    return base.replace(**changes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blowup", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="shoot, integrate and analyse one configuration")
    _add_config_flags(run)
    sweep = sub.add_parser("sweep", help="repeat 'run' over values of one parameter")
    _add_config_flags(sweep)
    sweep.add_argument("--axis", required=True)
    sweep.add_argument("--values", nargs="*", default=[])
    check = sub.add_parser("check", help="re-evaluate checks of a finished run directory")
    check.add_argument("directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "check":
        return cmd_check(args.directory)
    try:
        config = _config_from_args(args)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        code = cmd_run(config)
        if code == EXIT_CONFIG:
            try:
                config.validate()
            except ConfigError as exc:
                print(str(exc), file=sys.stderr)
        else:
            print(output_dir_for(config))
        return code
    return cmd_sweep(config, args.axis, args.values, workers=config.workers)


if __name__ == "__main__":
    sys.exit(main())
