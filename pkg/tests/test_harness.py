import csv
import filecmp
import hashlib
import json
import shutil
from pathlib import Path

import pytest

from blowup import harness
from blowup.harness import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_SHOOTING,
    ConfigError,
    ExperimentConfig,
    cmd_check,
    cmd_run,
    cmd_sweep,
    main,
)
from blowup.shooting import ShootingFailure
from blowup.solver import NumericalDivergence

GOLDEN = json.loads((Path(__file__).parent / "golden" / "headers.json").read_text())
QUICK = dict(horizon=33.0, h=0.2, ds=0.02, tol=1e-3, refine=False, physical=False)


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


class TestConfig:
    def test_defaults_valid(self):
        ExperimentConfig().validate()

    @pytest.mark.parametrize("change, phrase", [
        (dict(p=0.5), "p > 1"),
        (dict(K=0.5), "K >= 1"),
        (dict(A=0.0), "A >= 1"),
        (dict(s0=1.0), "s0 > 1"),
        (dict(horizon=20.0), "horizon > s0"),
        (dict(y_max=100.0), "y_max >= 3 K sqrt(horizon)"),
        (dict(ds=0.095, snapshot_every=0.1), "stability"),
        (dict(phys_y_max=100.0), "phys_y_max"),
    ])
    def test_violations_named(self, change, phrase):
        with pytest.raises(ConfigError, match="constraint violated") as info:
            ExperimentConfig(**change).validate()
        assert phrase in str(info.value)

    def test_json_round_trip(self, tmp_path):
        cfg = ExperimentConfig(p=2.0, horizon=40.0)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_dict({"q": 1})

    def test_unreadable_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "bad.json")

    def test_run_id_ignores_output_and_workers(self):
        a = ExperimentConfig(output_dir="x", workers=3)
        assert a.run_id() == ExperimentConfig().run_id()
        assert ExperimentConfig(p=2.0).run_id() != a.run_id()

    def test_output_root_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("BLOWUP_OUTPUT_ROOT", str(tmp_path))
        cfg = ExperimentConfig()
        assert harness.output_dir_for(cfg) == tmp_path / f"run-{cfg.run_id()}"


class TestCli:
    def test_bad_p_exits_2_with_message(self, tmp_path, capsys):
        assert main(["run", "--p", "0.5", "--output", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "p > 1" in capsys.readouterr().err

    def test_small_y_max_exits_2(self, tmp_path, capsys):
        assert main(["run", "--y-max", "50", "--output", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "y_max" in capsys.readouterr().err

    def test_flags_override_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"p": 2.0, "K": 5.0}))
        args = harness.build_parser().parse_args(
            ["run", "--config", str(path), "--K", "7", "--no-physical", "--scheme", "imex-euler"])
        cfg = harness._config_from_args(args)
        assert (cfg.p, cfg.K, cfg.physical, cfg.scheme) == (2.0, 7.0, False, "imex-euler")

    def test_sweep_empty_values(self, tmp_path):
        assert main(["sweep", "--axis", "h", "--output", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_sweep_bad_axis(self, tmp_path):
        assert cmd_sweep(ExperimentConfig(output_dir=str(tmp_path)), "N", [1]) == EXIT_CONFIG

    def test_sweep_invalid_value(self, tmp_path):
        assert cmd_sweep(ExperimentConfig(output_dir=str(tmp_path)), "p", [0.5]) == EXIT_CONFIG

    def test_check_missing_dir(self, tmp_path):
        assert main(["check", str(tmp_path / "none")]) == EXIT_CONFIG


class TestFailurePaths:
    def test_shooting_failure_exits_4(self, tmp_path, monkeypatch):
        def fail(*a, **k):
            raise ShootingFailure("degree zero")

        monkeypatch.setattr(harness, "shoot", fail)
        assert cmd_run(ExperimentConfig(output_dir=str(tmp_path), **QUICK)) == EXIT_SHOOTING

    def test_divergence_exits_3(self, tmp_path, monkeypatch):
        def diverge(*a, **k):
            raise NumericalDivergence("boom")

        monkeypatch.setattr(harness, "shoot", diverge)
        assert cmd_run(ExperimentConfig(output_dir=str(tmp_path), **QUICK)) == EXIT_DIVERGED

    def test_untrapped_search_exits_4(self, tmp_path):
        cfg = ExperimentConfig(output_dir=str(tmp_path), **{**QUICK, "tol": 0.5, "horizon": 38.0})
        assert cmd_run(cfg) == EXIT_SHOOTING
        assert (tmp_path / "shoot_log.csv").exists()
        assert harness.evaluate_run_dir(tmp_path)[0] == EXIT_CHECK


def test_deterministic_outputs(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        cmd_run(ExperimentConfig(output_dir=str(d), **QUICK))
    names = sorted(p.name for p in dirs[0].glob("*.csv"))
    assert names == sorted(p.name for p in dirs[1].glob("*.csv"))
    assert "membership.csv" in names
    match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
    assert not mismatch and not errors


@pytest.mark.slow
class TestDefaultRun:
    def test_exit_zero(self, default_run):
        code, out, _ = default_run
        assert code == EXIT_OK

    def test_golden_headers(self, default_run):
        _, out, _ = default_run
        for name, cols in GOLDEN.items():
            if name != "summary.csv":
                assert header(out / name) == cols, name
        snap = header(out / "snapshots.csv")
        grid = ExperimentConfig().grid()
        assert snap == ["s"] + [f"y{j}" for j in range(grid.n_points)]

    def test_manifest_lists_every_file(self, default_run):
        _, out, _ = default_run
        manifest = json.loads((out / "manifest.json").read_text())
        on_disk = {p.name for p in out.glob("*.csv")}
        assert set(manifest["files"]) == on_disk
        for name, meta in manifest["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == meta["sha256"]
        assert manifest["shot"]["trapped"] is True
        assert manifest["physical"]["status"] == "blowup"

    def test_check_reproduces_verdict(self, default_run):
        _, out, _ = default_run
        assert cmd_check(out) == EXIT_OK

    def test_truncated_snapshots_exit_2(self, default_run, tmp_path):
        _, out, _ = default_run
        copy = tmp_path / "run"
        shutil.copytree(out, copy)
        lines = (copy / "snapshots.csv").read_text().splitlines(keepends=True)
        (copy / "snapshots.csv").write_text("".join(lines[: len(lines) // 2]))
        assert cmd_check(copy) == EXIT_CONFIG

    def test_corrupted_q2_exit_5(self, default_run, tmp_path, capsys):
        _, out, _ = default_run
        copy = tmp_path / "run"
        shutil.copytree(out, copy)
        path = copy / "membership.csv"
        rows = list(csv.reader(open(path)))
        rows[len(rows) // 2][3] = "1000.0"  # the q2 bound is about 6 there
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        assert cmd_check(copy) == EXIT_CHECK
        assert "q2_envelope" in capsys.readouterr().out
