import logging
import time

import pytest

from blowup.harness import ExperimentConfig, cmd_run


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default experiment, run once per session: ``(exit code, run directory, seconds)``."""
    out = tmp_path_factory.mktemp("default-run")
    logging.getLogger("blowup").setLevel(logging.WARNING)
    start = time.perf_counter()
    code = cmd_run(ExperimentConfig(output_dir=str(out)))
    return code, out, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if rep.when == "call" and "criterion" in props:
                lines.append((props["criterion"], outcome.upper(), props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, outcome, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {number}: {outcome:6s} {detail}")
