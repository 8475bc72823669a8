"""Shared fixtures.

The desk-scale prior is trained once through the CLI and cached under
``.cache/desk-<fingerprint>/`` so repeated runs reuse it. The fingerprint
covers the model, schedule, train and data sections of ``configs/desk.yaml``;
delete the directory to force retraining.

Tests marked ``criterion(n, name)`` are collected into a one-line-per-item
pass/fail block printed at the end of the run.
"""

import shutil
from pathlib import Path

import pytest

from poseprior.cli import main
from poseprior.config import load_config

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".cache"
DESK = ROOT / "configs" / "desk.yaml"
SMOKE = ROOT / "configs" / "smoke.yaml"

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, name = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    tables = [v for k, v in item.user_properties if k == "table"]
    _criteria[n] = (name, "PASS" if rep.passed else "FAIL", detail, tables)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, status, detail, _ = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {status} {name}: {detail}")
    for n in sorted(_criteria):
        for table in _criteria[n][3]:
            terminalreporter.write_line("")
            terminalreporter.write(table)


@pytest.fixture(scope="session")
def desk_run():
    """Directory holding the trained desk checkpoint and its summaries."""
    cfg = load_config(DESK)
    out = CACHE / f"desk-{cfg.fingerprint()}"
    if not (out / "train_summary.json").is_file():
        tmp = CACHE / f"tmp-{cfg.fingerprint()}"
        shutil.rmtree(tmp, ignore_errors=True)
        assert main(["train", "--config", str(DESK), "--out", str(tmp)]) == 0
        shutil.rmtree(out, ignore_errors=True)
        tmp.rename(out)
    return out
