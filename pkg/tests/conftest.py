from pathlib import Path

import numpy as np
import pytest

from samplecert.classifiers import LinearClassifier, MlpClassifier
from samplecert.datamodel import make_synthetic_gaussians


@pytest.fixture
def mixture():
    return make_synthetic_gaussians(100, [[-1.5, 0.0], [1.5, 0.0]], 0.8, seed=3)


@pytest.fixture
def unit_linear():
    # score = x0, class 1 iff x0 > 0
    return LinearClassifier.binary([1.0, 0.0], 0.0)


@pytest.fixture
def small_mlp():
    return MlpClassifier.init([2, 8, 3], seed=11)


def finite_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


SMOKE_INI = Path(__file__).resolve().parents[1] / "configs" / "smoke.ini"


def cli_stage_chain(out: Path, workers: int) -> None:
    """Every CLI stage once, each reading the previous stage's files.

    Runs inside ``out`` with relative paths so identical command lines can be
    compared byte for byte across directories.
    """
    import os

    from samplecert.cli import main

    out.mkdir(parents=True, exist_ok=True)
    g = ["--config", str(SMOKE_INI), "--out-dir", ".", "--workers", str(workers)]
    steps = [
        ["gen-data"],
        ["poison", "--train", "train.csv", "--test", "test.csv"],
        ["train", "--data", "train_poisoned.csv", "--single", "--sigma0", "0.25"],
        ["boundary", "--model", "model.json", "--data", "test.csv", "--iters", "10"],
        ["optimize-noise", "--target", "model.json", "--data", "train_poisoned.csv",
         "--sigma0", "0.25", "--iters", "3", "--output", "noise_train.csv"],
        ["train", "--data", "train_poisoned.csv", "--sigma-map", "noise_train.csv"],
        ["optimize-noise", "--target", "ensemble/manifest.json", "--data", "test_triggered.csv",
         "--sigma0", "0.25", "--iters", "3", "--output", "noise_test.csv"],
        ["certify", "--ensemble", "ensemble", "--data", "test_triggered.csv", "--triggered",
         "--sigma-map", "noise_test.csv", "--store", "store.json", "--output", "records_trig.jsonl"],
        ["certify", "--ensemble", "ensemble", "--data", "test.csv", "--sigma", "0.25",
         "--output", "records_clean.jsonl"],
        ["eval", "records_trig.jsonl", "records_clean.jsonl"],
        ["curves", "records_trig.jsonl", "--plot-data", "curves.json"],
    ]
    cwd = os.getcwd()
    os.chdir(out)
    try:
        for s in steps:
            rc = main(g + s)
            assert rc == 0, s
    finally:
        os.chdir(cwd)


@pytest.fixture
def stage_chain():
    return cli_stage_chain


@pytest.fixture
def smoke_ini():
    return SMOKE_INI


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the line is printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, title: str):
        lines[number] = [title, "FAIL", ""]
        return lines[number]

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" or "criterion" not in item.fixturenames:
        return
    entry = item.config.stash.get(_ACCEPTANCE_KEY, {})
    for number, row in entry.items():
        if row[2] == "" and item.name.startswith(f"test_criterion_{number:02d}"):
            row[1] = "PASS" if rep.passed else "FAIL"
            row[2] = f"{rep.duration:.1f}s"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        title, status, took = lines[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} ({took})")
