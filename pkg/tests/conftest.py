import time

import numpy as np
import pytest

from slowmode.features import featurize_polar, whiten
from slowmode.lattice_msm import PotentialSpec, beltway_grid, build_transition_model, sample_trajectory
from slowmode.pipeline import preset, run_experiment
from slowmode.spectral import leading_modes

BELTWAY_STEPS = 5_000_000
BELTWAY_SEED = 42
LAG = 3000

_criteria = {}
stage_seconds = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _criteria[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def beltway_model():
    return build_transition_model(PotentialSpec(), beltway_grid(), convention=4)


@pytest.fixture(scope="session")
def beltway_modes(beltway_model):
    return leading_modes(beltway_model, 6)


@pytest.fixture(scope="session")
def beltway_traj(beltway_model):
    return sample_trajectory(beltway_model, BELTWAY_STEPS, seed=BELTWAY_SEED)


@pytest.fixture(scope="session")
def beltway_features(beltway_traj, beltway_model):
    return whiten(featurize_polar(beltway_traj, beltway_model.grid))


@pytest.fixture(scope="session")
def beltway_run_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("beltway-paper")


@pytest.fixture(scope="session")
def beltway_report(beltway_run_dir):
    """Full beltway experiment (all four objectives); shared by every test
    that needs trained networks."""
    return timed_experiment(preset("beltway-paper"), beltway_run_dir)


def timed_experiment(config, out_dir, times=None):
    """run_experiment that records wall time per computed stage in ``times``
    (default: the session-wide ``stage_seconds``)."""
    times = stage_seconds if times is None else times
    last = {"stage": None, "t": time.perf_counter()}

    def log(msg):
        if not msg.startswith("["):
            return
        now = time.perf_counter()
        if last["stage"] is not None:
            times[last["stage"]] = now - last["t"]
        last["stage"] = msg[1:].split("]")[0] if msg.endswith("computing") else None
        last["t"] = now

    report = run_experiment(config, out_dir, log=log)
    log("[end]")
    return report


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
