"""Shared trained models and the acceptance PASS/FAIL summary."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from virtual_targets.core import NormalizationParams, fit_normalization
from virtual_targets.flow import CnfModel
from virtual_targets.sim import SimpleTargetConfig, simulate_deterministic_modes, simulate_simple
from virtual_targets.train import TrainConfig, TrainReport, build_training_points, subsample_points, train

CRITERIA = {
    1: "flow bijectivity",
    2: "Jacobian exactness",
    3: "gradient correctness",
    4: "density normalization",
    5: "noise-entropy floor",
    6: "loss at desk scale",
    7: "constant-time sampling",
    8: "ballistic oracle",
    9: "k-means optimality",
    10: "mode recovery",
    11: "multi-target behavior",
    12: "reproducibility",
}

# criterion -> list of (passed, detail); a criterion passes when every part does
RESULTS: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str) -> None:
        RESULTS.setdefault(criterion, []).append((bool(passed), detail))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        parts = RESULTS.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n:2d} ({name}): NOT RUN")
            continue
        status = "PASS" if all(p for p, _ in parts) else "FAIL"
        details = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d} ({name}): {status} - {details}")


@dataclass
class TrainedModel:
    model: CnfModel
    report: TrainReport
    norm: NormalizationParams
    seconds: float


def _fit(dataset, epochs, fraction, seed=0, test=None) -> TrainedModel:
    norm = fit_normalization(dataset)
    points = subsample_points(build_training_points(dataset, norm), fraction, seed)
    test_points = None if test is None else subsample_points(build_training_points(test, norm), fraction, seed + 1)
    origin = dataset.trajectories[0].positions[0]
    init = CnfModel.create(dataset.d, dataset.n_psi, seed=seed, norm=norm, frame_origin=origin)
    start = time.perf_counter()
    model, report = train(points, TrainConfig(epochs=epochs, seed=seed), init, test_points)
    return TrainedModel(model, report, norm, time.perf_counter() - start)


@pytest.fixture(scope="session")
def desk_simple() -> TrainedModel:
    """10^3 stochastic-maneuver trajectories, 10% of points, 300 epochs (several minutes)."""
    data = simulate_simple(SimpleTargetConfig(rng_seed=0), 1000)
    test = simulate_simple(SimpleTargetConfig(rng_seed=1), 200)
    return _fit(data, epochs=300, fraction=0.1, test=test)


@pytest.fixture(scope="session")
def modes_model() -> TrainedModel:
    """Three deterministic modes: straight, full-length left turn, full-length right turn."""
    data = simulate_deterministic_modes(SimpleTargetConfig(rng_seed=0), 300)
    return _fit(data, epochs=150, fraction=0.1)

