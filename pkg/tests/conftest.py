import sys

import numpy as np
import pytest

from crnerf import synthscene as ss
from crnerf.trainer import TrainConfig, run_training


def tiny_config(variant="full", **kw):
    base = dict(variant=variant, steps=4, seed=1, rays=64, samples=8, width=16, depth=4,
                precision="float64", checkpoint_every=2, lr=1e-3, lam=0.1, beta=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    return ss.generate_dataset(ss.default_scene(), 4, 3, 2, 0.5, 11, tmp_path_factory.mktemp("data"), image_size=16)


@pytest.fixture(scope="session")
def trained(tiny_dataset, tmp_path_factory):
    """Final checkpoints of a few short runs, keyed by variant."""
    root = tmp_path_factory.mktemp("runs")
    return {v: run_training(tiny_dataset, tiny_config(v), root / v) for v in ("full", "base", "raypoint-fusion")}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"[criterion {n}] {'PASS' if ok else 'FAIL'}  {detail}")
