"""Shared fixtures: src/ on the import path and tiny scenarios that train in seconds"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from data import REFERENCE_SEQUENCE, preset  # noqa: E402
from runner import OptimizerSettings, ScenarioSpec  # noqa: E402
from strategies import StrategyConfig  # noqa: E402

RUN_SLOW = os.getenv("CLPOSE_RUN_SLOW") == "1"


def tiny_datasets(names=REFERENCE_SEQUENCE, n_train=16, n_val=8):
    return tuple(preset(n, n_train=n_train, n_val=n_val) for n in names)


def tiny_spec(kind="finetune", names=REFERENCE_SEQUENCE, seed=22, **strategy_overrides) -> ScenarioSpec:
    strategy_overrides.setdefault("fisher_samples", 8)
    return ScenarioSpec(
        datasets=tiny_datasets(names),
        strategy=StrategyConfig(kind=kind, **strategy_overrides),
        epochs=2,
        first_epochs=2,
        batch_size=8,
        eval_every=1,
        seed=seed,
        optimizer=OptimizerSettings(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec_factory():
    return tiny_spec
