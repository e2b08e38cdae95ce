"""Seeded forgetting and ordering experiments on the reference scenario

Minutes of CPU; set CLPOSE_RUN_SLOW=1 to include them.
"""

import logging
from statistics import mean

import pytest

from conftest import RUN_SLOW
from data import REFERENCE_SEQUENCE, preset
from runner import ScenarioSpec, average_accuracy, forgetting, grid_search, run_scenario
from strategies import StrategyConfig

pytestmark = pytest.mark.skipif(not RUN_SLOW, reason="set CLPOSE_RUN_SLOW=1 to run the seeded experiments")

logger = logging.getLogger(__name__)

SEEDS = (22, 23, 24, 25, 26)
KINDS = ("finetune", "ewc_separate", "ewc_online", "lwf", "iwd")


def _spec(kind, seed):
    return ScenarioSpec(
        datasets=tuple(preset(n, n_train=256, n_val=64) for n in REFERENCE_SEQUENCE),
        strategy=StrategyConfig(kind=kind, fisher_samples=128),
        epochs=15,
        first_epochs=30,
        eval_every=15,
        seed=seed,
    )


@pytest.fixture(scope="module")
def results():
    return {(kind, seed): run_scenario(_spec(kind, seed)) for kind in KINDS for seed in SEEDS}


def test_finetune_forgets_first_dataset(results):
    drops = [forgetting(results["finetune", s], 0, "pck") for s in SEEDS]
    logger.info("finetune PCK drop per seed: %s", drops)
    assert mean(drops) >= 20.0


@pytest.mark.parametrize("kind", ["ewc_separate", "ewc_online", "lwf", "iwd"])
def test_regularizers_forget_less(results, kind):
    base = mean(forgetting(results["finetune", s], 0, "pck") for s in SEEDS)
    ours = mean(forgetting(results[kind, s], 0, "pck") for s in SEEDS)
    assert ours < base


def test_average_accuracy_ordering(results):
    per_seed = {kind: [average_accuracy(results[kind, s]) for s in SEEDS] for kind in ("finetune", "lwf", "iwd")}
    for kind, values in per_seed.items():
        logger.info("%s average accuracy per seed: %s", kind, ", ".join(f"{v:.2f}" for v in values))
    assert mean(per_seed["lwf"]) >= mean(per_seed["finetune"]) + 5.0
    assert mean(per_seed["iwd"]) >= mean(per_seed["lwf"]) - 0.5


def test_grid_shapes():
    base = _spec("iwd", SEEDS[0])
    lambdas = grid_search(base, "lambda", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], workers=4)
    assert len(lambdas.rows) == 9
    taus = grid_search(base, "tau", [0.5, 1, 2, 3, 4, 5, 10], workers=4)
    assert len(taus.rows) == 7
    assert taus.best in taus.rows
