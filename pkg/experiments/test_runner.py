"""Scenario runner: metrics, training loop, strategy equivalences, sweeps and exports"""

import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_datasets, tiny_spec
from data import KeypointDataset, KeypointSchema, identity_mapping
from errors import ConfigError, ExperienceIndexError, ScenarioError, SchemaError, TrainingAbort, UsageError
from model import LayerSpec, build_model, expand_head, snapshot
from runner import (
    ExperienceResult,
    OptimizerSettings,
    ScenarioRunner,
    ScenarioSpec,
    average_accuracy,
    average_precision_from_oks,
    evaluate_oks_ap,
    evaluate_pck,
    forgetting,
    forgetting_curves,
    grid_search,
    lr_at,
    run_scenario,
    run_sequences,
    summary_dict,
    write_grid_csv,
    write_json,
    write_metrics_csv,
    write_sequences_csv,
)

# =============================================================================
# METRICS
# =============================================================================

ONE_POINT = KeypointSchema(("nose",), "fixture")


def _identity_model():
    model = build_model([LayerSpec("head_out", "dense", 4, 4, "head")], 1, (2, 2), rng_seed=0)
    model.params["head_out.weight"].values[...] = np.eye(4)
    return model


def _fixture_dataset(visible=1.0):
    inputs = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    keypoints = np.array([[[0.25, 0.25, visible]], [[0.25, 0.25, visible]]])
    return KeypointDataset("fixture", identity_mapping(ONE_POINT), inputs, np.zeros((2, 1, 2, 2)),
                           np.ones((2, 1)), keypoints, np.array([0.2, 0.2]))


def test_pck_half_hits():
    assert evaluate_pck(_identity_model(), _fixture_dataset(), alpha=0.5) == 50.0


def test_pck_without_visible_keypoints_is_zero():
    assert evaluate_pck(_identity_model(), _fixture_dataset(visible=0.0)) == 0.0


def test_pck_alpha_must_be_positive():
    with pytest.raises(ConfigError):
        evaluate_pck(_identity_model(), _fixture_dataset(), alpha=0.0)


def test_oks_ap_fixture():
    assert evaluate_oks_ap(_identity_model(), _fixture_dataset()) == pytest.approx(50.0)


def test_average_precision_thresholds():
    assert average_precision_from_oks([0.7]) == pytest.approx(50.0)
    assert average_precision_from_oks([1.0, 1.0]) == 100.0
    assert average_precision_from_oks([0.0]) == 0.0
    assert average_precision_from_oks([]) == 0.0


def test_score_needs_model_channels():
    dataset = _fixture_dataset()
    model = _identity_model()
    model.schema_names = ("left_eye",)
    with pytest.raises(SchemaError):
        evaluate_pck(model, dataset)


def _result():
    rows = [[68.0], [50.0, 70.0], [39.4, 60.0, 55.0]]
    return ExperienceResult(["a", "b", "c"], ["ap", "pck", "ap"], {"pck": rows, "ap": rows}, [], [17, 21, 21])


def test_average_accuracy_example():
    rows = [[70.0], [65.0, 82.0], [62.87, 81.53, 60.43]]
    result = ExperienceResult(["a", "b", "c"], ["ap", "pck", "ap"], {"pck": rows, "ap": rows}, [], [17, 21, 21])
    assert average_accuracy(result) == pytest.approx(68.27666666, abs=1e-6)


def test_forgetting_example():
    result = _result()
    assert forgetting(result, 0) == pytest.approx(28.6)
    assert forgetting(result, "b") == pytest.approx(10.0)
    assert forgetting(result, "c") == 0.0


def test_forgetting_unknown_dataset():
    with pytest.raises(ExperienceIndexError):
        forgetting(_result(), 5)
    with pytest.raises(ExperienceIndexError):
        forgetting(_result(), "nope")


def test_lr_schedules():
    settings = OptimizerSettings(lr=0.01)
    assert lr_at(settings, "constant", 7, 10) == 0.01
    assert lr_at(settings, "linear", 5, 10) == pytest.approx(0.005)
    assert lr_at(settings, "cosine_tail", 4, 10) == 0.01
    assert lr_at(settings, "cosine_tail", 5, 10) == pytest.approx(0.01)
    assert lr_at(settings, "cosine_tail", 9, 10) < 0.001


def test_spec_validation():
    with pytest.raises(ScenarioError):
        ScenarioSpec(datasets=())
    coco = tiny_datasets(("synthetic-coco",))[0]
    with pytest.raises(ScenarioError):
        ScenarioSpec(datasets=(coco, coco))
    with pytest.raises(ConfigError):
        OptimizerSettings(first_schedule="step")


# =============================================================================
# SCENARIOS
# =============================================================================

def test_single_experience_run():
    result = run_scenario(tiny_spec(names=("synthetic-mpii",)))
    assert len(result.matrix) == 1 and len(result.matrix[0]) == 1
    assert result.cumulative_counts == [16]
    assert 0.0 <= result.final_scores[0] <= 100.0
    # one cadence evaluation after epoch 1, then the final one
    assert [(r.epoch, r.metric) for r in result.history] == [(1, "pck"), (1, "ap"), (2, "pck"), (2, "ap")]


def test_reference_sequence_shapes():
    seen = []
    result = run_scenario(tiny_spec("lwf"), on_experience_end=lambda i, model, fisher: seen.append(
        (i, model.keypoint_count)))
    assert result.cumulative_counts == [17, 21, 21]
    assert seen == [(1, 17), (2, 21), (3, 21)]
    assert [len(row) for row in result.matrix] == [1, 2, 3]
    assert result.primary_metrics == ["ap", "pck", "ap"]


def test_same_seed_same_result():
    a = run_scenario(tiny_spec("iwd"))
    b = run_scenario(tiny_spec("iwd"))
    assert a.matrices == b.matrices
    assert [r.value for r in a.history] == [r.value for r in b.history]


def test_zero_lambda_matches_finetune():
    plain = run_scenario(tiny_spec("finetune"))
    for kind in ("iwd", "lwf", "ewc_online"):
        assert run_scenario(tiny_spec(kind, lam=0.0)).matrices == plain.matrices


def test_iwd_without_layer_term_matches_lwf():
    lwf = run_scenario(tiny_spec("lwf", lam=0.4, tau=2.0))
    iwd = run_scenario(tiny_spec("iwd", lam=0.4, tau=2.0, lambda_iwd=0.0))
    assert iwd.matrices == lwf.matrices


def _final_head(kind, **overrides):
    runner = ScenarioRunner(tiny_spec(kind, names=("synthetic-coco", "synthetic-mpii"), **overrides))
    runner.run()
    return runner.model.params["head_out.weight"].values


@pytest.mark.parametrize("kind", ["lwf", "ewc_separate", "lfl", "iwd"])
def test_regularizers_change_training(kind):
    assert not np.array_equal(_final_head(kind, lam=0.5), _final_head("finetune"))


@pytest.mark.parametrize("kind,anchors", [("ewc_separate", 2), ("ewc_online", 1), ("lwf", 0)])
def test_anchor_bookkeeping(kind, anchors):
    runner = ScenarioRunner(tiny_spec(kind))
    runner.run()
    assert len(runner.anchors) == anchors
    if kind != "lwf":
        assert runner.fisher is not None
        assert runner.fisher.per_param["head_out.weight"].shape == runner.model.params["head_out.weight"].shape


def test_modifiers_run_end_to_end():
    mods = {"progressive_unfreeze", "time_scaled_lambda", "teacher_output_scaling"}
    result = run_scenario(tiny_spec("lfl", modifiers=mods, output_scaling_target="both"))
    assert result.strategy_label.startswith("lfl+")
    assert all(np.isfinite(v) for row in result.matrix for v in row)


def test_context_required_after_first_experience():
    runner = ScenarioRunner(tiny_spec())
    model = build_model([LayerSpec("head_out", "dense", 64, 17 * 64, "head")], 17, (8, 8), rng_seed=0)
    train = runner.train_split(runner.steps[0])
    with pytest.raises(ScenarioError):
        runner.train_experience(model, train, 2, None, 1)


def test_nan_inputs_abort_with_location():
    runner = ScenarioRunner(tiny_spec(names=("synthetic-coco",)))
    train = runner.train_split(runner.steps[0])
    poisoned = replace(train, inputs=np.full_like(train.inputs, np.nan))
    model = build_model([LayerSpec("head_out", "dense", 64, 17 * 64, "head")], 17, (8, 8), rng_seed=0)
    with pytest.raises(TrainingAbort) as exc:
        runner.train_experience(model, poisoned, 1, None, 2)
    assert exc.value.diagnostics() == {"error": "TrainingAbort", "message": str(exc.value),
                                       "experience": 1, "epoch": 0, "batch": 0}


# =============================================================================
# SWEEPS AND EXPORTS
# =============================================================================

def test_grid_search_rows(tmp_path):
    spec = tiny_spec("lwf", names=("synthetic-coco", "synthetic-mpii"))
    grid = grid_search(spec, "lambda", [0.0, 0.5], workers=2)
    assert [r.value for r in grid.rows] == [0.0, 0.5]
    assert grid.best in grid.rows
    assert set(grid.rows[0].finals) == {"synthetic-coco", "synthetic-mpii"}
    path = write_grid_csv(grid, tmp_path / "grid.csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["lambda", "average_accuracy", "synthetic-coco", "synthetic-mpii"]
    assert len(rows) == 3


def test_grid_search_rejects_bad_requests():
    spec = tiny_spec("lwf", names=("synthetic-coco",))
    with pytest.raises(UsageError):
        grid_search(spec, "gamma", [0.5])
    with pytest.raises(UsageError):
        grid_search(spec, "lambda", [])


def test_grid_row_matches_direct_run():
    spec = tiny_spec("lwf", names=("synthetic-coco", "synthetic-mpii"))
    grid = grid_search(spec, "tau", [3.0])
    direct = run_scenario(replace(spec, strategy=replace(spec.strategy, tau=3.0)))
    assert grid.rows[0].average_accuracy == average_accuracy(direct)


def test_sequences_cover_every_order(tmp_path):
    spec = tiny_spec("finetune", names=("synthetic-coco", "synthetic-mpii"))
    rows = run_sequences(spec, workers=2)
    assert {r.order for r in rows} == {("synthetic-coco", "synthetic-mpii"), ("synthetic-mpii", "synthetic-coco")}
    assert rows[0].average_accuracy >= rows[1].average_accuracy
    lines = list(csv.reader(open(write_sequences_csv(rows, tmp_path / "seq.csv"))))
    assert lines[0] == ["rank", "sequence", "average_accuracy", "final_scores"]
    assert lines[1][0] == "1"


def test_sequences_limit():
    five = tiny_datasets() + (tiny_datasets(("synthetic-halpe",))[0],
                              replace(tiny_datasets(("synthetic-coco",))[0], name="coco-copy"))
    spec = replace(tiny_spec(), datasets=five)
    with pytest.raises(ScenarioError):
        run_sequences(spec)


def test_exports(tmp_path):
    result = run_scenario(tiny_spec("ewc_online", names=("synthetic-coco", "synthetic-mpii")))
    path = write_metrics_csv(result, tmp_path / "metrics.csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["experience", "epoch", "dataset", "metric", "value"]
    assert len(rows) - 1 == len(result.history)

    summary = summary_dict(result)
    assert "wall_clock" not in summary
    assert summary["cumulative_keypoints"] == [17, 21]
    assert summary["average_accuracy"] == average_accuracy(result)
    assert set(summary["forgetting"]) == {"synthetic-coco", "synthetic-mpii"}

    curves = forgetting_curves(result)
    assert [p["experience"] for p in curves["synthetic-coco"]][-1] == 2
    assert all(p["experience"] == 2 for p in curves["synthetic-mpii"])

    out = write_json(summary, tmp_path / "summary.json")
    assert json.loads(out.read_text()) == json.loads(json.dumps(summary))
    assert not (tmp_path / "summary.json.tmp").exists()


def test_iwd_without_layer_term_writes_identical_metrics(tmp_path):
    lwf = run_scenario(tiny_spec("lwf", lam=0.4))
    iwd = run_scenario(tiny_spec("iwd", lam=0.4, lambda_iwd=0.0))
    a = write_metrics_csv(lwf, tmp_path / "lwf.csv").read_bytes()
    b = write_metrics_csv(iwd, tmp_path / "iwd.csv").read_bytes()
    assert a == b


def test_head_expansion_keeps_first_dataset_scores():
    captured = {}
    runner = ScenarioRunner(tiny_spec(names=("synthetic-coco", "synthetic-mpii")),
                            on_experience_end=lambda i, model, fisher: captured.setdefault(i, snapshot(model)))
    runner.run()
    first = captured[1].model
    coco, union = runner.steps[0], runner.steps[1].cumulative
    before = runner.val_split(coco.config, coco.cumulative)
    after = runner.val_split(coco.config, union)
    grown = expand_head(first, union.count, union.names)
    assert evaluate_pck(grown, after) == evaluate_pck(first, before)
    assert evaluate_oks_ap(grown, after) == evaluate_oks_ap(first, before)


def test_three_datasets_give_six_orderings():
    rows = run_sequences(tiny_spec("finetune"), workers=3)
    assert len(rows) == 6
    assert len({r.order for r in rows}) == 6
    scores = [r.average_accuracy for r in rows]
    assert scores == sorted(scores, reverse=True)


def test_progressive_unfreeze_freezes_backbone_through_the_model():
    spec = replace(tiny_spec("lwf", names=("synthetic-coco", "synthetic-mpii"),
                             modifiers={"progressive_unfreeze"}), epochs=1)
    weights, frozen = {}, {}

    def capture(i, model, fisher):
        weights[i] = {n: t.values.copy() for n, t in model.params.items()}
        frozen[i] = set(model.frozen_layers)

    run_scenario(spec, on_experience_end=capture)
    assert frozen == {1: set(), 2: {"bb_fc1", "bb_fc2"}}
    for name in ("bb_fc1.weight", "bb_fc1.bias", "bb_fc2.weight", "bb_fc2.bias"):
        assert np.array_equal(weights[1][name], weights[2][name]), name
    old_head = weights[1]["head_out.weight"]
    assert not np.array_equal(weights[2]["head_out.weight"][:, :old_head.shape[1]], old_head)


@pytest.mark.parametrize("mode", ["importance", "fixed", "depth"])
def test_temperature_modes_drive_layer_temperatures(mode):
    runner = ScenarioRunner(tiny_spec("iwd", names=("synthetic-coco", "synthetic-mpii"), temperature_mode=mode))
    seen = []
    original = runner._build_context

    def spy(teacher, old_channels):
        context = original(teacher, old_channels)
        seen.append(context)
        return context

    runner._build_context = spy
    result = runner.run()
    assert all(np.isfinite(v) for row in result.matrix for v in row)
    (context,) = seen
    temps = context.temperatures.per_layer
    assert list(temps) == [l.name for l in runner.model.layers]
    if mode == "fixed":
        assert set(temps.values()) == {2.0}
        assert context.fisher is None
    elif mode == "depth":
        values = list(temps.values())
        assert values == sorted(values, reverse=True) and values[0] > values[-1]
        assert context.fisher is None
    else:
        assert context.fisher is not None
    label = "iwd" if mode == "importance" else f"iwd-{mode}"
    assert result.strategy_label == label
