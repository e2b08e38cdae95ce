"""Pose model: building, forward capture, head expansion, snapshots and freezing"""

import numpy as np
import pytest

from errors import DimensionError, ExpansionError, LayerLookupError, SpecError
from model import (
    LayerSpec,
    build_model,
    expand_head,
    forward,
    reference_layers,
    set_layer_trainable,
    snapshot,
    unfreeze_schedule,
)
from tensor_core import AdamW, Tape, backward, reduce_sum, square

GRID = (8, 8)


def _inputs(rng, n=4):
    return rng.random((n, 64))


def test_build_is_deterministic():
    a = build_model(reference_layers(17), 17, GRID, rng_seed=22)
    b = build_model(reference_layers(17), 17, GRID, rng_seed=22)
    assert all(np.array_equal(a.params[k].values, b.params[k].values) for k in a.params)


def test_reference_param_count():
    k = 17
    model = build_model(reference_layers(k), k, GRID, rng_seed=22)
    expected = 64 * 48 + 48 + 48 * 32 + 32 + 32 * (k * 64) + k * 64
    assert model.param_count() == expected


def test_biases_start_at_zero_and_weights_are_bounded():
    model = build_model(reference_layers(17), 17, GRID, rng_seed=3)
    assert not model.params["bb_fc1.bias"].values.any()
    assert np.abs(model.params["bb_fc1.weight"].values).max() <= np.sqrt(6.0 / 64)


def test_head_width_must_match_keypoints():
    with pytest.raises(SpecError):
        build_model(reference_layers(17), 16, GRID, rng_seed=22)


def test_broken_dim_chain_names_the_pair():
    layers = [
        LayerSpec("bb_fc1", "dense", 64, 48, "backbone"),
        LayerSpec("bb_fc2", "dense", 40, 32, "backbone"),
        LayerSpec("head_out", "dense", 32, 64, "head"),
    ]
    with pytest.raises(SpecError) as exc:
        build_model(layers, 1, GRID, rng_seed=0)
    assert "bb_fc1" in str(exc.value) and "bb_fc2" in str(exc.value)


def test_head_group_must_close_the_model():
    layers = [
        LayerSpec("head_a", "dense", 64, 64, "head"),
        LayerSpec("bb", "dense", 64, 64, "backbone"),
    ]
    with pytest.raises(SpecError):
        build_model(layers, 1, GRID, rng_seed=0)


def test_forward_shapes_and_capture(rng):
    model = build_model(reference_layers(17), 17, GRID, rng_seed=22)
    trace = forward(model, _inputs(rng))
    assert trace.logits.shape == (4, 17, 8, 8)
    assert set(trace.outputs) == {l.name for l in model.layers}
    lean = forward(model, _inputs(rng), capture=False)
    assert set(lean.outputs) == {"head_out"}


def test_forward_rejects_wrong_width(rng):
    model = build_model(reference_layers(17), 17, GRID, rng_seed=22)
    with pytest.raises(DimensionError):
        forward(model, rng.random((2, 63)))


def test_zero_weights_give_zero_logits(rng):
    model = build_model(reference_layers(2), 2, GRID, rng_seed=22)
    for t in model.params.values():
        t.values[...] = 0.0
    assert not forward(model, _inputs(rng)).logits.values.any()


def test_identity_model_reshapes_input(rng):
    model = build_model([LayerSpec("head_out", "dense", 4, 4, "head")], 1, (2, 2), rng_seed=0)
    model.params["head_out.weight"].values[...] = np.eye(4)
    x = rng.random((3, 4))
    assert np.array_equal(forward(model, x).logits.values, x.reshape(3, 1, 2, 2))


def test_expand_head_preserves_old_channels(rng):
    model = build_model(reference_layers(17), 17, GRID, rng_seed=22)
    x = _inputs(rng, 6)
    before = forward(model, x).logits.values
    grown = expand_head(model, 21)
    after = forward(grown, x).logits.values
    assert after.shape == (6, 21, 8, 8)
    assert np.array_equal(after[:, :17], before)
    assert np.all(after[:, 17:] == 0.0)
    # the source model is left untouched
    assert model.keypoint_count == 17
    assert model.params["head_out.weight"].shape == (32, 17 * 64)


def test_expand_head_requires_growth():
    model = build_model(reference_layers(17), 17, GRID, rng_seed=22)
    with pytest.raises(ExpansionError):
        expand_head(model, 17)
    with pytest.raises(ExpansionError):
        expand_head(model, 12)


def _train_steps(model, x, steps):
    opt = AdamW(lr=0.05)
    for _ in range(steps):
        with Tape() as tape:
            loss = reduce_sum(square(forward(model, x).logits))
        grads = backward(tape, loss, params=model.params.values())
        opt.step(model.params, grads, model.frozen_params())


def test_snapshot_is_isolated_from_training(rng):
    model = build_model(reference_layers(3), 3, GRID, rng_seed=22)
    x = _inputs(rng)
    snap = snapshot(model, experience=1)
    reference = forward(snap, x).logits.values.copy()
    _train_steps(model, x, 10)
    assert not np.array_equal(forward(model, x).logits.values, reference)
    assert np.array_equal(forward(snap, x).logits.values, reference)
    assert not snap.model.params["head_out.weight"].values.flags.writeable


def test_snapshot_of_snapshot_matches(rng):
    model = build_model(reference_layers(3), 3, GRID, rng_seed=22)
    snap = snapshot(model, experience=2)
    again = snapshot(snap)
    x = _inputs(rng)
    assert again.experience == 2
    assert np.array_equal(forward(snap, x).logits.values, forward(again, x).logits.values)


def test_snapshot_forward_records_nothing(rng):
    snap = snapshot(build_model(reference_layers(3), 3, GRID, rng_seed=22))
    with Tape() as tape:
        forward(snap, _inputs(rng))
    assert len(tape) == 0


def test_freezing_all_layers_keeps_params(rng):
    model = build_model(reference_layers(3), 3, GRID, rng_seed=22)
    for l in model.layers:
        set_layer_trainable(model, l.name, False)
    before = {k: t.values.copy() for k, t in model.params.items()}
    _train_steps(model, _inputs(rng), 5)
    assert all(np.array_equal(before[k], model.params[k].values) for k in before)


def test_freezing_backbone_only_moves_head(rng):
    model = build_model(reference_layers(3), 3, GRID, rng_seed=22)
    for name in ("bb_fc1", "bb_relu1", "bb_fc2", "bb_relu2"):
        set_layer_trainable(model, name, False)
    before = {k: t.values.copy() for k, t in model.params.items()}
    _train_steps(model, _inputs(rng), 1)
    assert np.array_equal(before["bb_fc1.weight"], model.params["bb_fc1.weight"].values)
    assert not np.array_equal(before["head_out.weight"], model.params["head_out.weight"].values)


def test_unknown_layer_lookup():
    model = build_model(reference_layers(3), 3, GRID, rng_seed=22)
    with pytest.raises(LayerLookupError):
        set_layer_trainable(model, "nope", False)


def test_unfreeze_schedule_four_dense_layers():
    layers = reference_layers(2, GRID, 64, hidden=(48, 40, 32))
    model = build_model(layers, 2, GRID, rng_seed=0)
    schedule = unfreeze_schedule(model, 50)
    assert schedule == {"head_out": 0, "bb_fc3": 13, "bb_fc2": 25, "bb_fc1": 38}


def test_parameters_partition_into_layers():
    model = build_model(reference_layers(5), 5, GRID, rng_seed=1)
    per_layer = sum(model.params[p].size for l in model.layers for p in model.layer_params(l.name))
    assert per_layer == model.param_count()
    assert model.layer_params("bb_relu1") == []
