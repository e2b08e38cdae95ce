"""Checkpoint files: exact reload, Fisher payload and corrupt input"""

import json
import struct

import numpy as np
import pytest

from checkpoint import MAGIC, load_checkpoint, save_checkpoint
from errors import FormatError
from iwd import FisherState
from model import build_model, expand_head, forward, reference_layers


def _model():
    model = build_model(reference_layers(3), 3, (8, 8), rng_seed=7, schema_names=("a", "b", "c"))
    return expand_head(model, 4, ("a", "b", "c", "d"))


def test_reload_is_exact(tmp_path, rng):
    model = _model()
    path = save_checkpoint(tmp_path / "exp.ckpt", model, 2)
    loaded, experience, fisher = load_checkpoint(path)
    assert experience == 2 and fisher is None
    assert loaded.schema_names == ("a", "b", "c", "d")
    assert loaded.keypoint_count == 4
    x = rng.random((3, 64))
    assert np.array_equal(forward(loaded, x).logits.values, forward(model, x).logits.values)
    assert not (tmp_path / "exp.ckpt.tmp").exists()


def test_fisher_rides_along(tmp_path):
    model = _model()
    per_param = {n: np.full(t.shape, 0.5) for n, t in model.params.items()}
    param_layers = {n: model.layer_of(n) for n in per_param}
    state = FisherState(per_param, {"head_out": 3.0}, 12, param_layers)
    _, _, fisher = load_checkpoint(save_checkpoint(tmp_path / "f.ckpt", model, 3, state))
    assert fisher.sample_count == 12
    assert fisher.per_layer == {"head_out": 3.0}
    assert np.array_equal(fisher.per_param["bb_fc1.weight"], per_param["bb_fc1.weight"])
    assert fisher.param_layers == param_layers


def test_truncated_file(tmp_path):
    path = save_checkpoint(tmp_path / "t.ckpt", _model(), 1)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(FormatError, match="truncated payload"):
        load_checkpoint(path)
    path.write_bytes(data[:5])
    with pytest.raises(FormatError) as exc:
        load_checkpoint(path)
    assert exc.value.offset == 5


def test_bad_magic_and_version(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", _model(), 1)
    data = bytearray(path.read_bytes())
    path.write_bytes(b"XXXXXX" + bytes(data[len(MAGIC):]))
    with pytest.raises(FormatError, match="bad magic"):
        load_checkpoint(path)
    data[len(MAGIC)] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version 9"):
        load_checkpoint(path)


def test_corrupt_header(tmp_path):
    path = save_checkpoint(tmp_path / "h.ckpt", _model(), 1)
    data = bytearray(path.read_bytes())
    data[12] = ord("}")
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def _rewrite_header(path, edit):
    data = path.read_bytes()
    magic, version, length = struct.unpack_from("<6sHI", data, 0)
    header = json.loads(data[12:12 + length])
    edit(header)
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<6sHI", magic, version, len(raw)) + raw + data[12 + length:])


def test_schema_id_is_stored(tmp_path):
    model = _model()
    model.schema_id = "coco17+mpii16"
    loaded, _, _ = load_checkpoint(save_checkpoint(tmp_path / "s.ckpt", model, 2))
    assert loaded.schema_id == "coco17+mpii16"


@pytest.mark.parametrize("edit", [
    lambda h: h["tensors"][0].pop("shape"),
    lambda h: h["tensors"][0].pop("key"),
    lambda h: h["tensors"][0].update(key="weights-without-kind"),
    lambda h: h["tensors"][0].update(shape="wide"),
    lambda h: h["tensors"][0].update(offset=-8),
    lambda h: h["tensors"][0].update(offset="0"),
    lambda h: h["tensors"][1].update(offset=h["tensors"][0]["offset"]),
    lambda h: h["tensors"][0].update(shape=[1, 1]),
    lambda h: h["layers"][0].update(kind="conv"),
    lambda h: h["layers"][0].update(width=3),
    lambda h: h.update(tensors=h["tensors"][1:]),
    lambda h: h.update(fisher={"per_layer": {}}),
    lambda h: h.pop("layers"),
])
def test_malformed_header_is_a_format_error(tmp_path, edit):
    path = save_checkpoint(tmp_path / "x.ckpt", _model(), 1)
    _rewrite_header(path, edit)
    with pytest.raises(FormatError) as exc:
        load_checkpoint(path)
    assert exc.value.exit_code == 3
