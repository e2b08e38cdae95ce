"""
Checkpoint files
Magic + version, a length-prefixed JSON header, then little-endian float64 payload.
The accumulated FisherState rides along so a continued run gets the same temperatures.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from errors import FormatError, SpecError
from iwd import FisherState
from model import LayerSpec, PoseModel, validate_layers
from tensor_core import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"CLPOSE"
VERSION = 1
_PREFIX = struct.Struct("<6sHI")


def save_checkpoint(path: Path, model: PoseModel, experience: int,
                    fisher: Optional[FisherState] = None) -> Path:
    path = Path(path)
    tensors = [(f"param/{name}", t.values) for name, t in model.params.items()]
    if fisher is not None:
        tensors += [(f"fisher/{name}", f) for name, f in fisher.per_param.items()]

    index, offset = [], 0
    for key, values in tensors:
        index.append({"key": key, "shape": list(values.shape), "offset": offset})
        offset += values.size * 8
    header = {
        "experience": experience,
        "keypoint_count": model.keypoint_count,
        "heatmap_grid": list(model.heatmap_grid),
        "schema_names": list(model.schema_names) if model.schema_names else None,
        "schema_id": model.schema_id,
        "layers": [vars(l) for l in model.layers],
        "tensors": index,
        "fisher": None if fisher is None else {
            "per_layer": fisher.per_layer,
            "sample_count": fisher.sample_count,
            "param_layers": fisher.param_layers,
        },
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for _, values in tensors:
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    tmp.replace(path)
    logger.debug("checkpoint written: %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: Path) -> Tuple[PoseModel, int, Optional[FisherState]]:
    """Returns (model, experience, fisher or None)"""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError("file too short for a checkpoint header", len(data))
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    start = _PREFIX.size
    end = start + header_len
    if end > len(data):
        raise FormatError("truncated checkpoint header", len(data))
    try:
        header = json.loads(data[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        pos = getattr(e, "pos", None) or getattr(e, "start", 0)
        raise FormatError(f"corrupt checkpoint header: {e}", start + pos) from e

    try:
        layers = [LayerSpec(**l) for l in header["layers"]]
        keypoint_count = int(header["keypoint_count"])
        grid = tuple(int(g) for g in header["heatmap_grid"])
        entries = list(header["tensors"])
        experience = int(header["experience"])
        schema_names = header.get("schema_names")
        schema_id = header.get("schema_id")
        validate_layers(layers, keypoint_count, grid)
    except SpecError as e:
        raise FormatError(f"checkpoint describes an invalid model: {e}", start) from e
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint header missing field: {e}", start) from e

    payload = memoryview(data)[end:]
    params, fisher_values = {}, {}
    spans = []
    for position, entry in enumerate(entries):
        try:
            key = str(entry["key"])
            shape = tuple(int(s) for s in entry["shape"])
            lo = entry["offset"]
            kind, name = key.split("/", 1)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed tensor entry {position}: {e!r}", start) from e
        if type(lo) is not int or lo < 0 or any(s < 0 for s in shape):
            raise FormatError(f"tensor {key}: bad offset {lo!r} or shape {shape}", start)
        hi = lo + (int(np.prod(shape)) if shape else 1) * 8
        if hi > len(payload):
            raise FormatError(f"truncated payload for {key}", end + len(payload))
        values = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64).reshape(shape)
        if kind == "param":
            params[name] = Tensor(values, name=name, requires_grad=True)
        elif kind == "fisher":
            fisher_values[name] = values
        else:
            raise FormatError(f"unknown tensor kind {kind!r}", start)
        spans.append((lo, hi, key))
    spans.sort()
    for (_, prev_hi, prev_key), (lo, _, key) in zip(spans, spans[1:]):
        if lo < prev_hi:
            raise FormatError(f"tensors {prev_key} and {key} overlap", end + lo)

    for l in layers:
        if l.kind != "dense":
            continue
        expected = {f"{l.name}.weight": (l.in_dim, l.out_dim), f"{l.name}.bias": (l.out_dim,)}
        for pname, shape in expected.items():
            if pname not in params:
                raise FormatError(f"checkpoint lacks {pname}", start)
            if params[pname].shape != shape:
                raise FormatError(f"{pname} has shape {params[pname].shape}, layer needs {shape}", start)
    model = PoseModel(layers, params, keypoint_count, grid,
                      tuple(schema_names) if schema_names else None, schema_id=schema_id)

    fisher = None
    meta = header.get("fisher")
    if meta is not None:
        try:
            fisher = FisherState(fisher_values, {k: float(v) for k, v in meta["per_layer"].items()},
                                 int(meta["sample_count"]), dict(meta["param_layers"]))
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed fisher metadata: {e!r}", start) from e
    logger.info("   ✅ Loaded checkpoint %s (experience %d, %d keypoints)", path, experience, keypoint_count)
    return model, experience, fisher
