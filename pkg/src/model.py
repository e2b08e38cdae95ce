"""
Pose Model - dense backbone + heatmap head
Named layers, per-layer output capture, teacher snapshots and head expansion
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from errors import DimensionError, ExpansionError, LayerLookupError, SpecError
from tensor_core import Tensor, add_bias, as_tensor, matmul, relu, reshape, scale

logger = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "activation")
LAYER_GROUPS = ("backbone", "head")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_dim: int
    out_dim: int
    group: str


def reference_layers(keypoint_count: int, heatmap_grid: Tuple[int, int] = (8, 8),
                     in_dim: int = 64, hidden: Sequence[int] = (48, 32)) -> List[LayerSpec]:
    """Backbone in_dim -> hidden... with ReLUs, then one dense head to K*Hg*Wg"""
    layers = []
    prev = in_dim
    for i, width in enumerate(hidden, 1):
        layers.append(LayerSpec(f"bb_fc{i}", "dense", prev, width, "backbone"))
        layers.append(LayerSpec(f"bb_relu{i}", "activation", width, width, "backbone"))
        prev = width
    hg, wg = heatmap_grid
    layers.append(LayerSpec("head_out", "dense", prev, keypoint_count * hg * wg, "head"))
    return layers


def validate_layers(layers: Sequence[LayerSpec], keypoint_count: int, heatmap_grid: Tuple[int, int]):
    if not layers:
        raise SpecError("model needs at least one layer")
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise SpecError(f"layer names must be unique: {names}")
    for l in layers:
        if "." in l.name:
            raise SpecError(f"layer name {l.name!r} may not contain '.'")
        if l.kind not in LAYER_KINDS:
            raise SpecError(f"layer {l.name}: unknown kind {l.kind!r}")
        if l.group not in LAYER_GROUPS:
            raise SpecError(f"layer {l.name}: unknown group {l.group!r}")
        if l.in_dim <= 0 or l.out_dim <= 0:
            raise SpecError(f"layer {l.name}: dims must be positive")
        if l.kind == "activation" and l.in_dim != l.out_dim:
            raise SpecError(f"activation layer {l.name} must keep its width")
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise SpecError(f"dim chain broken between {a.name} ({a.out_dim}) and {b.name} ({b.in_dim})")
    groups = [l.group for l in layers]
    if "head" not in groups:
        raise SpecError("model has no head layers")
    first_head = groups.index("head")
    if any(g != "head" for g in groups[first_head:]):
        raise SpecError("head layers must form one contiguous group at the end")
    last = layers[-1]
    hg, wg = heatmap_grid
    if last.kind != "dense":
        raise SpecError(f"final layer {last.name} must be dense")
    if last.out_dim != keypoint_count * hg * wg:
        raise SpecError(
            f"head output {last.out_dim} != K*Hg*Wg = {keypoint_count}*{hg}*{wg}"
        )


@dataclass
class PoseModel:
    layers: List[LayerSpec]
    params: Dict[str, Tensor]
    keypoint_count: int
    heatmap_grid: Tuple[int, int]
    schema_names: Optional[Tuple[str, ...]] = None
    frozen_layers: Set[str] = field(default_factory=set)
    schema_id: Optional[str] = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def head_layer(self) -> str:
        return self.layers[-1].name

    @property
    def feature_layer(self) -> str:
        """Last backbone layer, whose output is the feature vector f(x)"""
        backbone = [l.name for l in self.layers if l.group == "backbone"]
        if not backbone:
            raise LayerLookupError("model has no backbone layers")
        return backbone[-1]

    @property
    def cells(self) -> int:
        return self.heatmap_grid[0] * self.heatmap_grid[1]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise LayerLookupError(f"unknown layer {name!r}")

    def layer_params(self, name: str) -> List[str]:
        return [p for p in self.params if self.layer_of(p) == name]

    def layer_of(self, param_name: str) -> str:
        return param_name.split(".", 1)[0]

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def frozen_params(self) -> List[str]:
        return [p for p in self.params if self.layer_of(p) in self.frozen_layers]

    def dense_layers(self) -> List[str]:
        return [l.name for l in self.layers if l.kind == "dense"]


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of a model taken at the end of an experience"""

    model: PoseModel
    experience: Optional[int] = None


@dataclass
class ForwardTrace:
    outputs: Dict[str, Tensor]
    logits: Tensor
    head_layer: str
    heatmap_grid: Tuple[int, int]


def build_model(layers: Sequence[LayerSpec], keypoint_count: int, heatmap_grid: Tuple[int, int],
                rng_seed: int, schema_names: Optional[Sequence[str]] = None) -> PoseModel:
    """He-uniform dense weights, zero biases, all drawn from one seeded generator"""
    layers = list(layers)
    validate_layers(layers, keypoint_count, heatmap_grid)
    rng = np.random.default_rng(rng_seed)
    params: Dict[str, Tensor] = {}
    for l in layers:
        if l.kind != "dense":
            continue
        limit = np.sqrt(6.0 / l.in_dim)
        params[f"{l.name}.weight"] = Tensor(rng.uniform(-limit, limit, size=(l.in_dim, l.out_dim)),
                                            name=f"{l.name}.weight", requires_grad=True)
        params[f"{l.name}.bias"] = Tensor(np.zeros(l.out_dim), name=f"{l.name}.bias", requires_grad=True)
    model = PoseModel(layers, params, keypoint_count, tuple(heatmap_grid),
                      tuple(schema_names) if schema_names is not None else None)
    logger.debug("built model: %d layers, %d parameters", len(layers), model.param_count())
    return model


def forward(model: Union[PoseModel, Snapshot], inputs, capture: bool = True,
            layer_scales: Optional[Dict[str, float]] = None) -> ForwardTrace:
    """Run the model on a [batch, in_dim] input

    With capture=False only the head output is kept in `outputs`.
    `layer_scales` multiplies a layer's output by a constant before the next layer.
    """
    net = model.model if isinstance(model, Snapshot) else model
    x = as_tensor(inputs)
    if x.values.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match in_dim {net.in_dim}")
    outputs: Dict[str, Tensor] = {}
    h = x
    for l in net.layers:
        if l.kind == "dense":
            h = add_bias(matmul(h, net.params[f"{l.name}.weight"]), net.params[f"{l.name}.bias"])
        else:
            h = relu(h)
        if layer_scales and l.name in layer_scales:
            h = scale(h, layer_scales[l.name])
        if capture or l.name == net.head_layer:
            outputs[l.name] = h
    hg, wg = net.heatmap_grid
    logits = reshape(h, (x.shape[0], net.keypoint_count, hg, wg))
    return ForwardTrace(outputs, logits, net.head_layer, net.heatmap_grid)


def expand_head(model: PoseModel, new_keypoint_count: int,
                schema_names: Optional[Sequence[str]] = None) -> PoseModel:
    """Widen the final projection to K' keypoints; new rows start at exactly zero"""
    k = model.keypoint_count
    if new_keypoint_count <= k:
        raise ExpansionError(f"expansion needs K' > K, got {new_keypoint_count} <= {k}")
    cells = model.cells
    head = model.layers[-1]
    old_width = k * cells
    new_width = new_keypoint_count * cells

    params = {name: Tensor(t.values, name=name, requires_grad=True) for name, t in model.params.items()}
    w_old = model.params[f"{head.name}.weight"].values
    b_old = model.params[f"{head.name}.bias"].values
    w = np.zeros((head.in_dim, new_width))
    w[:, :old_width] = w_old
    b = np.zeros(new_width)
    b[:old_width] = b_old
    params[f"{head.name}.weight"] = Tensor(w, name=f"{head.name}.weight", requires_grad=True)
    params[f"{head.name}.bias"] = Tensor(b, name=f"{head.name}.bias", requires_grad=True)

    layers = model.layers[:-1] + [replace(head, out_dim=new_width)]
    names = tuple(schema_names) if schema_names is not None else model.schema_names
    logger.info("   ✅ Head expanded: %d → %d keypoints", k, new_keypoint_count)
    return PoseModel(layers, params, new_keypoint_count, model.heatmap_grid, names, set(model.frozen_layers),
                     model.schema_id)


def snapshot(model: Union[PoseModel, Snapshot], experience: Optional[int] = None) -> Snapshot:
    net = model.model if isinstance(model, Snapshot) else model
    if experience is None and isinstance(model, Snapshot):
        experience = model.experience
    params = {}
    for name, t in net.params.items():
        frozen = Tensor(t.values, name=name, requires_grad=False)
        frozen.values.flags.writeable = False
        params[name] = frozen
    copy_ = PoseModel(list(net.layers), params, net.keypoint_count, net.heatmap_grid,
                      net.schema_names, set(), net.schema_id)
    return Snapshot(copy_, experience)


def set_layer_trainable(model: PoseModel, layer_name: str, trainable: bool) -> None:
    """Frozen layers still get gradients; the optimizer just skips them"""
    model.layer(layer_name)
    if trainable:
        model.frozen_layers.discard(layer_name)
    else:
        model.frozen_layers.add(layer_name)


def unfreeze_schedule(model: PoseModel, total_epochs: int) -> Dict[str, int]:
    """Epoch at which each dense layer becomes trainable, output layer first

    The l-th dense layer counted from the output unfreezes at ceil(l * E / n).
    """
    dense = list(reversed(model.dense_layers()))
    n = len(dense)
    return {name: -(-l * total_epochs // n) for l, name in enumerate(dense)}
