"""
Importance-Weighted Distillation
Fisher importance per parameter and per layer, importance-scaled temperatures,
and the layer-wise distillation penalty
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from errors import ConfigError, DataError, DimensionError, RegistryError
from model import ForwardTrace, PoseModel, forward
from tensor_core import (
    Tape,
    Tensor,
    add,
    backward,
    distillation_kl,
    index_select,
    reshape,
    scale,
    transpose,
    zeros_scalar,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE_CLAMP = (0.25, 16.0)
SOFTMAX_DOMAINS = ("flatten", "channel")
TEMPERATURE_MODES = ("importance", "fixed", "depth")


@dataclass
class FisherState:
    per_param: Dict[str, np.ndarray]
    per_layer: Dict[str, float] = field(default_factory=dict)
    sample_count: int = 0
    param_layers: Dict[str, str] = field(default_factory=dict)

    def total(self) -> float:
        return float(sum(float(np.sum(v)) for v in self.per_param.values()))

    def padded_to(self, model: PoseModel) -> "FisherState":
        """Zero-extend importances of widened parameters (expanded head)"""
        padded = {}
        for name, f in self.per_param.items():
            if name not in model.params:
                raise RegistryError(f"fisher parameter {name} missing from model")
            target = model.params[name].shape
            if f.shape == target:
                padded[name] = f.copy()
                continue
            if f.ndim != len(target) or any(a > b for a, b in zip(f.shape, target)):
                raise RegistryError(f"cannot widen fisher {name} from {f.shape} to {target}")
            grown = np.zeros(target)
            grown[tuple(slice(0, s) for s in f.shape)] = f
            padded[name] = grown
        state = FisherState(padded, {}, self.sample_count, dict(self.param_layers))
        if self.per_layer:
            state.per_layer = layer_sums(padded, state.param_layers, self.per_layer.keys())
        return state


@dataclass(frozen=True)
class LayerTemperatures:
    per_layer: Dict[str, float]
    tau: float
    clamp: Tuple[float, float]
    raw_importance: Dict[str, float]


def layer_sums(per_param: Dict[str, np.ndarray], param_layers: Dict[str, str], layers) -> Dict[str, float]:
    sums = {name: 0.0 for name in layers}
    for pname, f in per_param.items():
        layer = param_layers.get(pname)
        if layer is None or layer not in sums:
            raise RegistryError(f"parameter {pname} belongs to no known layer")
        sums[layer] += float(np.sum(f))
    return sums


def fisher_per_param(model: PoseModel, dataset, loss_fn: Callable[[Tensor, np.ndarray, np.ndarray], Tensor],
                     max_samples: int = 512) -> FisherState:
    """Mean over samples of squared per-sample gradients of the keypoint loss"""
    if len(dataset) == 0:
        raise DataError("fisher estimation needs a non-empty dataset")
    if max_samples < 1:
        raise ConfigError("max_samples must be at least 1")
    n = min(len(dataset), max_samples)
    acc = {name: np.zeros(t.shape) for name, t in model.params.items()}
    for i in range(n):
        with Tape() as tape:
            trace = forward(model, dataset.inputs[i:i + 1], capture=False)
            loss = loss_fn(trace.logits, dataset.targets[i:i + 1], dataset.masks[i:i + 1])
        grads = backward(tape, loss, params=model.params.values())
        for name, g in grads.items():
            acc[name] += g * g
    per_param = {name: a / n for name, a in acc.items()}
    logger.info("   ✅ Fisher estimated on %d samples of %s", n, getattr(dataset, "name", "dataset"))
    return FisherState(per_param, {}, n, {})


def fisher_per_layer(fisher: FisherState, model: PoseModel) -> FisherState:
    """F_layer = sum of F_k over the layer's parameters; parameter-free layers get 0"""
    param_layers = {}
    for pname in fisher.per_param:
        if pname not in model.params:
            raise RegistryError(f"parameter {pname} belongs to no layer of the model")
        param_layers[pname] = model.layer_of(pname)
    per_layer = layer_sums(fisher.per_param, param_layers, [l.name for l in model.layers])
    return FisherState(fisher.per_param, per_layer, fisher.sample_count, param_layers)


def normalized_importance(fisher: FisherState) -> Dict[str, float]:
    """Layer importances rescaled to mean 1 over the layers with nonzero importance"""
    live = [v for v in fisher.per_layer.values() if v > 0]
    if not live:
        return {name: 0.0 for name in fisher.per_layer}
    mean = sum(live) / len(live)
    return {name: v / mean for name, v in fisher.per_layer.items()}


def layer_temperatures(fisher: FisherState, tau: float,
                       clamp: Tuple[float, float] = DEFAULT_TEMPERATURE_CLAMP) -> LayerTemperatures:
    """tau_l = tau / normalized F_l, clamped; dead layers get the upper clamp"""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    lo, hi = clamp
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid temperature clamp {clamp}")
    if not fisher.per_layer:
        raise RegistryError("layer importances missing; run fisher_per_layer first")
    norm = normalized_importance(fisher)
    temps = {}
    for name, f in norm.items():
        temps[name] = hi if f <= 0 else min(max(tau / f, lo), hi)
    return LayerTemperatures(temps, tau, (lo, hi), dict(fisher.per_layer))


def uniform_temperatures(layers, tau: float) -> LayerTemperatures:
    return LayerTemperatures({name: tau for name in layers}, tau, (tau, tau), {name: 1.0 for name in layers})


def depth_temperatures(layers, tau: float,
                       clamp: Tuple[float, float] = DEFAULT_TEMPERATURE_CLAMP) -> LayerTemperatures:
    """Layer position stands in for importance: deeper layers get sharper targets

    The l-th layer (1-based, input first) has importance l, normalized to mean 1 like
    the Fisher path, then tau_l = clamp(tau / importance).
    """
    names = list(layers)
    if not names:
        raise RegistryError("no layers to assign temperatures to")
    depth = {name: float(i) for i, name in enumerate(names, 1)}
    return layer_temperatures(FisherState({}, depth), tau, clamp)

def iwd_penalty(trace_cur: ForwardTrace, trace_teacher: ForwardTrace, temps: LayerTemperatures,
                softmax_domain: str = "flatten") -> Tensor:
    """Mean over layers of the per-layer tau_l^2 * KL(teacher || student), each averaged over rows

    The head layer is always split into one spatial distribution per keypoint, on the
    teacher's channels only. Intermediate layers follow `softmax_domain`: `flatten` gives
    one distribution per sample over all units, `channel` one distribution per unit over
    the batch.
    """
    if softmax_domain not in SOFTMAX_DOMAINS:
        raise ConfigError(f"unknown softmax domain {softmax_domain!r}")
    if not temps.per_layer:
        return zeros_scalar()
    total = None
    for name, tau_l in temps.per_layer.items():
        if name not in trace_cur.outputs or name not in trace_teacher.outputs:
            raise RegistryError(f"layer {name} missing from the captured traces")
        student = trace_cur.outputs[name]
        teacher = trace_teacher.outputs[name].values
        if student.values.ndim != 2 or teacher.ndim != 2 or student.shape[0] != teacher.shape[0]:
            raise DimensionError(f"layer {name}: student {student.shape} vs teacher {teacher.shape}")
        width = teacher.shape[1]
        if student.shape[1] != width:
            if name != trace_cur.head_layer or student.shape[1] < width:
                raise DimensionError(f"layer {name}: student width {student.shape[1]} vs teacher {width}")
            student = index_select(student, range(width), axis=1)
        if name == trace_cur.head_layer:
            cells = trace_cur.heatmap_grid[0] * trace_cur.heatmap_grid[1]
            if width % cells:
                raise DimensionError(f"head width {width} is not a multiple of {cells} heatmap cells")
            rows = teacher.shape[0] * (width // cells)
            student = reshape(student, (rows, cells))
            teacher = teacher.reshape(rows, cells)
        elif softmax_domain == "channel":
            student = transpose(student)
            teacher = teacher.T
        term = distillation_kl(teacher, student, tau_l)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(temps.per_layer))


def iwd_regularizer(lwf_term: Tensor, iwd_term: Optional[Tensor], lambda_iwd: float) -> Tensor:
    """LwF loss plus lambda_iwd times the layer-wise term"""
    if lambda_iwd < 0:
        raise ConfigError(f"lambda_iwd must be non-negative, got {lambda_iwd}")
    if lambda_iwd == 0 or iwd_term is None:
        return lwf_term
    return add(lwf_term, scale(iwd_term, lambda_iwd))
