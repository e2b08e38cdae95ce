"""
Regularization Strategies
Total-loss composition, keypoint loss, EWC (separate / online), LFL, LwF and IWD,
plus the training-time modifiers (progressive unfreeze, time-scaled lambda,
teacher output scaling)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from errors import ChannelError, ConfigError, DimensionError, RegistryError
from iwd import (
    DEFAULT_TEMPERATURE_CLAMP,
    SOFTMAX_DOMAINS,
    TEMPERATURE_MODES,
    FisherState,
    LayerTemperatures,
    iwd_penalty,
    iwd_regularizer,
    layer_sums,
    normalized_importance,
)
from model import ForwardTrace, PoseModel, Snapshot, unfreeze_schedule
from tensor_core import (
    Tensor,
    add,
    as_tensor,
    distillation_kl,
    index_select,
    mse,
    mul,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    square,
    sub,
    zeros_scalar,
)

logger = logging.getLogger(__name__)

STRATEGY_KINDS = ("finetune", "ewc_separate", "ewc_online", "lfl", "lwf", "iwd")
MODIFIERS = ("progressive_unfreeze", "time_scaled_lambda", "teacher_output_scaling")
OUTPUT_SCALING_TARGETS = ("teacher", "both")

DEFAULT_LAMBDA = {
    "finetune": 0.0,
    "ewc_online": 0.2,
    "ewc_separate": 0.3,
    "lfl": 0.4,
    "lwf": 0.4,
    "iwd": 0.2,
}


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "finetune"
    lam: Optional[float] = None
    tau: float = 2.0
    gamma: float = 0.7
    lambda_iwd: float = 1.0
    modifiers: FrozenSet[str] = frozenset()
    output_scaling_target: str = "teacher"
    temperature_clamp: Tuple[float, float] = DEFAULT_TEMPERATURE_CLAMP
    iwd_softmax_domain: str = "flatten"
    temperature_mode: str = "importance"
    fisher_samples: int = 512

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {', '.join(STRATEGY_KINDS)}")
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.kind])
        object.__setattr__(self, "modifiers", frozenset(self.modifiers))
        object.__setattr__(self, "temperature_clamp", tuple(self.temperature_clamp))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lambda_iwd < 0:
            raise ConfigError(f"lambda_iwd must be non-negative, got {self.lambda_iwd}")
        unknown = self.modifiers - set(MODIFIERS)
        if unknown:
            raise ConfigError(f"unknown modifiers: {sorted(unknown)}")
        if self.output_scaling_target not in OUTPUT_SCALING_TARGETS:
            raise ConfigError(f"output_scaling_target must be teacher or both, got {self.output_scaling_target!r}")
        lo, hi = self.temperature_clamp
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid temperature clamp {self.temperature_clamp}")
        if self.iwd_softmax_domain not in SOFTMAX_DOMAINS:
            raise ConfigError(f"iwd_softmax_domain must be one of {SOFTMAX_DOMAINS}")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise ConfigError(f"temperature_mode must be one of {TEMPERATURE_MODES}, got {self.temperature_mode!r}")
        if self.fisher_samples < 1:
            raise ConfigError("fisher_samples must be at least 1")

    @property
    def needs_fisher(self) -> bool:
        if self.kind in ("ewc_separate", "ewc_online") or "teacher_output_scaling" in self.modifiers:
            return True
        return self.kind == "iwd" and self.temperature_mode == "importance"

    @property
    def label(self) -> str:
        kind = self.kind
        if kind == "iwd" and self.temperature_mode != "importance":
            kind = f"iwd-{self.temperature_mode}"
        return "+".join([kind] + sorted(self.modifiers))


@dataclass(frozen=True)
class EwcAnchor:
    """Parameters and importances captured at the end of one past experience"""

    theta: Dict[str, np.ndarray]
    fisher: FisherState


@dataclass
class RegContext:
    teacher: Snapshot
    anchors: List[EwcAnchor] = field(default_factory=list)
    fisher: Optional[FisherState] = None
    temperatures: Optional[LayerTemperatures] = None
    old_channel_indices: Tuple[int, ...] = ()


@dataclass(frozen=True)
class ModifierEffect:
    lam: float
    trainable: FrozenSet[str]
    teacher_scales: Optional[Dict[str, float]] = None
    student_scales: Optional[Dict[str, float]] = None


# =============================================================================
# LOSS COMPOSITION
# =============================================================================

def total_loss(kpt_loss: Tensor, reg_loss: Tensor, lam: float) -> Tensor:
    """(1 - lambda) * keypoint loss + lambda * regularization loss"""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return kpt_loss
    if lam == 1.0:
        return reg_loss
    return add(scale(kpt_loss, 1.0 - lam), scale(reg_loss, lam))


def keypoint_loss(pred_logits: Tensor, targets, mask) -> Tensor:
    """Masked MSE between sigmoid heatmaps and Gaussian targets

    `mask` is per channel ([B, K]) or per element; masked channels contribute nothing.
    """
    pred = as_tensor(pred_logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"keypoint targets {t.shape} vs predictions {pred.shape}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape == pred.shape[:2]:
        m = np.broadcast_to(m.reshape(m.shape + (1,) * (pred.values.ndim - 2)), pred.shape)
    elif m.shape != pred.shape:
        raise DimensionError(f"keypoint mask {m.shape} matches neither {pred.shape[:2]} nor {pred.shape}")
    return mse(sigmoid(pred), Tensor(t), np.ascontiguousarray(m))


# =============================================================================
# EWC
# =============================================================================

def ewc_penalty(theta_cur: Dict[str, Tensor], theta_prev: Dict[str, np.ndarray], fisher: FisherState) -> Tensor:
    """Sum over parameters of F_k * (theta_cur - theta_prev)^2

    Widened parameters are compared on their leading slice; entries with no
    previous counterpart are left out.
    """
    total = None
    for name, f in fisher.per_param.items():
        if name not in theta_cur or name not in theta_prev:
            raise RegistryError(f"parameter {name} is not registered in both models")
        cur = theta_cur[name]
        prev = np.asarray(theta_prev[name], dtype=np.float64)
        if f.shape != prev.shape:
            raise RegistryError(f"fisher {name} {f.shape} does not match anchor {prev.shape}")
        if cur.shape != prev.shape:
            if cur.values.ndim != prev.ndim or prev.ndim == 0:
                raise RegistryError(f"parameter {name}: {cur.shape} vs {prev.shape}")
            axis = int(np.argmax([c != p for c, p in zip(cur.shape, prev.shape)]))
            if any(c != p for i, (c, p) in enumerate(zip(cur.shape, prev.shape)) if i != axis) \
                    or cur.shape[axis] < prev.shape[axis]:
                raise RegistryError(f"parameter {name}: {cur.shape} is not a widening of {prev.shape}")
            cur = index_select(cur, range(prev.shape[axis]), axis=axis)
        diff = sub(cur, Tensor(prev))
        term = reduce_sum(mul(square(diff), Tensor(f)))
        total = term if total is None else add(total, term)
    return total if total is not None else zeros_scalar()


def ewc_separate_penalty(theta_cur: Dict[str, Tensor], anchors: Sequence[EwcAnchor]) -> Tensor:
    """One quadratic penalty per stored past experience, summed"""
    total = None
    for anchor in anchors:
        term = ewc_penalty(theta_cur, anchor.theta, anchor.fisher)
        total = term if total is None else add(total, term)
    return total if total is not None else zeros_scalar()


def ewc_online_update(fisher_acc: Optional[FisherState], fisher_new: FisherState, gamma: float) -> FisherState:
    """F <- gamma * F_acc + F_new per parameter"""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    if fisher_acc is None:
        return fisher_new
    if set(fisher_acc.per_param) != set(fisher_new.per_param):
        raise RegistryError("fisher registries differ between experiences")
    merged = {}
    for name, f_new in fisher_new.per_param.items():
        f_acc = fisher_acc.per_param[name]
        if f_acc.shape != f_new.shape:
            raise RegistryError(f"fisher {name}: {f_acc.shape} vs {f_new.shape}; pad before merging")
        merged[name] = gamma * f_acc + f_new
    param_layers = dict(fisher_new.param_layers or fisher_acc.param_layers)
    state = FisherState(merged, {}, fisher_acc.sample_count + fisher_new.sample_count, param_layers)
    layers = fisher_new.per_layer or fisher_acc.per_layer
    if layers and param_layers:
        state.per_layer = layer_sums(merged, param_layers, layers.keys())
    return state


# =============================================================================
# FEATURE / OUTPUT DISTILLATION
# =============================================================================

def lfl_penalty(features_cur: Tensor, features_prev) -> Tensor:
    """Sum over the batch of squared Euclidean feature distance"""
    cur = as_tensor(features_cur)
    prev = features_prev.values if isinstance(features_prev, Tensor) else np.asarray(features_prev, dtype=np.float64)
    if cur.shape != prev.shape:
        raise DimensionError(f"feature dims differ: student {cur.shape} vs teacher {prev.shape}")
    return reduce_sum(square(sub(cur, Tensor(prev))))


def lwf_penalty(logits_cur: Tensor, logits_prev, old_channels: Sequence[int], tau: float) -> Tensor:
    """tau^2 * KL between per-channel spatial softmaxes, averaged over batch x old channels"""
    cur = as_tensor(logits_cur)
    prev = logits_prev.values if isinstance(logits_prev, Tensor) else np.asarray(logits_prev, dtype=np.float64)
    channels = [int(c) for c in old_channels]
    if cur.values.ndim != 4 or prev.ndim != 4:
        raise DimensionError(f"lwf expects [B, K, Hg, Wg] logits, got {cur.shape} and {prev.shape}")
    if len(channels) != prev.shape[1]:
        raise ChannelError(f"teacher has {prev.shape[1]} channels but {len(channels)} old channels were named")
    if len(set(channels)) != len(channels) or any(c < 0 or c >= cur.shape[1] for c in channels):
        raise ChannelError(f"old channels {channels} outside the student's {cur.shape[1]} channels")
    if any(c >= prev.shape[1] for c in channels):
        raise ChannelError(f"old channels {channels} reference rows the teacher never had")
    if not channels:
        return zeros_scalar()
    b, _, hg, wg = cur.shape
    student = cur if channels == list(range(cur.shape[1])) else index_select(cur, channels, axis=1)
    rows = b * len(channels)
    return distillation_kl(prev.reshape(rows, hg * wg), reshape(student, (rows, hg * wg)), tau)


# =============================================================================
# MODIFIERS
# =============================================================================

def importance_scales(fisher: Optional[FisherState], model: PoseModel) -> Dict[str, float]:
    """Normalized importance for every layer that owns parameters

    Parameter-free layers (activations) carry no Fisher mass and pass through unscaled.
    """
    if fisher is None or not fisher.per_layer:
        return {}
    norm = normalized_importance(fisher)
    return {l.name: norm[l.name] for l in model.layers if l.name in norm and model.layer_params(l.name)}


def apply_modifiers(config: StrategyConfig, epoch: int, total_epochs: int,
                    fisher: Optional[FisherState], model: PoseModel) -> ModifierEffect:
    """Effective lambda, trainable layer set and layer output scales for one epoch"""
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    lam = config.lam
    if "time_scaled_lambda" in config.modifiers:
        lam = lam * (epoch + 1) / total_epochs

    layer_names = [l.name for l in model.layers]
    if "progressive_unfreeze" in config.modifiers:
        schedule = unfreeze_schedule(model, total_epochs)
        trainable = {name for name, start in schedule.items() if epoch >= start}
        trainable |= {l.name for l in model.layers if l.kind != "dense"}
    else:
        trainable = set(layer_names)

    teacher_scales = student_scales = None
    if "teacher_output_scaling" in config.modifiers:
        scales = importance_scales(fisher, model)
        if scales:
            teacher_scales = scales
            if config.output_scaling_target == "both":
                student_scales = scales
    return ModifierEffect(lam, frozenset(trainable), teacher_scales, student_scales)


# =============================================================================
# DISPATCH
# =============================================================================

def regularization_loss(config: StrategyConfig, context: Optional[RegContext], model: PoseModel,
                        student_trace: ForwardTrace, teacher_trace: Optional[ForwardTrace]) -> Tensor:
    """The strategy's regularization term for one batch; zero without a context"""
    if context is None or config.kind == "finetune":
        return zeros_scalar()
    kind = config.kind
    if kind == "ewc_separate":
        return ewc_separate_penalty(model.params, context.anchors)
    if kind == "ewc_online":
        if not context.anchors:
            return zeros_scalar()
        anchor = context.anchors[-1]
        return ewc_penalty(model.params, anchor.theta, context.fisher or anchor.fisher)
    if teacher_trace is None:
        raise RegistryError(f"strategy {kind} needs a teacher forward pass")
    if kind == "lfl":
        layer = model.feature_layer
        return lfl_penalty(student_trace.outputs[layer], teacher_trace.outputs[layer])
    lwf = lwf_penalty(student_trace.logits, teacher_trace.logits, context.old_channel_indices, config.tau)
    if kind == "lwf":
        return lwf
    if context.temperatures is None or config.lambda_iwd == 0:
        return iwd_regularizer(lwf, None, config.lambda_iwd)
    layerwise = iwd_penalty(student_trace, teacher_trace, context.temperatures, config.iwd_softmax_domain)
    return iwd_regularizer(lwf, layerwise, config.lambda_iwd)
