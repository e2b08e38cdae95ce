"""
Scenario Runner
Trains experiences in order, keeps the teacher snapshot and Fisher state between
them, evaluates every seen dataset (PCK and OKS-AP), and drives grid searches
and sequence-order ablations.
"""

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    ConfigError,
    ExperienceIndexError,
    NonFiniteGradientError,
    ScenarioError,
    SchemaError,
    TrainingAbort,
    UsageError,
)
from data import (
    KeypointDataset,
    ScenarioStep,
    SyntheticDatasetConfig,
    build_scenario,
    cell_center,
    map_into,
    materialize,
)
from iwd import (
    FisherState,
    depth_temperatures,
    fisher_per_layer,
    fisher_per_param,
    layer_temperatures,
    uniform_temperatures,
)
from model import (
    PoseModel,
    Snapshot,
    build_model,
    expand_head,
    forward,
    reference_layers,
    set_layer_trainable,
    snapshot,
)
from strategies import (
    EwcAnchor,
    RegContext,
    StrategyConfig,
    apply_modifiers,
    ewc_online_update,
    keypoint_loss,
    regularization_loss,
    total_loss,
)
from tensor_core import AdamW, Tape, backward, no_record

logger = logging.getLogger(__name__)

METRICS = ("pck", "ap")
SCHEDULES = ("constant", "linear", "cosine_tail")
OKS_THRESHOLDS = tuple(float(np.round(0.5 + 0.05 * k, 2)) for k in range(10))
MAX_SEQUENCE_DATASETS = 4


# =============================================================================
# SPECS AND RESULTS
# =============================================================================

@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 4e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    first_schedule: str = "cosine_tail"
    schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"optimizer.betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError("optimizer.weight_decay must be >= 0 and optimizer.eps > 0")
        for key in ("first_schedule", "schedule"):
            if getattr(self, key) not in SCHEDULES:
                raise ConfigError(f"optimizer.{key} must be one of {', '.join(SCHEDULES)}")


@dataclass(frozen=True)
class ScenarioSpec:
    datasets: Tuple[SyntheticDatasetConfig, ...]
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    epochs: int = 30
    first_epochs: int = 60
    batch_size: int = 32
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    eval_every: int = 5
    seed: int = 22
    heatmap_grid: Tuple[int, int] = (8, 8)
    sigma: float = 1.0
    hidden_dims: Tuple[int, ...] = (48, 32)
    pck_alpha: float = 0.5
    oks_sigma: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "heatmap_grid", tuple(self.heatmap_grid))
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if not self.datasets:
            raise ScenarioError("a scenario needs at least one dataset")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ScenarioError(f"dataset names must be unique: {names}")
        if len({d.image_size for d in self.datasets}) != 1:
            raise ScenarioError("all datasets in a scenario must share image_size")
        if self.epochs < 0 or self.first_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive")
        if len(self.heatmap_grid) != 2 or min(self.heatmap_grid) < 1:
            raise ConfigError(f"invalid heatmap_grid {self.heatmap_grid}")
        if not self.sigma > 0 or not self.pck_alpha > 0 or not self.oks_sigma > 0:
            raise ConfigError("sigma, pck_alpha and oks_sigma must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError(f"invalid hidden_dims {self.hidden_dims}")

    def epochs_for(self, experience: int) -> int:
        return self.first_epochs if experience == 1 else self.epochs


@dataclass(frozen=True)
class HistoryRow:
    experience: int
    epoch: int
    dataset: str
    metric: str
    value: float


@dataclass
class ExperienceResult:
    dataset_names: List[str]
    primary_metrics: List[str]
    matrices: Dict[str, List[List[float]]]
    history: List[HistoryRow]
    cumulative_counts: List[int]
    strategy_label: str = ""
    wall_clock: float = 0.0

    @property
    def matrix(self) -> List[List[float]]:
        """M[i][j] in each dataset's own metric; row i covers datasets 0..i"""
        return [[self.matrices[self.primary_metrics[j]][i][j] for j in range(i + 1)]
                for i in range(len(self.dataset_names))]

    @property
    def final_scores(self) -> List[float]:
        return self.matrix[-1]


def lr_at(settings: OptimizerSettings, schedule: str, epoch: int, total_epochs: int) -> float:
    """Learning rate for one epoch under a named schedule"""
    if schedule == "constant" or total_epochs <= 1:
        return settings.lr
    if schedule == "linear":
        return settings.lr * (1.0 - epoch / total_epochs)
    if schedule == "cosine_tail":
        half = total_epochs // 2
        if epoch < half:
            return settings.lr
        progress = (epoch - half) / (total_epochs - half)
        return settings.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ConfigError(f"unknown schedule {schedule!r}")


# =============================================================================
# METRICS
# =============================================================================

def _score_channels(model: Union[PoseModel, Snapshot], dataset: KeypointDataset) -> List[int]:
    net = model.model if isinstance(model, Snapshot) else model
    names = dataset.schema.names
    if net.schema_names is not None:
        missing = [n for n in names if n not in net.schema_names]
        if missing:
            raise SchemaError(f"{dataset.name}: keypoints {missing} are not predicted by the model")
        return [net.schema_names.index(n) for n in names]
    channels = list(dataset.mapping.index_map)
    if any(c >= net.keypoint_count for c in channels):
        raise SchemaError(f"{dataset.name}: schema needs channels the model does not have")
    return channels


def predict_coordinates(model: Union[PoseModel, Snapshot], dataset: KeypointDataset) -> np.ndarray:
    """[N, K_dataset, 2] normalized (x, y) at the argmax cell center of each channel"""
    channels = _score_channels(model, dataset)
    net = model.model if isinstance(model, Snapshot) else model
    with no_record():
        logits = forward(model, dataset.inputs, capture=False).logits.values
    hg, wg = net.heatmap_grid
    picked = logits[:, channels].reshape(len(dataset), len(channels), hg * wg)
    flat = np.argmax(picked, axis=-1)
    rows, cols = np.divmod(flat, wg)
    xs, ys = cell_center(cols, rows, net.heatmap_grid)
    return np.stack([xs, ys], axis=-1)


def evaluate_pck(model: Union[PoseModel, Snapshot], dataset: KeypointDataset, alpha: float = 0.5) -> float:
    """Percentage of visible keypoints within alpha * figure scale of ground truth"""
    if not alpha > 0:
        raise ConfigError(f"PCK alpha must be positive, got {alpha}")
    pred = predict_coordinates(model, dataset)
    truth = dataset.keypoints[..., :2]
    visible = dataset.keypoints[..., 2] > 0
    if not visible.any():
        logger.warning("⚠️  %s has no visible keypoints; PCK reported as 0", dataset.name)
        return 0.0
    dist = np.linalg.norm(pred - truth, axis=-1)
    hits = (dist <= alpha * dataset.figure_scales[:, None]) & visible
    return float(100.0 * hits.sum() / visible.sum())


def average_precision_from_oks(oks: Sequence[float]) -> float:
    """Mean over thresholds 0.50:0.05:0.95 of the fraction of figures clearing each"""
    values = np.asarray(oks, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(100.0 * np.mean([np.mean(values >= t) for t in OKS_THRESHOLDS]))


def object_keypoint_similarity(pred: np.ndarray, keypoints: np.ndarray, figure_scales: np.ndarray,
                               sigmas: np.ndarray) -> np.ndarray:
    """Per-figure OKS; NaN for figures with no visible keypoints"""
    visible = keypoints[..., 2] > 0
    d2 = np.sum((pred - keypoints[..., :2]) ** 2, axis=-1)
    s2 = (figure_scales ** 2)[:, None]
    sim = np.exp(-d2 / (2.0 * s2 * sigmas[None, :] ** 2))
    counts = visible.sum(axis=1)
    total = np.where(visible, sim, 0.0).sum(axis=1)
    return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)


def evaluate_oks_ap(model: Union[PoseModel, Snapshot], dataset: KeypointDataset,
                    per_keypoint_sigmas: Union[float, Sequence[float]] = 0.08) -> float:
    sigmas = np.broadcast_to(np.asarray(per_keypoint_sigmas, dtype=np.float64), (dataset.schema.count,))
    if np.any(sigmas <= 0):
        raise ConfigError("OKS sigmas must be positive")
    pred = predict_coordinates(model, dataset)
    oks = object_keypoint_similarity(pred, dataset.keypoints, dataset.figure_scales, sigmas)
    return average_precision_from_oks(oks[~np.isnan(oks)])


def average_accuracy(result: ExperienceResult) -> float:
    """Unweighted mean of the final model's scores, each dataset in its own metric"""
    scores = result.final_scores
    return float(sum(scores) / len(scores)) if scores else 0.0


def forgetting(result: ExperienceResult, dataset: Union[int, str], metric: Optional[str] = None) -> float:
    """Score right after training on a dataset minus the final score; positive means forgotten"""
    if isinstance(dataset, str):
        if dataset not in result.dataset_names:
            raise ExperienceIndexError(f"dataset {dataset!r} was never trained")
        j = result.dataset_names.index(dataset)
    else:
        j = dataset
    if not 0 <= j < len(result.dataset_names):
        raise ExperienceIndexError(f"dataset index {j} was never trained")
    m = metric or result.primary_metrics[j]
    if m not in METRICS:
        raise ConfigError(f"unknown metric {m!r}")
    rows = result.matrices[m]
    return float(rows[j][j] - rows[-1][j])


# =============================================================================
# RUNNER
# =============================================================================

ExperienceCallback = Callable[[int, PoseModel, Optional[FisherState]], None]


class ScenarioRunner:
    """Runs one scenario end to end; one instance per run"""

    def __init__(self, spec: ScenarioSpec, on_experience_end: Optional[ExperienceCallback] = None):
        self.spec = spec
        self.steps: List[ScenarioStep] = build_scenario(spec.datasets)
        self.on_experience_end = on_experience_end
        self.model: Optional[PoseModel] = None
        self.fisher: Optional[FisherState] = None
        self.anchors: List[EwcAnchor] = []
        self._val_cache: Dict[Tuple[str, int], KeypointDataset] = {}

    # -- data -----------------------------------------------------------------

    def train_split(self, step: ScenarioStep) -> KeypointDataset:
        return materialize(step.config, step.mapping, "train", self.spec.heatmap_grid, self.spec.sigma)

    def val_split(self, config: SyntheticDatasetConfig, cumulative) -> KeypointDataset:
        key = (config.name, cumulative.count)
        if key not in self._val_cache:
            self._val_cache[key] = materialize(config, map_into(config.schema, cumulative), "val",
                                               self.spec.heatmap_grid, self.spec.sigma)
        return self._val_cache[key]

    # -- evaluation -----------------------------------------------------------

    def evaluate_seen(self, model: PoseModel, upto: int) -> Dict[str, Dict[str, float]]:
        """Both metrics for every dataset trained so far (steps 0..upto)"""
        cumulative = self.steps[upto].cumulative
        scores = {}
        for step in self.steps[:upto + 1]:
            val = self.val_split(step.config, cumulative)
            scores[step.config.name] = {
                "pck": evaluate_pck(model, val, self.spec.pck_alpha),
                "ap": evaluate_oks_ap(model, val, self.spec.oks_sigma),
            }
        return scores

    # -- training -------------------------------------------------------------

    def train_experience(self, model: PoseModel, dataset: KeypointDataset, experience: int,
                         context: Optional[RegContext], epochs: int) -> Tuple[PoseModel, List[HistoryRow]]:
        """Mini-batch AdamW on the total loss; history holds the cadence evaluations"""
        history: List[HistoryRow] = []
        if epochs == 0:
            return model, history
        if (context is None) != (experience == 1):
            raise ScenarioError("a regularization context is required exactly for experiences after the first")

        spec, strategy = self.spec, self.spec.strategy
        schedule = spec.optimizer.first_schedule if experience == 1 else spec.optimizer.schedule
        optimizer = AdamW(spec.optimizer.lr, spec.optimizer.betas, spec.optimizer.weight_decay, spec.optimizer.eps)
        n = len(dataset)
        all_layers = frozenset(l.name for l in model.layers)

        for epoch in range(epochs):
            if context is not None:
                effect = apply_modifiers(strategy, epoch, epochs, context.fisher, model)
                lam, trainable = effect.lam, effect.trainable
                teacher_scales, student_scales = effect.teacher_scales, effect.student_scales
            else:
                lam, trainable, teacher_scales, student_scales = 0.0, all_layers, None, None
            optimizer.lr = lr_at(spec.optimizer, schedule, epoch, epochs)
            for name in all_layers:
                set_layer_trainable(model, name, name in trainable)
            frozen = model.frozen_params()
            order = np.random.default_rng([spec.seed, experience, epoch]).permutation(n)

            epoch_loss = 0.0
            for batch, start in enumerate(range(0, n, spec.batch_size)):
                idx = order[start:start + spec.batch_size]
                with Tape() as tape:
                    student = forward(model, dataset.inputs[idx], capture=True, layer_scales=student_scales)
                    kpt = keypoint_loss(student.logits, dataset.targets[idx], dataset.masks[idx])
                    if context is not None and lam > 0:
                        with no_record():
                            teacher = forward(context.teacher, dataset.inputs[idx], capture=True,
                                              layer_scales=teacher_scales)
                        reg = regularization_loss(strategy, context, model, student, teacher)
                        loss = total_loss(kpt, reg, lam)
                    else:
                        loss = kpt
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingAbort(f"non-finite loss {value} on {dataset.name}", experience, epoch, batch)
                grads = backward(tape, loss, params=model.params.values())
                try:
                    optimizer.step(model.params, grads, frozen)
                except NonFiniteGradientError as e:
                    raise TrainingAbort(str(e), experience, epoch, batch) from e
                epoch_loss += value * len(idx)
                logger.debug("exp %d epoch %d batch %d loss %.6f", experience, epoch, batch, value)

            completed = epoch + 1
            logger.debug("exp %d epoch %d/%d mean loss %.6f lr %.2e", experience, completed, epochs,
                         epoch_loss / max(n, 1), optimizer.lr)
            if completed < epochs and completed % spec.eval_every == 0:
                for name, scores in self.evaluate_seen(model, experience - 1).items():
                    for metric in METRICS:
                        history.append(HistoryRow(experience, completed, name, metric, scores[metric]))
        return model, history

    def _update_importance(self, prev_train: KeypointDataset) -> FisherState:
        """Fisher of the previous model on the previous experience's data, merged into the running state"""
        model, strategy = self.model, self.spec.strategy
        raw = fisher_per_param(model, prev_train, keypoint_loss, strategy.fisher_samples)
        fresh = fisher_per_layer(raw, model)
        if strategy.kind == "ewc_separate":
            self.anchors.append(EwcAnchor({n: t.values.copy() for n, t in model.params.items()}, fresh))
            merged = fresh if self.fisher is None else ewc_online_update(self.fisher.padded_to(model), fresh, 1.0)
        else:
            gamma = strategy.gamma if strategy.kind in ("ewc_online", "iwd") else 1.0
            merged = ewc_online_update(None if self.fisher is None else self.fisher.padded_to(model), fresh, gamma)
            if strategy.kind == "ewc_online":
                self.anchors = [EwcAnchor({n: t.values.copy() for n, t in model.params.items()}, merged)]
        return merged

    def _build_context(self, teacher: Snapshot, old_channels: int) -> RegContext:
        strategy = self.spec.strategy
        temps = None
        if strategy.kind == "iwd":
            layers = [l.name for l in self.model.layers]
            if strategy.temperature_mode == "fixed":
                temps = uniform_temperatures(layers, strategy.tau)
            elif strategy.temperature_mode == "depth":
                temps = depth_temperatures(layers, strategy.tau, strategy.temperature_clamp)
            elif self.fisher is not None:
                temps = layer_temperatures(self.fisher, strategy.tau, strategy.temperature_clamp)
        if temps is not None:
            logger.info("   ✅ Layer temperatures (%s): %s", strategy.temperature_mode,
                        ", ".join(f"{k}={v:.3g}" for k, v in temps.per_layer.items()))
        return RegContext(teacher, list(self.anchors), self.fisher, temps, tuple(range(old_channels)))

    def run(self) -> ExperienceResult:
        spec = self.spec
        started = time.perf_counter()
        total = len(self.steps)
        names = [s.config.name for s in self.steps]
        matrices: Dict[str, List[List[float]]] = {m: [] for m in METRICS}
        history: List[HistoryRow] = []
        counts: List[int] = []
        prev_train: Optional[KeypointDataset] = None

        logger.info("🚀 Scenario %s | strategy %s | seed %d", " → ".join(names), spec.strategy.label, spec.seed)
        for i, step in enumerate(self.steps, 1):
            logger.info("")
            logger.info("[EXPERIENCE %d/%d] 🏋️ %s (%d keypoints)", i, total, step.config.name,
                        step.cumulative.count)
            logger.info("─" * 60)
            context = None
            if i == 1:
                layers = reference_layers(step.cumulative.count, spec.heatmap_grid,
                                          step.config.image_size ** 2, spec.hidden_dims)
                self.model = build_model(layers, step.cumulative.count, spec.heatmap_grid, spec.seed,
                                         step.cumulative.names)
            else:
                teacher = snapshot(self.model, i - 1)
                if spec.strategy.needs_fisher:
                    self.fisher = self._update_importance(prev_train)
                old = self.model.keypoint_count
                if step.cumulative.count > old:
                    self.model = expand_head(self.model, step.cumulative.count, step.cumulative.names)
                elif step.cumulative.count == old:
                    self.model.schema_names = step.cumulative.names
                context = self._build_context(teacher, old)
            self.model.schema_id = step.cumulative.schema_id
            counts.append(step.cumulative.count)
            logger.info("   Cumulative keypoints: %d", step.cumulative.count)

            train = self.train_split(step)
            epochs = spec.epochs_for(i)
            self.model, rows = self.train_experience(self.model, train, i, context, epochs)
            history.extend(rows)

            scores = self.evaluate_seen(self.model, i - 1)
            for metric in METRICS:
                matrices[metric].append([scores[n][metric] for n in names[:i]])
            for name in names[:i]:
                for metric in METRICS:
                    history.append(HistoryRow(i, epochs, name, metric, scores[name][metric]))
                primary = self.steps[names.index(name)].config.metric
                logger.info("   ✅ %-18s %s %6.2f", name, primary.upper(), scores[name][primary])
            if self.on_experience_end is not None:
                self.on_experience_end(i, self.model, self.fisher)
            prev_train = train

        result = ExperienceResult(names, [s.config.metric for s in self.steps], matrices, history, counts,
                                  spec.strategy.label, time.perf_counter() - started)
        logger.info("")
        logger.info("📊 Average accuracy: %.2f", average_accuracy(result))
        return result


def run_scenario(spec: ScenarioSpec, on_experience_end: Optional[ExperienceCallback] = None) -> ExperienceResult:
    return ScenarioRunner(spec, on_experience_end).run()


# =============================================================================
# SWEEPS
# =============================================================================

@dataclass
class GridRow:
    value: float
    average_accuracy: float
    finals: Dict[str, float]


@dataclass
class GridResult:
    param: str
    rows: List[GridRow]

    @property
    def best(self) -> GridRow:
        return max(self.rows, key=lambda r: r.average_accuracy)


def _with_param(spec: ScenarioSpec, param: str, value: float) -> ScenarioSpec:
    if param == "lambda":
        return replace(spec, strategy=replace(spec.strategy, lam=value))
    if param == "tau":
        return replace(spec, strategy=replace(spec.strategy, tau=value))
    raise UsageError(f"grid parameter must be 'lambda' or 'tau', got {param!r}")


def grid_search(spec: ScenarioSpec, param: str, values: Sequence[float], workers: int = 1) -> GridResult:
    """One scenario per value, same seed; independent runs may share a thread pool"""
    if not values:
        raise UsageError("grid search needs at least one value")
    specs = [_with_param(spec, param, float(v)) for v in values]
    logger.info("🔍 Grid over %s: %s (%d workers)", param, ", ".join(f"{v:g}" for v in values), workers)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run_scenario, specs))
    rows = [GridRow(float(v), average_accuracy(r), dict(zip(r.dataset_names, r.final_scores)))
            for v, r in zip(values, results)]
    grid = GridResult(param, rows)
    logger.info("✅ Best %s = %g (average accuracy %.2f)", param, grid.best.value, grid.best.average_accuracy)
    return grid


@dataclass
class SequenceRow:
    order: Tuple[str, ...]
    average_accuracy: float
    result: ExperienceResult


def run_sequences(spec: ScenarioSpec, workers: int = 1) -> List[SequenceRow]:
    """Every ordering of the dataset sequence, ranked by average accuracy"""
    if len(spec.datasets) > MAX_SEQUENCE_DATASETS:
        raise ScenarioError(f"sequence ablation supports at most {MAX_SEQUENCE_DATASETS} datasets, "
                            f"got {len(spec.datasets)}")
    orders = list(itertools.permutations(spec.datasets))
    logger.info("🔀 Running %d dataset orderings", len(orders))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run_scenario, [replace(spec, datasets=o) for o in orders]))
    rows = [SequenceRow(tuple(d.name for d in o), average_accuracy(r), r) for o, r in zip(orders, results)]
    return sorted(rows, key=lambda r: -r.average_accuracy)


# =============================================================================
# EXPORTS
# =============================================================================

def write_metrics_csv(result: ExperienceResult, path: Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow(["experience", "epoch", "dataset", "metric", "value"])
        for row in result.history:
            writer.writerow([row.experience, row.epoch, row.dataset, row.metric, row.value])
    return path


def summary_dict(result: ExperienceResult) -> dict:
    """Everything in the summary except timing, so reruns compare byte for byte"""
    return {
        "strategy": result.strategy_label,
        "datasets": result.dataset_names,
        "primary_metrics": result.primary_metrics,
        "cumulative_keypoints": result.cumulative_counts,
        "matrix": result.matrix,
        "matrices": result.matrices,
        "final_scores": dict(zip(result.dataset_names, result.final_scores)),
        "average_accuracy": average_accuracy(result),
        "forgetting": {name: forgetting(result, j) for j, name in enumerate(result.dataset_names)},
    }


def forgetting_curves(result: ExperienceResult) -> Dict[str, List[dict]]:
    """Per dataset, its primary metric at every recorded (experience, epoch)"""
    primary = dict(zip(result.dataset_names, result.primary_metrics))
    curves: Dict[str, List[dict]] = {name: [] for name in result.dataset_names}
    for row in result.history:
        if row.metric == primary[row.dataset]:
            curves[row.dataset].append({"experience": row.experience, "epoch": row.epoch, "value": row.value})
    return curves


def write_json(data, path: Path) -> Path:
    """Write through a temp file so readers never see a partial document"""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def write_grid_csv(grid: GridResult, path: Path) -> Path:
    names = list(grid.rows[0].finals) if grid.rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow([grid.param, "average_accuracy"] + names)
        for row in grid.rows:
            writer.writerow([row.value, row.average_accuracy] + [row.finals[n] for n in names])
    return Path(path)


def write_sequences_csv(rows: Sequence[SequenceRow], path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow(["rank", "sequence", "average_accuracy", "final_scores"])
        for rank, row in enumerate(rows, 1):
            finals = ";".join(f"{n}={v:.4f}" for n, v in zip(row.result.dataset_names, row.result.final_scores))
            writer.writerow([rank, " > ".join(row.order), row.average_accuracy, finals])
    return Path(path)
