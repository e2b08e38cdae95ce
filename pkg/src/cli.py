#!/usr/bin/env python3
"""
Continual Pose Lab - command line
Subcommands: run, grid, eval, sequences, export-fixtures

Usage:
    python src/cli.py run --config configs/reference.yaml --out runs/iwd
    python src/cli.py grid --config configs/reference.yaml --param lambda --values 0.1,0.2,0.3
    python src/cli.py eval --config configs/reference.yaml --checkpoint runs/iwd/checkpoints/experience_3.ckpt --dataset synthetic-coco
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from dotenv import load_dotenv

from checkpoint import load_checkpoint, save_checkpoint
from data import (
    BUILTIN_SCHEMAS,
    REFERENCE_SEQUENCE,
    KeypointSchema,
    SyntheticDatasetConfig,
    export_fixtures,
    map_into,
    materialize,
    preset,
    resolve_schema,
)
from errors import ConfigError, ContinualPoseError, OutputExistsError, ParseError, TrainingAbort, UsageError
from runner import (
    METRICS,
    OptimizerSettings,
    ScenarioSpec,
    evaluate_oks_ap,
    evaluate_pck,
    forgetting_curves,
    grid_search,
    run_scenario,
    run_sequences,
    summary_dict,
    write_grid_csv,
    write_json,
    write_metrics_csv,
    write_sequences_csv,
)
from strategies import StrategyConfig

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "runs/latest"

SCENARIO_KEYS = {"seed", "epochs", "first_epochs", "batch_size", "eval_every", "heatmap_grid", "sigma",
                 "hidden_dims", "pck_alpha", "oks_sigma"}
TOP_KEYS = SCENARIO_KEYS | {"strategy", "optimizer", "datasets", "output", "log_level"}
STRATEGY_KEYS = {"kind", "lambda", "tau", "gamma", "lambda_iwd", "modifiers", "output_scaling_target",
                 "temperature_clamp", "iwd_softmax_domain", "temperature_mode", "fisher_samples"}
OPTIMIZER_KEYS = {"lr", "betas", "eps", "weight_decay", "first_schedule", "schedule"}
OUTPUT_KEYS = {"dir", "csv", "json", "checkpoints"}
DATASET_KEYS = {"preset", "name", "schema", "keypoints", "schema_id", "n_train", "n_val", "person_count_range",
                "occlusion_rate", "pose_distribution", "noise_level", "seed", "image_size", "metric"}
TUPLE_FIELDS = {"heatmap_grid", "hidden_dims", "betas", "temperature_clamp", "person_count_range"}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec
    output_dir: Optional[str] = None
    export_csv: bool = True
    export_json: bool = True
    export_checkpoints: bool = True
    log_level: Optional[str] = None

    @property
    def strategy(self) -> StrategyConfig:
        return self.scenario.strategy


# =============================================================================
# CONFIG
# =============================================================================

def _check_keys(section: str, mapping: Any, allowed: set) -> Dict[str, Any]:
    if mapping is None:
        return {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{section} must be a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(map(str, unknown))}")
    return {k: tuple(v) if k in TUPLE_FIELDS and isinstance(v, list) else v for k, v in mapping.items()}


def _parse_strategy(raw: Any) -> StrategyConfig:
    if raw is None:
        return StrategyConfig()
    if isinstance(raw, str):
        return StrategyConfig(kind=raw)
    values = _check_keys("strategy", raw, STRATEGY_KEYS)
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    if "modifiers" in values:
        mods = values["modifiers"]
        if not isinstance(mods, (list, tuple)):
            raise ConfigError("strategy.modifiers must be a list")
        values["modifiers"] = frozenset(mods)
    return StrategyConfig(**values)


def _parse_dataset(raw: Any, base_dir: Optional[Path], position: int) -> SyntheticDatasetConfig:
    section = f"datasets[{position}]"
    if isinstance(raw, str):
        return preset(raw)
    values = _check_keys(section, raw, DATASET_KEYS)
    if "pose_distribution" in values:
        values["pose_distribution_id"] = values.pop("pose_distribution")
    name = values.pop("preset", None)
    schema_ref = values.pop("schema", None)
    inline = values.pop("keypoints", None)
    schema_id = values.pop("schema_id", None)
    if schema_ref is not None and inline is not None:
        raise ConfigError(f"{section}: give either schema or keypoints, not both")
    if inline is not None:
        values["schema"] = KeypointSchema(tuple(inline), schema_id or "custom")
    elif schema_ref is not None:
        values["schema"] = resolve_schema(str(schema_ref), base_dir)
    if name is not None:
        return preset(name, **values)
    if "name" not in values or "schema" not in values:
        raise ConfigError(f"{section}: a dataset needs a preset, or a name plus schema/keypoints")
    return SyntheticDatasetConfig(**values)


def parse_config_dict(doc: Any, base_dir: Optional[Path] = None) -> RunConfig:
    doc = _check_keys("config", doc, TOP_KEYS)
    try:
        strategy = _parse_strategy(doc.get("strategy"))
        optimizer = OptimizerSettings(**_check_keys("optimizer", doc.get("optimizer"), OPTIMIZER_KEYS))
        raw_datasets = doc.get("datasets", list(REFERENCE_SEQUENCE))
        if not isinstance(raw_datasets, list):
            raise ConfigError("datasets must be a list")
        datasets = [_parse_dataset(d, base_dir, i) for i, d in enumerate(raw_datasets)]
        scenario = ScenarioSpec(datasets=tuple(datasets), strategy=strategy, optimizer=optimizer,
                                **{k: v for k, v in doc.items() if k in SCENARIO_KEYS})
        output = _check_keys("output", doc.get("output"), OUTPUT_KEYS)
    except TypeError as e:
        raise ConfigError(f"invalid value type: {e}") from e
    log_level = doc.get("log_level")
    if log_level is not None:
        _level_number(log_level)
    return RunConfig(
        scenario=scenario,
        output_dir=output.get("dir"),
        export_csv=bool(output.get("csv", True)),
        export_json=bool(output.get("json", True)),
        export_checkpoints=bool(output.get("checkpoints", True)),
        log_level=log_level,
    )


def parse_config(path: Path) -> RunConfig:
    """Validated run config from a YAML file; unknown keys are errors"""
    path = Path(path)
    text = path.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ParseError(f"invalid YAML in {path}: {getattr(e, 'problem', e)}",
                         mark.index if mark is not None else 0) from e
    return parse_config_dict(doc, path.parent)


def _dataset_to_dict(cfg: SyntheticDatasetConfig) -> dict:
    out: Dict[str, Any] = {"name": cfg.name}
    if BUILTIN_SCHEMAS.get(cfg.schema.schema_id) == cfg.schema:
        out["schema"] = cfg.schema.schema_id
    else:
        out["keypoints"] = list(cfg.schema.names)
        out["schema_id"] = cfg.schema.schema_id
    for f in fields(cfg):
        if f.name in ("name", "schema"):
            continue
        key = "pose_distribution" if f.name == "pose_distribution_id" else f.name
        value = getattr(cfg, f.name)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def config_to_dict(config: RunConfig) -> dict:
    """Plain-data form of a RunConfig; parse_config_dict(config_to_dict(c)) == c"""
    spec = config.scenario
    strategy = spec.strategy
    doc: Dict[str, Any] = {}
    for key in sorted(SCENARIO_KEYS):
        value = getattr(spec, key)
        doc[key] = list(value) if isinstance(value, tuple) else value
    doc["strategy"] = {
        "kind": strategy.kind,
        "lambda": strategy.lam,
        "tau": strategy.tau,
        "gamma": strategy.gamma,
        "lambda_iwd": strategy.lambda_iwd,
        "modifiers": sorted(strategy.modifiers),
        "output_scaling_target": strategy.output_scaling_target,
        "temperature_clamp": list(strategy.temperature_clamp),
        "iwd_softmax_domain": strategy.iwd_softmax_domain,
        "temperature_mode": strategy.temperature_mode,
        "fisher_samples": strategy.fisher_samples,
    }
    doc["optimizer"] = {f.name: (list(getattr(spec.optimizer, f.name))
                                 if isinstance(getattr(spec.optimizer, f.name), tuple)
                                 else getattr(spec.optimizer, f.name))
                        for f in fields(spec.optimizer)}
    doc["datasets"] = [_dataset_to_dict(d) for d in spec.datasets]
    output: Dict[str, Any] = {"csv": config.export_csv, "json": config.export_json,
                              "checkpoints": config.export_checkpoints}
    if config.output_dir is not None:
        output["dir"] = config.output_dir
    doc["output"] = output
    if config.log_level is not None:
        doc["log_level"] = config.log_level
    return doc


# =============================================================================
# LOGGING
# =============================================================================

def _level_number(level: str) -> int:
    number = logging.getLevelName(str(level).upper())
    if not isinstance(number, int):
        raise ConfigError(f"unknown log level {level!r}")
    return number


def setup_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=_level_number(level), format="%(message)s", stream=sys.stderr, force=True)


# =============================================================================
# COMMANDS
# =============================================================================

def _output_dir(config: RunConfig) -> Path:
    return Path(config.output_dir or os.getenv("CLPOSE_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR)


def _workers(value: Optional[int]) -> int:
    if value is not None:
        return value
    raw = os.getenv("CLPOSE_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError as e:
        raise ConfigError(f"CLPOSE_WORKERS must be an integer, got {raw!r}") from e


def cmd_run(config: RunConfig, force: bool = False) -> int:
    out = _output_dir(config)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"output directory {out} is not empty (use --force to reuse it)")
    out.mkdir(parents=True, exist_ok=True)

    def save(experience, model, fisher):
        if config.export_checkpoints:
            save_checkpoint(out / "checkpoints" / f"experience_{experience}.ckpt", model, experience, fisher)

    try:
        result = run_scenario(config.scenario, on_experience_end=save)
    except TrainingAbort as e:
        write_json(e.diagnostics(), out / "diagnostics.json")
        logger.error("❌ Training aborted at experience %d epoch %d batch %d: %s",
                     e.experience, e.epoch, e.batch, e)
        raise

    if config.export_csv:
        write_metrics_csv(result, out / "metrics.csv")
    if config.export_json:
        summary = summary_dict(result)
        write_json(summary, out / "summary.json")
        write_json(forgetting_curves(result), out / "forgetting.json")
    logger.info("✅ Results written to %s", out)
    return 0


def cmd_grid(config: RunConfig, param: str, values: Sequence[float], workers: Optional[int] = None) -> int:
    if param not in ("lambda", "tau"):
        raise UsageError(f"--param must be lambda or tau, got {param!r}")
    if not values:
        raise UsageError("--values needs at least one number")
    if any(not v > 0 for v in values):
        raise UsageError("grid values must be positive")
    grid = grid_search(config.scenario, param, list(values), _workers(workers))
    out = _output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(grid, out / "grid.csv")
    print(f"best {param} = {grid.best.value:g} (average accuracy {grid.best.average_accuracy:.4f})")
    return 0


def cmd_sequences(config: RunConfig, workers: Optional[int] = None) -> int:
    rows = run_sequences(config.scenario, _workers(workers))
    out = _output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    write_sequences_csv(rows, out / "sequences.csv")
    for rank, row in enumerate(rows, 1):
        print(f"{rank}. {' > '.join(row.order)}  {row.average_accuracy:.4f}")
    return 0


def evaluate_checkpoint(config: RunConfig, checkpoint: Path, dataset_name: str,
                        metric: Optional[str] = None, split: str = "val") -> float:
    """Score a saved model on one dataset of the run config that produced it"""
    by_name = {d.name: d for d in config.scenario.datasets}
    if dataset_name not in by_name:
        raise UsageError(f"dataset {dataset_name!r} is not in the config ({', '.join(by_name)})")
    dataset_cfg = by_name[dataset_name]
    metric = metric or dataset_cfg.metric
    if metric not in METRICS:
        raise UsageError(f"--metric must be one of {', '.join(METRICS)}")
    model, _, _ = load_checkpoint(checkpoint)
    target = KeypointSchema(model.schema_names, model.schema_id or "custom") if model.schema_names else dataset_cfg.schema
    dataset = materialize(dataset_cfg, map_into(dataset_cfg.schema, target), split,
                          model.heatmap_grid, config.scenario.sigma)
    if metric == "pck":
        return evaluate_pck(model, dataset, config.scenario.pck_alpha)
    return evaluate_oks_ap(model, dataset, config.scenario.oks_sigma)


def cmd_eval(config: RunConfig, checkpoint: Path, dataset_name: str, metric: Optional[str] = None,
             split: str = "val") -> int:
    score = evaluate_checkpoint(config, checkpoint, dataset_name, metric, split)
    metric = metric or {d.name: d.metric for d in config.scenario.datasets}[dataset_name]
    print(json.dumps({"dataset": dataset_name, "metric": metric, "split": split, "score": score}))
    return 0


def cmd_export_fixtures(config: RunConfig, dataset_name: Optional[str] = None, split: str = "val") -> int:
    targets = [d for d in config.scenario.datasets if dataset_name in (None, d.name)]
    if not targets:
        raise UsageError(f"dataset {dataset_name!r} is not in the config")
    out = _output_dir(config) / "fixtures"
    for d in targets:
        export_fixtures(d, out / f"{d.name}_{split}.jsonl", split)
    return 0


# =============================================================================
# ARGUMENTS
# =============================================================================

class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"--values must be comma-separated numbers: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="clpose", description="Continual learning lab for keypoint models")
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config (YAML); defaults to the reference scenario")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="train a scenario and export results")
    run.add_argument("--force", action="store_true", help="reuse a non-empty output directory")

    grid = sub.add_parser("grid", parents=[common], help="sweep lambda or tau")
    grid.add_argument("--param", required=True)
    grid.add_argument("--values", required=True, type=_float_list)
    grid.add_argument("--workers", type=int)

    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint on one dataset")
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--metric", choices=METRICS)
    ev.add_argument("--split", choices=("train", "val"), default="val")

    seq = sub.add_parser("sequences", parents=[common], help="run every dataset ordering")
    seq.add_argument("--workers", type=int)

    fx = sub.add_parser("export-fixtures", parents=[common], help="write scenes as JSON lines")
    fx.add_argument("--dataset")
    fx.add_argument("--split", choices=("train", "val"), default="val")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    config = parse_config(args.config) if args.config else parse_config_dict({})
    if args.seed is not None:
        config = replace(config, scenario=replace(config.scenario, seed=args.seed))
    if args.out:
        config = replace(config, output_dir=args.out)
    return config


def dispatch(args: argparse.Namespace, config: RunConfig) -> int:
    if args.command == "run":
        return cmd_run(config, args.force)
    if args.command == "grid":
        return cmd_grid(config, args.param, args.values, args.workers)
    if args.command == "eval":
        return cmd_eval(config, args.checkpoint, args.dataset, args.metric, args.split)
    if args.command == "sequences":
        return cmd_sequences(config, args.workers)
    return cmd_export_fixtures(config, args.dataset, args.split)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit codes: 0 ok, 1 config/usage, 2 runtime abort, 3 I/O"""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        verbose = args.verbose
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code

    env_level = os.getenv("CLPOSE_LOG_LEVEL", "INFO")
    try:
        config = load_run_config(args)
        setup_logging("DEBUG" if verbose else (config.log_level or env_level))
        return dispatch(args, config)
    except ContinualPoseError as e:
        if not logging.getLogger().handlers:
            setup_logging("INFO")
        logger.error("❌ %s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        if not logging.getLogger().handlers:
            setup_logging("INFO")
        logger.error("❌ I/O error: %s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
