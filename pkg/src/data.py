"""
Keypoint Data - schema algebra, COCO schema ingestion, synthetic stick-figure scenes,
Gaussian heatmap targets and scenario folding
"""

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, ParseError, ScenarioError, SchemaError

logger = logging.getLogger(__name__)


# =============================================================================
# SCHEMAS
# =============================================================================

@dataclass(frozen=True)
class KeypointSchema:
    names: Tuple[str, ...]
    schema_id: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise SchemaError(f"duplicate keypoint names: {dupes}")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class SchemaMapping:
    source: KeypointSchema
    target: KeypointSchema
    index_map: Tuple[int, ...]
    new_indices: Tuple[int, ...] = ()


def identity_mapping(schema: KeypointSchema) -> SchemaMapping:
    return SchemaMapping(schema, schema, tuple(range(schema.count)), ())


def map_into(source: KeypointSchema, target: KeypointSchema) -> SchemaMapping:
    """Channels of `source` names inside `target`; every name must be present"""
    missing = [n for n in source.names if n not in target.names]
    if missing:
        raise SchemaError(f"keypoints {missing} are unknown to schema {target.schema_id}")
    return SchemaMapping(source, target, tuple(target.index(n) for n in source.names), ())


def schema_union(prior: KeypointSchema, incoming: KeypointSchema
                 ) -> Tuple[KeypointSchema, SchemaMapping, SchemaMapping]:
    """Prior channel order kept, genuinely new names appended in incoming order"""
    added = [n for n in incoming.names if n not in prior.names]
    if not added:
        union = prior
    else:
        union = KeypointSchema(prior.names + tuple(added), f"{prior.schema_id}+{incoming.schema_id}")
    new_indices = tuple(range(prior.count, union.count))
    prior_map = SchemaMapping(prior, union, tuple(range(prior.count)), new_indices)
    incoming_map = SchemaMapping(incoming, union, tuple(union.index(n) for n in incoming.names), new_indices)
    return union, prior_map, incoming_map


COCO_17 = KeypointSchema((
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
), "coco17")

MPII_16 = KeypointSchema((
    "right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow", "left_wrist",
), "mpii16")

# CrowdPose "head"/"neck" carry the MPII names so the schemas share them
CROWDPOSE_14 = KeypointSchema((
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
    "head_top", "upper_neck",
), "crowdpose14")

HALPE_26 = KeypointSchema(COCO_17.names + (
    "head_top", "upper_neck", "pelvis", "thorax", "mid_spine",
    "left_big_toe", "right_big_toe", "left_heel", "right_heel",
), "halpe26")

BUILTIN_SCHEMAS: Dict[str, KeypointSchema] = {
    s.schema_id: s for s in (COCO_17, MPII_16, CROWDPOSE_14, HALPE_26)
}


def load_coco_schema(annotation_json: bytes) -> KeypointSchema:
    """Keypoint names of the (person) category in a COCO annotation file"""
    try:
        text = annotation_json.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"annotation file is not UTF-8: {e.reason}", e.start)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", len(text[:e.pos].encode("utf-8")))

    categories = doc.get("categories") if isinstance(doc, dict) else None
    if not isinstance(categories, list):
        raise SchemaError("annotation file has no categories list")
    with_kpts = [c for c in categories if isinstance(c, dict) and "keypoints" in c]
    if not with_kpts:
        raise SchemaError("no category defines a keypoints field")
    person = [c for c in with_kpts if c.get("name") == "person"]
    category = (person or with_kpts)[0]
    names = category["keypoints"]
    if not isinstance(names, list) or not names:
        raise SchemaError("keypoints field must be a non-empty list")
    if not all(isinstance(n, str) for n in names):
        raise SchemaError("keypoint names must be strings")
    return KeypointSchema(tuple(names), str(category.get("name", "coco")))


def resolve_schema(ref: str, base_dir: Optional[Path] = None) -> KeypointSchema:
    """Built-in schema id, or a path to a COCO annotation JSON"""
    if ref in BUILTIN_SCHEMAS:
        return BUILTIN_SCHEMAS[ref]
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return load_coco_schema(path.read_bytes())


# =============================================================================
# SYNTHETIC SCENES
# =============================================================================

@dataclass(frozen=True)
class PoseDistribution:
    """Mean/std (radians) per joint angle; 0 points straight down, pi straight up"""

    torso: Tuple[float, float]
    upper_arm: Tuple[float, float]
    forearm: Tuple[float, float]
    thigh: Tuple[float, float]
    shin: Tuple[float, float]
    head: Tuple[float, float]


POSE_DISTRIBUTIONS: Dict[str, PoseDistribution] = {
    "upright": PoseDistribution(torso=(0.0, 0.08), upper_arm=(0.25, 0.2), forearm=(0.15, 0.25),
                                thigh=(0.1, 0.08), shin=(0.0, 0.08), head=(0.0, 0.1)),
    "athletic": PoseDistribution(torso=(0.0, 0.25), upper_arm=(2.3, 0.45), forearm=(0.6, 0.5),
                                 thigh=(0.55, 0.25), shin=(-0.45, 0.35), head=(0.0, 0.2)),
}

SKELETON_BONES: Tuple[Tuple[str, str], ...] = (
    ("pelvis", "thorax"), ("thorax", "upper_neck"), ("upper_neck", "head_top"),
    ("left_shoulder", "right_shoulder"), ("left_hip", "right_hip"),
    ("left_shoulder", "left_elbow"), ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"), ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"), ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"), ("right_knee", "right_ankle"),
    ("left_ankle", "left_big_toe"), ("right_ankle", "right_big_toe"),
)


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    name: str
    schema: KeypointSchema
    n_train: int = 512
    n_val: int = 128
    person_count_range: Tuple[int, int] = (1, 1)
    occlusion_rate: float = 0.05
    pose_distribution_id: str = "upright"
    noise_level: float = 0.02
    seed: int = 0
    image_size: int = 8
    metric: str = "ap"

    def __post_init__(self):
        if self.n_train <= 0 or self.n_val <= 0:
            raise DataError(f"{self.name}: n_train and n_val must be positive")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise DataError(f"{self.name}: occlusion_rate must be within [0, 1]")
        lo, hi = self.person_count_range
        if lo < 1 or hi < lo:
            raise DataError(f"{self.name}: invalid person_count_range {self.person_count_range}")
        if self.pose_distribution_id not in POSE_DISTRIBUTIONS and self.pose_distribution_id != "mixed":
            raise DataError(f"{self.name}: unknown pose distribution {self.pose_distribution_id!r}")
        if self.metric not in ("pck", "ap"):
            raise DataError(f"{self.name}: metric must be 'pck' or 'ap'")
        if self.image_size < 2:
            raise DataError(f"{self.name}: image_size must be at least 2")

    @property
    def total(self) -> int:
        return self.n_train + self.n_val


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    keypoints: Tuple[Tuple[float, float, int], ...]
    person_count: int
    figure_scale: float


def _draw_angle(rng: np.random.Generator, stats: Tuple[float, float]) -> float:
    return float(rng.normal(stats[0], stats[1]))


def _limb(start: np.ndarray, angle: float, side: float, length: float) -> np.ndarray:
    return start + length * np.array([side * np.sin(angle), np.cos(angle)])


def figure_joints(rng: np.random.Generator, dist: PoseDistribution, center: np.ndarray,
                  height: float) -> Dict[str, np.ndarray]:
    """Named 2-D joint positions of one stick figure (y grows downwards)"""
    s = height
    torso = _draw_angle(rng, dist.torso)
    up = np.array([np.sin(torso), -np.cos(torso)])
    across = np.array([np.cos(torso), np.sin(torso)])
    j: Dict[str, np.ndarray] = {}
    j["pelvis"] = center
    j["thorax"] = center + 0.32 * s * up
    j["mid_spine"] = 0.5 * (j["pelvis"] + j["thorax"])
    j["upper_neck"] = j["thorax"] + 0.07 * s * up
    head = torso + _draw_angle(rng, dist.head)
    head_up = np.array([np.sin(head), -np.cos(head)])
    j["head_top"] = j["upper_neck"] + 0.16 * s * head_up
    j["nose"] = j["upper_neck"] + 0.08 * s * head_up
    for side, sign in (("left", 1.0), ("right", -1.0)):
        j[f"{side}_eye"] = j["nose"] + s * (0.025 * sign * across + 0.025 * head_up)
        j[f"{side}_ear"] = j["nose"] + s * (0.05 * sign * across + 0.01 * head_up)
        shoulder = j["thorax"] + 0.1 * s * sign * across
        hip = j["pelvis"] + 0.07 * s * sign * across
        j[f"{side}_shoulder"] = shoulder
        j[f"{side}_hip"] = hip
        upper = _draw_angle(rng, dist.upper_arm)
        elbow = _limb(shoulder, upper, sign, 0.16 * s)
        j[f"{side}_elbow"] = elbow
        j[f"{side}_wrist"] = _limb(elbow, upper + _draw_angle(rng, dist.forearm), sign, 0.14 * s)
        thigh = _draw_angle(rng, dist.thigh)
        knee = _limb(hip, thigh, sign, 0.24 * s)
        j[f"{side}_knee"] = knee
        ankle = _limb(knee, thigh + _draw_angle(rng, dist.shin), sign, 0.24 * s)
        j[f"{side}_ankle"] = ankle
        j[f"{side}_heel"] = ankle + np.array([-0.02 * s * sign, 0.03 * s])
        j[f"{side}_big_toe"] = ankle + np.array([0.06 * s * sign, 0.03 * s])
    return j


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def rasterize(joints: Dict[str, np.ndarray], image: np.ndarray, intensity: float):
    """Anti-aliased limbs: coverage falls off linearly within one pixel of the bone"""
    size = image.shape[0]
    centers = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(centers, centers)
    width = 1.0 / size
    for a, b in SKELETON_BONES:
        d = _segment_distance(px, py, joints[a], joints[b])
        np.maximum(image, intensity * np.clip(1.0 - d / width, 0.0, 1.0), out=image)


def generate_scene(config: SyntheticDatasetConfig, index: int) -> Scene:
    """Deterministic in (config.seed, index); figure 0 is the annotated one"""
    if not 0 <= index < config.total:
        raise DataError(f"scene index {index} outside [0, {config.total})")
    rng = np.random.default_rng([config.seed, index])

    def pick_distribution() -> PoseDistribution:
        if config.pose_distribution_id == "mixed":
            return POSE_DISTRIBUTIONS["athletic" if rng.random() < 0.5 else "upright"]
        return POSE_DISTRIBUTIONS[config.pose_distribution_id]

    lo, hi = config.person_count_range
    persons = int(rng.integers(lo, hi + 1))
    height = float(rng.uniform(0.6, 0.8))
    center = np.array([0.5 + rng.uniform(-0.06, 0.06), 0.5 + rng.uniform(-0.03, 0.03)])
    joints = {k: np.clip(v, 0.0, 1.0) for k, v in figure_joints(rng, pick_distribution(), center, height).items()}

    size = config.image_size
    image = np.zeros((size, size))
    for _ in range(persons - 1):
        offset = rng.uniform(0.25, 0.45) * (1 if rng.random() < 0.5 else -1)
        other_center = center + np.array([offset, rng.uniform(-0.05, 0.05)])
        other = figure_joints(rng, pick_distribution(), other_center, height * rng.uniform(0.6, 0.9))
        rasterize(other, image, 0.6)
    rasterize(joints, image, 1.0)

    keypoints = []
    for name in config.schema.names:
        if name not in joints:
            keypoints.append((0.0, 0.0, 0))
            continue
        x, y = (float(v) for v in joints[name])
        if rng.random() < config.occlusion_rate:
            u, v = min(int(x * size), size - 1), min(int(y * size), size - 1)
            image[v, u] = 0.3
            keypoints.append((x, y, 0))
        else:
            keypoints.append((x, y, 1))

    if config.noise_level > 0:
        image = image + rng.normal(0.0, config.noise_level, size=image.shape)

    ys = [p[1] for p in joints.values()]
    figure_scale = max(max(ys) - min(ys), 1.0 / size)
    return Scene(image.reshape(-1), tuple(keypoints), persons, float(figure_scale))


def cell_of(x: float, y: float, grid: Tuple[int, int]) -> Tuple[int, int]:
    """(column, row) of the grid cell containing normalized point (x, y)"""
    hg, wg = grid
    return min(max(int(x * wg), 0), wg - 1), min(max(int(y * hg), 0), hg - 1)


def cell_center(col: int, row: int, grid: Tuple[int, int]) -> Tuple[float, float]:
    hg, wg = grid
    return (col + 0.5) / wg, (row + 0.5) / hg


def encode_heatmaps(scene: Scene, schema_mapping: SchemaMapping, grid: Tuple[int, int] = (8, 8),
                    sigma: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized Gaussian (peak 1) at each visible keypoint's cell, in union channels"""
    if not sigma > 0:
        raise DataError(f"heatmap sigma must be positive, got {sigma}")
    hg, wg = grid
    k_union = schema_mapping.target.count
    targets = np.zeros((k_union, hg, wg))
    mask = np.zeros(k_union)
    rows, cols = np.mgrid[0:hg, 0:wg]
    for (x, y, visible), channel in zip(scene.keypoints, schema_mapping.index_map):
        if not visible:
            continue
        cu, cv = cell_of(x, y, grid)
        targets[channel] = np.exp(-((cols - cu) ** 2 + (rows - cv) ** 2) / (2.0 * sigma ** 2))
        mask[channel] = 1.0
    return targets, mask


# =============================================================================
# DATASETS AND SCENARIOS
# =============================================================================

@dataclass
class KeypointDataset:
    """One split of a synthetic dataset, encoded against a cumulative schema"""

    name: str
    mapping: SchemaMapping
    inputs: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    keypoints: np.ndarray
    figure_scales: np.ndarray
    metric: str = "ap"

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def schema(self) -> KeypointSchema:
        return self.mapping.source


def materialize(config: SyntheticDatasetConfig, mapping: SchemaMapping, split: str = "train",
                grid: Tuple[int, int] = (8, 8), sigma: float = 1.0) -> KeypointDataset:
    if split == "train":
        indices = range(0, config.n_train)
    elif split == "val":
        indices = range(config.n_train, config.total)
    else:
        raise DataError(f"unknown split {split!r}")
    scenes = [generate_scene(config, i) for i in indices]
    encoded = [encode_heatmaps(s, mapping, grid, sigma) for s in scenes]
    return KeypointDataset(
        name=config.name,
        mapping=mapping,
        inputs=np.stack([s.image for s in scenes]),
        targets=np.stack([t for t, _ in encoded]),
        masks=np.stack([m for _, m in encoded]),
        keypoints=np.array([s.keypoints for s in scenes], dtype=np.float64),
        figure_scales=np.array([s.figure_scale for s in scenes]),
        metric=config.metric,
    )


@dataclass(frozen=True)
class ScenarioStep:
    config: SyntheticDatasetConfig
    mapping: SchemaMapping
    cumulative: KeypointSchema


def build_scenario(datasets: Sequence[SyntheticDatasetConfig]) -> List[ScenarioStep]:
    """Fold schema_union left to right over the dataset sequence"""
    if not datasets:
        raise ScenarioError("a scenario needs at least one dataset")
    first = datasets[0]
    cumulative = first.schema
    steps = [ScenarioStep(first, identity_mapping(first.schema), cumulative)]
    for cfg in datasets[1:]:
        cumulative, _, incoming = schema_union(cumulative, cfg.schema)
        steps.append(ScenarioStep(cfg, incoming, cumulative))
    return steps


PRESETS: Dict[str, dict] = {
    "synthetic-coco": dict(schema=COCO_17, pose_distribution_id="upright", metric="ap", seed=101),
    "synthetic-mpii": dict(schema=MPII_16, pose_distribution_id="athletic", metric="pck", seed=202),
    "synthetic-crowd": dict(schema=CROWDPOSE_14, pose_distribution_id="mixed", metric="ap", seed=303,
                            person_count_range=(2, 4), occlusion_rate=0.3),
    "synthetic-halpe": dict(schema=HALPE_26, pose_distribution_id="upright", metric="ap", seed=404),
}

REFERENCE_SEQUENCE = ("synthetic-coco", "synthetic-mpii", "synthetic-crowd")


def preset(name: str, **overrides) -> SyntheticDatasetConfig:
    if name not in PRESETS:
        raise DataError(f"unknown dataset preset {name!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[name])
    fields.update(overrides)
    fields.setdefault("name", name)
    return SyntheticDatasetConfig(**fields)


def export_fixtures(config: SyntheticDatasetConfig, path: Path, split: str = "val") -> int:
    """Scenes as JSON lines; images are base64 little-endian float64 grids"""
    indices = range(config.n_train) if split == "train" else range(config.n_train, config.total)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i in indices:
            scene = generate_scene(config, i)
            record = {
                "dataset": config.name,
                "index": i,
                "image_shape": [config.image_size, config.image_size],
                "image": base64.b64encode(scene.image.astype("<f8").tobytes()).decode("ascii"),
                "names": list(config.schema.names),
                "keypoints": [list(k) for k in scene.keypoints],
                "person_count": scene.person_count,
                "figure_scale": scene.figure_scale,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info("✅ Exported %d %s scenes to %s", len(indices), split, path)
    return len(indices)
