"""Procedural task-structured dataset of rendered shapes.

A task is one combination of background style, palette and density. Scenes inside a task
differ in shape kinds, colors and placement; every scene carries ground-truth boxes and a
spatial scene graph built from them.
"""
from __future__ import annotations

import colorsys
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scenegraph import (
    SPATIAL_PREDICATES,
    AnnotatedScene,
    BoundingBox,
    SceneGraph,
    Vocabulary,
    infer_spatial_relations,
    load_scene,
    save_image,
    to_json,
    validate,
)

log = logging.getLogger(__name__)

BACKGROUND_STYLES = ("day", "dusk", "night")
PALETTES = ("warm", "cool", "mono")
DENSITIES = ("sparse", "dense")
SHAPES = ("circle", "square", "triangle")

# (top, bottom) gradient anchors per style
_BACKGROUNDS = {
    "day": ((0.62, 0.80, 0.97), (0.93, 0.95, 0.98)),
    "dusk": ((0.96, 0.55, 0.22), (0.45, 0.25, 0.45)),
    "night": ((0.04, 0.05, 0.18), (0.01, 0.01, 0.04)),
}

MANIFEST_VERSION = 1


def default_vocabulary() -> Vocabulary:
    objects = tuple(f"{shape}_{palette}" for shape in SHAPES for palette in PALETTES)
    return Vocabulary(objects, SPATIAL_PREDICATES)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    attributes: dict
    seed: int

    def __post_init__(self):
        allowed = {"background_style": BACKGROUND_STYLES, "palette": PALETTES, "density": DENSITIES}
        if set(self.attributes) != set(allowed):
            raise ValueError(f"task attributes must be exactly {sorted(allowed)}")
        for key, values in allowed.items():
            if self.attributes[key] not in values:
                raise ValueError(f"{key}={self.attributes[key]!r} not in {values}")

    @property
    def attribute_tuple(self) -> tuple[str, str, str]:
        a = self.attributes
        return (a["background_style"], a["palette"], a["density"])

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "attributes": dict(sorted(self.attributes.items())), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(data["task_id"], dict(data["attributes"]), int(data["seed"]))


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: tuple[float, float, float]
    box: BoundingBox


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[ShapeSpec, ...]
    background: tuple[tuple[float, float, float], tuple[float, float, float]]

    def __post_init__(self):
        for s in self.shapes:
            if s.shape not in SHAPES:
                raise ValueError(f"unknown shape {s.shape!r}")
            if not all(0.0 <= c <= 1.0 for c in s.color):
                raise ValueError(f"color out of range: {s.color}")


def scene_rng(task: TaskSpec, index: int) -> np.random.Generator:
    """Generator for the ``index``-th scene of ``task``; scenes are independent of each other."""
    return np.random.default_rng([task.seed, index])


def _palette_color(palette: str, rng: np.random.Generator) -> tuple[float, float, float]:
    if palette == "mono":
        v = float(rng.uniform(0.15, 0.95))
        return (v, v, v)
    if palette == "warm":
        hue = float(rng.uniform(-0.03, 0.14)) % 1.0
    else:
        hue = float(rng.uniform(0.45, 0.72))
    sat = float(rng.uniform(0.6, 1.0))
    val = float(rng.uniform(0.55, 1.0))
    return tuple(float(c) for c in colorsys.hsv_to_rgb(hue, sat, val))


def _jitter(color, rng, amount=0.04):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0.0, 1.0)) for c in color)


def sample_scene(task: TaskSpec, rng: np.random.Generator) -> SceneSpec:
    attrs = task.attributes
    if attrs["density"] == "sparse":
        count = int(rng.integers(2, 4))
    else:
        count = int(rng.integers(4, 7))
    shapes = []
    for _ in range(count):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        w = float(rng.uniform(0.15, 0.45))
        h = float(rng.uniform(0.15, 0.45))
        x0 = float(rng.uniform(0.0, 1.0 - w))
        y0 = float(rng.uniform(0.0, 1.0 - h))
        box = BoundingBox(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0))
        shapes.append(ShapeSpec(kind, _palette_color(attrs["palette"], rng), box))
    top, bottom = _BACKGROUNDS[attrs["background_style"]]
    return SceneSpec(tuple(shapes), (_jitter(top, rng), _jitter(bottom, rng)))


def shape_mask(shape: str, box: BoundingBox, H: int, W: int) -> np.ndarray:
    """Boolean HxW coverage of a shape, sampled at pixel centers."""
    px = (np.arange(W) + 0.5) / W
    py = (np.arange(H) + 0.5) / H
    X, Y = np.meshgrid(px, py)
    inside_box = (X >= box.x0) & (X < box.x1) & (Y >= box.y0) & (Y < box.y1)
    if shape == "square":
        return inside_box
    cx, cy = box.center
    hw, hh = 0.5 * (box.x1 - box.x0), 0.5 * (box.y1 - box.y0)
    if shape == "circle":
        return inside_box & (((X - cx) / hw) ** 2 + ((Y - cy) / hh) ** 2 <= 1.0)
    if shape == "triangle":
        # apex at top center, base along the bottom edge
        t = (Y - box.y0) / (box.y1 - box.y0)
        return inside_box & (np.abs(X - cx) <= hw * t)
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: SceneSpec, H: int, W: int) -> np.ndarray:
    if H < 16 or W < 16:
        raise ValueError(f"image size must be at least 16x16, got {H}x{W}")
    top, bottom = (np.asarray(c, dtype=np.float64) for c in scene.background)
    t = ((np.arange(H) + 0.5) / H)[:, None, None]
    image = np.broadcast_to(top * (1.0 - t) + bottom * t, (H, W, 3)).copy()
    for s in scene.shapes:
        image[shape_mask(s.shape, s.box, H, W)] = s.color
    return image.astype(np.float32)


def build_annotated(
    scene: SceneSpec, task: TaskSpec, vocab: Vocabulary, H: int, W: int
) -> AnnotatedScene:
    palette = task.attributes["palette"]
    objects = []
    for s in scene.shapes:
        name = f"{s.shape}_{palette}"
        if name not in vocab.object_categories:
            raise KeyError(f"vocabulary has no category {name!r}")
        objects.append(vocab.object_index(name))
    boxes = [s.box for s in scene.shapes]
    graph = SceneGraph(objects, infer_spatial_relations(boxes, vocab))
    return AnnotatedScene(graph, boxes, render(scene, H, W), dict(task.attributes))


# --- datasets on disk ------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    num_tasks: int = 16
    num_test_tasks: int = 4
    scenes_per_task: int = 64
    # test tasks also need room for the largest shot count plus the held-out split
    test_scenes_per_task: Optional[int] = None
    test_count: int = 16
    max_shots: int = 10
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        all_tasks = len(BACKGROUND_STYLES) * len(PALETTES) * len(DENSITIES)
        if not 1 <= self.num_tasks <= all_tasks:
            raise ValueError(f"num_tasks must be in [1, {all_tasks}]")
        if not 0 <= self.num_test_tasks < self.num_tasks:
            raise ValueError("need at least one training task")
        if self.height < 16 or self.width < 16:
            raise ValueError("image size must be at least 16x16")
        if self.test_scenes_count < self.max_shots + self.test_count:
            raise ValueError(
                f"test tasks need >= max_shots + test_count = {self.max_shots + self.test_count} scenes"
            )

    @property
    def test_scenes_count(self) -> int:
        return self.test_scenes_per_task if self.test_scenes_per_task is not None else self.scenes_per_task

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        return cls(**data)


@dataclass
class DatasetManifest:
    tasks: list[TaskSpec]
    train_task_ids: list[str]
    test_task_ids: list[str]
    scene_counts: dict[str, int]
    image_size: tuple[int, int]
    vocabulary: Vocabulary
    test_count: int
    max_shots: int
    config: dict = field(default_factory=dict)
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids")
        train, test = set(self.train_task_ids), set(self.test_task_ids)
        if train & test:
            raise ValueError("train and test task splits overlap")
        if train | test != set(ids):
            raise ValueError("splits must cover every task")
        for tid in self.test_task_ids:
            if self.scene_counts[tid] < self.max_shots + self.test_count:
                raise ValueError(f"test task {tid} has too few scenes")

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def scene_path(self, task_id: str, k: int) -> Path:
        if self.root is None:
            raise ValueError("manifest is not bound to a directory")
        return self.root / task_id / f"scene_{k}.json"

    def load_task(self, task_id: str, with_images: bool = True) -> list[AnnotatedScene]:
        scenes = []
        for k in range(self.scene_counts[task_id]):
            scene = load_scene(self.scene_path(task_id, k), self.vocabulary, with_images)
            scene.scene_id = f"{task_id}/scene_{k}"
            scenes.append(scene)
        return scenes

    def test_split(self, task_id: str) -> range:
        """Scene indices held out for evaluation; the remainder is the fine-tuning pool."""
        return range(self.test_count)

    def finetune_split(self, task_id: str) -> range:
        return range(self.test_count, self.scene_counts[task_id])

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "tasks": [t.to_dict() for t in self.tasks],
            "train_task_ids": list(self.train_task_ids),
            "test_task_ids": list(self.test_task_ids),
            "scene_counts": dict(self.scene_counts),
            "image_size": list(self.image_size),
            "vocabulary": self.vocabulary.to_dict(),
            "test_count": self.test_count,
            "max_shots": self.max_shots,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict, root: Optional[Path] = None) -> "DatasetManifest":
        if data.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {data.get('version')!r}")
        return cls(
            tasks=[TaskSpec.from_dict(t) for t in data["tasks"]],
            train_task_ids=list(data["train_task_ids"]),
            test_task_ids=list(data["test_task_ids"]),
            scene_counts={k: int(v) for k, v in data["scene_counts"].items()},
            image_size=tuple(data["image_size"]),
            vocabulary=Vocabulary.from_dict(data["vocabulary"]),
            test_count=int(data["test_count"]),
            max_shots=int(data["max_shots"]),
            config=dict(data.get("config", {})),
            root=root,
        )


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def make_tasks(config: DatasetConfig) -> tuple[list[TaskSpec], list[str], list[str]]:
    combos = list(itertools.product(BACKGROUND_STYLES, PALETTES, DENSITIES))
    rng = np.random.default_rng([config.seed, 1])
    order = rng.permutation(len(combos))[: config.num_tasks]
    seeds = np.random.default_rng([config.seed, 2]).integers(0, 2**63 - 1, size=config.num_tasks)
    tasks = []
    for k, (idx, seed) in enumerate(zip(order, seeds)):
        bg, pal, den = combos[idx]
        attrs = {"background_style": bg, "palette": pal, "density": den}
        tasks.append(TaskSpec(f"task_{k:02d}_{bg}_{pal}_{den}", attrs, int(seed)))
    n_train = config.num_tasks - config.num_test_tasks
    return tasks, [t.task_id for t in tasks[:n_train]], [t.task_id for t in tasks[n_train:]]


def generate_dataset(config: DatasetConfig, out_dir: Path) -> DatasetManifest:
    """Write every scene (JSON + PNG) and finally ``manifest.json``."""
    out_dir = Path(out_dir)
    vocab = default_vocabulary()
    tasks, train_ids, test_ids = make_tasks(config)
    counts = {
        t.task_id: (config.test_scenes_count if t.task_id in test_ids else config.scenes_per_task)
        for t in tasks
    }
    H, W = config.height, config.width
    for task in tasks:
        task_dir = out_dir / task.task_id
        try:
            task_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {task_dir}: {exc}") from exc
        for k in range(counts[task.task_id]):
            scene = build_annotated(sample_scene(task, scene_rng(task, k)), task, vocab, H, W)
            result = validate(scene.graph, vocab)
            assert result.ok, result.violations
            png = task_dir / f"scene_{k}.png"
            doc = task_dir / f"scene_{k}.json"
            try:
                save_image(scene.image, png)
                doc.write_text(to_json(scene, png.name), encoding="utf-8")
            except OSError as exc:
                raise OSError(f"cannot write {doc}: {exc}") from exc
        log.info("wrote %d scenes for %s", counts[task.task_id], task.task_id)
    manifest = DatasetManifest(
        tasks, train_ids, test_ids, counts, (H, W), vocab, config.test_count, config.max_shots,
        asdict(config), out_dir,
    )
    path = out_dir / "manifest.json"
    try:
        path.write_text(_dump(manifest.to_dict()), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return manifest


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest.from_dict(data, path.parent)


def in_memory_task(
    task: TaskSpec, count: int, vocab: Optional[Vocabulary] = None, H: int = 64, W: int = 64
) -> list[AnnotatedScene]:
    """Scenes of one task without touching the disk (used by tests and small experiments)."""
    vocab = vocab or default_vocabulary()
    scenes = []
    for k in range(count):
        s = build_annotated(sample_scene(task, scene_rng(task, k)), task, vocab, H, W)
        s.scene_id = f"{task.task_id}/scene_{k}"
        scenes.append(s)
    return scenes


def task_from_attributes(background_style: str, palette: str, density: str, seed: int = 0) -> TaskSpec:
    attrs = {"background_style": background_style, "palette": palette, "density": density}
    return TaskSpec(f"{background_style}_{palette}_{density}", attrs, seed)


def attribute_tuples(tasks: Sequence[TaskSpec]) -> set[tuple[str, str, str]]:
    return {t.attribute_tuple for t in tasks}
