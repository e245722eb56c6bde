"""Scene-graph domain types, validation, JSON interchange and spatial relation inference."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SPATIAL_PREDICATES = ("left of", "right of", "above", "below", "inside", "surrounding")

# Equal boxes (within this margin on every edge) are not treated as containing each other.
CONTAINMENT_EPS = 1e-6


class SceneParseError(ValueError):
    """Raised when a scene document cannot be decoded into a valid AnnotatedScene."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


@dataclass(frozen=True)
class Vocabulary:
    object_categories: tuple[str, ...]
    predicate_categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "object_categories", tuple(self.object_categories))
        object.__setattr__(self, "predicate_categories", tuple(self.predicate_categories))
        for label, names in (("object", self.object_categories), ("predicate", self.predicate_categories)):
            if not names:
                raise ValueError(f"{label} category list is empty")
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {label} category names")
        missing = [p for p in SPATIAL_PREDICATES if p not in self.predicate_categories]
        if missing:
            raise ValueError(f"vocabulary lacks spatial predicates: {missing}")

    @property
    def num_objects(self) -> int:
        return len(self.object_categories)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_categories)

    def object_index(self, name: str) -> int:
        return self.object_categories.index(name)

    def predicate_index(self, name: str) -> int:
        return self.predicate_categories.index(name)

    def to_dict(self) -> dict:
        return {"objects": list(self.object_categories), "predicates": list(self.predicate_categories)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(tuple(data["objects"]), tuple(data["predicates"]))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates, y pointing down."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"invalid box {vals}")

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, other: "BoundingBox", eps: float = CONTAINMENT_EPS) -> bool:
        """True if ``other`` lies within this box and the two are not equal up to ``eps``."""
        inside = (
            self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1
        )
        if not inside:
            return False
        gap = max(other.x0 - self.x0, other.y0 - self.y0, self.x1 - other.x1, self.y1 - other.y1)
        return gap > eps


@dataclass
class SceneGraph:
    objects: list[int]
    edges: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.objects = [int(o) for o in self.objects]
        self.edges = [tuple(int(v) for v in e) for e in self.edges]


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(graph: SceneGraph, vocab: Vocabulary) -> ValidationResult:
    """Collect every invariant violation of ``graph`` against ``vocab``."""
    violations = []
    n = len(graph.objects)
    if n == 0:
        violations.append("no objects")
    for i, cat in enumerate(graph.objects):
        if not 0 <= cat < vocab.num_objects:
            violations.append(f"unknown object category {cat} at node {i}")
    for k, edge in enumerate(graph.edges):
        if len(edge) != 3:
            violations.append(f"malformed edge {k}")
            continue
        s, p, o = edge
        if not 0 <= s < n or not 0 <= o < n:
            violations.append(f"edge endpoint out of range in edge {k}")
        if s == o:
            violations.append(f"self-edge at edge {k}")
        if not 0 <= p < vocab.num_predicates:
            violations.append(f"unknown predicate {p} in edge {k}")
    return ValidationResult(violations)


@dataclass
class AnnotatedScene:
    """One image/graph pair. ``image`` is HxWx3 float in [0, 1]; it may be absent when only the
    document was decoded and ``image_ref`` was not resolved."""

    graph: SceneGraph
    boxes: list[BoundingBox]
    image: Optional[np.ndarray] = None
    attributes: dict[str, str] = field(default_factory=dict)
    image_ref: Optional[str] = None
    scene_id: Optional[str] = None

    def __post_init__(self):
        if len(self.boxes) != len(self.graph.objects):
            raise ValueError(
                f"{len(self.boxes)} boxes for {len(self.graph.objects)} objects"
            )
        if self.image is not None:
            if self.image.ndim != 3 or self.image.shape[2] != 3 or min(self.image.shape[:2]) <= 0:
                raise ValueError(f"image must be HxWx3, got {self.image.shape}")


def _relation_name(a: BoundingBox, b: BoundingBox) -> str:
    if a.contains(b):
        return "surrounding"
    if b.contains(a):
        return "inside"
    (ax, ay), (bx, by) = a.center, b.center
    angle = math.degrees(math.atan2(by - ay, bx - ax))
    if -45.0 <= angle < 45.0:
        return "left of"
    if 45.0 <= angle < 135.0:
        return "above"
    if -135.0 <= angle < -45.0:
        return "below"
    return "right of"


def infer_spatial_relations(
    boxes: Sequence[BoundingBox], vocab: Vocabulary
) -> list[tuple[int, int, int]]:
    """One edge ``(i, predicate, j)`` for every pair ``i < j``, read as "box i <predicate> box j".

    Containment wins over direction; otherwise the predicate is picked from 90 degree sectors
    of the center-offset angle (image y axis points down, so a positive offset means j is lower).
    """
    for b in boxes:
        if not isinstance(b, BoundingBox):
            raise TypeError(f"expected BoundingBox, got {type(b).__name__}")
    edges = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            name = _relation_name(boxes[i], boxes[j])
            edges.append((i, vocab.predicate_index(name), j))
    return edges


# --- JSON interchange -----------------------------------------------------------------------


def scene_to_dict(scene: AnnotatedScene, image_ref: Optional[str] = None) -> dict:
    ref = image_ref if image_ref is not None else scene.image_ref
    return {
        "objects": list(scene.graph.objects),
        "edges": [list(e) for e in scene.graph.edges],
        "boxes": [list(b.as_tuple()) for b in scene.boxes],
        "attributes": dict(sorted(scene.attributes.items())),
        "image": ref,
    }


def to_json(scene: AnnotatedScene, image_ref: Optional[str] = None) -> str:
    return json.dumps(scene_to_dict(scene, image_ref), indent=1, sort_keys=True) + "\n"


def scene_from_dict(data: dict, vocab: Optional[Vocabulary] = None) -> AnnotatedScene:
    if not isinstance(data, dict):
        raise SceneParseError("scene document must be a JSON object")
    for key in ("objects", "edges", "boxes"):
        if key not in data:
            raise SceneParseError(f"missing field {key!r}")
    try:
        graph = SceneGraph(list(data["objects"]), [tuple(e) for e in data["edges"]])
        boxes = [BoundingBox(*map(float, b)) for b in data["boxes"]]
    except (TypeError, ValueError) as exc:
        raise SceneParseError(f"bad scene field: {exc}") from exc
    if not graph.objects:
        raise SceneParseError("scene has an empty object list")
    for e in graph.edges:
        if len(e) != 3:
            raise SceneParseError(f"edge {list(e)} is not a triplet")
    if vocab is not None:
        result = validate(graph, vocab)
        if not result.ok:
            raise SceneParseError("invalid scene graph: " + "; ".join(result.violations))
    else:
        n = len(graph.objects)
        for s, _, o in graph.edges:
            if s == o or not (0 <= s < n and 0 <= o < n):
                raise SceneParseError(f"invalid edge endpoints ({s}, {o})")
    attributes = {str(k): str(v) for k, v in (data.get("attributes") or {}).items()}
    try:
        return AnnotatedScene(graph, boxes, None, attributes, data.get("image"))
    except ValueError as exc:
        raise SceneParseError(str(exc)) from exc


def from_json(text: str, vocab: Optional[Vocabulary] = None) -> AnnotatedScene:
    """Decode a scene document. The image is left unresolved; see :func:`load_scene`."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    return scene_from_dict(data, vocab)


def load_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(image: np.ndarray, path: Path) -> None:
    """Write an HxWx3 [0,1] array as 8-bit RGB PNG."""
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_scene(path: Path, vocab: Optional[Vocabulary] = None, with_image: bool = True) -> AnnotatedScene:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read scene {path}: {exc}") from exc
    try:
        scene = from_json(text, vocab)
    except SceneParseError as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    scene.scene_id = path.stem
    if with_image and scene.image_ref:
        scene.image = load_image(path.parent / scene.image_ref)
    return scene


def graph_from_json(text: str, vocab: Optional[Vocabulary] = None) -> SceneGraph:
    """Decode a graph-only document (``objects`` and ``edges``; other fields ignored)."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    if not isinstance(data, dict) or "objects" not in data:
        raise SceneParseError("graph document needs an 'objects' field")
    try:
        graph = SceneGraph(list(data["objects"]), [tuple(e) for e in data.get("edges", [])])
    except (TypeError, ValueError) as exc:
        raise SceneParseError(f"bad graph field: {exc}") from exc
    if vocab is not None:
        result = validate(graph, vocab)
        if not result.ok:
            raise SceneParseError("invalid scene graph: " + "; ".join(result.violations))
    return graph


def boxes_from_array(arr: Iterable[Sequence[float]]) -> list[BoundingBox]:
    return [BoundingBox(*map(float, b)) for b in arr]
