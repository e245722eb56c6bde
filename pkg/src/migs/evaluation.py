"""Per-task evaluation of a fine-tuned model and the report it produces."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .features import FeatureExtractor, extract_features
from .metrics import fid, kid, prd_f_scores
from .scenegraph import AnnotatedScene, SceneGraph

CSV_COLUMNS = ["task_id", "method", "shots", "fid", "kid", "f8", "f1_8", "n_real", "n_fake"]


class SplitOverlapError(ValueError):
    """Fine-tuning shots and the evaluation split share a scene."""


@dataclass
class MetricsRow:
    task_id: str
    method: str
    shots: int
    fid: float
    kid: float
    f8: float
    f1_8: float
    n_real: int
    n_fake: int


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)
    extractor_fingerprint: str = ""
    config_hash: str = ""

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def sorted_rows(self) -> list[MetricsRow]:
        return sorted(self.rows, key=lambda r: (r.method, r.task_id, r.shots))

    def to_dict(self) -> dict:
        results: dict = {}
        for r in self.sorted_rows():
            cell = {k: v for k, v in asdict(r).items() if k not in ("task_id", "method", "shots")}
            results.setdefault(r.method, {}).setdefault(r.task_id, {})[str(r.shots)] = cell
        return {
            "extractor_fingerprint": self.extractor_fingerprint,
            "config_hash": self.config_hash,
            "results": results,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# extractor_fingerprint={self.extractor_fingerprint} config_hash={self.config_hash}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.sorted_rows():
            writer.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c))
                             for c in CSV_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        rows = []
        for method, tasks in data["results"].items():
            for task_id, cells in tasks.items():
                for shots, cell in cells.items():
                    rows.append(MetricsRow(task_id, method, int(shots), **cell))
        return cls(rows, data.get("extractor_fingerprint", ""), data.get("config_hash", ""))

    def comparison_table(self) -> str:
        """Methods as rows; FID / KID / F8 / F1/8 per shot count as columns, averaged over tasks."""
        methods = sorted({r.method for r in self.rows})
        shots = sorted({r.shots for r in self.rows})
        header = ["method"] + [f"{m}@{s}" for s in shots for m in ("FID", "KID", "F8", "F1/8")]
        lines = [" | ".join(header), " | ".join("---" for _ in header)]
        for method in methods:
            cells = [method]
            for s in shots:
                sel = [r for r in self.rows if r.method == method and r.shots == s]
                if not sel:
                    cells += ["-"] * 4
                    continue
                cells += [
                    f"{np.mean([r.fid for r in sel]):.3f}",
                    f"{np.mean([r.kid for r in sel]):.4f}",
                    f"{np.mean([r.f8 for r in sel]):.3f}",
                    f"{np.mean([r.f1_8 for r in sel]):.3f}",
                ]
            lines.append(" | ".join(cells))
        return "\n".join(lines) + "\n"


def check_disjoint(shot_ids: Iterable[str], test_ids: Iterable[str]) -> None:
    overlap = set(shot_ids) & set(test_ids)
    if overlap:
        raise SplitOverlapError(f"fine-tuning shots overlap the evaluation split: {sorted(overlap)[:5]}")


def image_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index, 13]).integers(2**62))


def evaluate_task(
    generate_fn: Callable[[SceneGraph, int], np.ndarray],
    test_scenes: Sequence[AnnotatedScene],
    extractor: FeatureExtractor,
    task_id: str,
    method: str,
    shots: int,
    shot_ids: Sequence[str] = (),
    seed: int = 0,
    num_clusters: int = 20,
    num_angles: int = 1001,
    kid_block_size: int = 100,
    metrics: Optional[Sequence[str]] = None,
) -> MetricsRow:
    """Generate one image per test scene graph and compare against the real test images.

    ``generate_fn(graph, seed)`` returns an [H, W, 3] image in [0, 1].
    """
    if not test_scenes:
        raise ValueError("empty evaluation split")
    check_disjoint(shot_ids, [s.scene_id for s in test_scenes if s.scene_id is not None])
    metrics = set(metrics or ("fid", "kid", "prd"))
    real = np.stack([np.asarray(s.image, dtype=np.float32) for s in test_scenes])
    fake = np.stack([np.asarray(generate_fn(s.graph, image_seed(seed, k)), dtype=np.float32)
                     for k, s in enumerate(test_scenes)])
    X = extract_features(real, extractor)
    Y = extract_features(fake, extractor)
    nan = float("nan")
    f = fid(X, Y) if "fid" in metrics else nan
    k = kid(X, Y, kid_block_size) if "kid" in metrics else nan
    f8, f18 = prd_f_scores(X, Y, num_clusters, num_angles) if "prd" in metrics else (nan, nan)
    return MetricsRow(task_id, method, int(shots), float(f), float(k), float(f8), float(f18), len(X), len(Y))
