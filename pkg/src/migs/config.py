"""Experiment configuration: one JSON document with a ``profile`` switch.

The profile ({"desk", "paper"}) supplies architecture widths, iteration counts and dataset
sizes; any section given in the document overrides the profile's values key by key.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .checkpoint import config_hash
from .generators import DESK_CHANNELS, PAPER_CHANNELS
from .graphnet import GcnConfig
from .losses import LossWeights
from .meta import InnerConfig, OuterConfig
from .model import ModelConfig
from .synthdata import DatasetConfig


class ConfigError(ValueError):
    pass


PROFILES = {
    "desk": {
        "dataset": {"scenes_per_task": 64, "test_scenes_per_task": 260, "test_count": 100, "max_shots": 160,
                    "height": 32, "width": 32},
        "model": {
            "decoder": "spade", "channels": list(DESK_CHANNELS), "modulation_width": 16, "noise_dim": 64,
            "gcn": {"embed_dim": 32, "num_layers": 5, "propagation_hidden": 128, "update_hidden": 128,
                    "box_head_hidden": 32, "mask_size": 16},
        },
        "outer": {"iterations": 2000},
        "finetune_steps": 100,
    },
    "paper": {
        "dataset": {"scenes_per_task": 500, "test_scenes_per_task": 660, "test_count": 500, "max_shots": 160,
                    "height": 64, "width": 64},
        "model": {"decoder": "spade", "channels": list(PAPER_CHANNELS), "modulation_width": 128, "noise_dim": 256,
                  "gcn": asdict(GcnConfig())},
        "outer": {"iterations": 30000},
        "finetune_steps": 1000,
    },
}


@dataclass
class EvalConfig:
    shots: list[int] = field(default_factory=lambda: [5, 10, 160])
    metrics: list[str] = field(default_factory=lambda: ["fid", "kid", "prd"])
    num_clusters: int = 20
    num_angles: int = 1001
    kid_block_size: int = 100
    extractor_seed: int = 0

    def __post_init__(self):
        if not self.shots or any(int(s) < 1 for s in self.shots):
            raise ConfigError("eval.shots must be a non-empty list of positive integers")
        unknown = set(self.metrics) - {"fid", "kid", "prd"}
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}")
        self.shots = [int(s) for s in self.shots]


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    profile: str
    dataset: DatasetConfig
    model: ModelConfig
    loss: LossWeights
    inner: InnerConfig
    outer: OuterConfig
    eval: EvalConfig
    finetune_steps: int = 100
    baseline_steps: Optional[int] = None  # default: same number of optimization steps as meta-training
    seed: int = 0
    out_dir: Optional[str] = None
    data_dir: Optional[str] = None

    def __post_init__(self):
        if self.dataset.height != self.model.image_size[0] or self.dataset.width != self.model.image_size[1]:
            raise ConfigError("model.image_size must match the dataset image size")
        if max(self.eval.shots) > self.dataset.max_shots:
            raise ConfigError(f"eval.shots {self.eval.shots} exceed dataset.max_shots={self.dataset.max_shots}")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps must be >= 0")

    @property
    def total_baseline_steps(self) -> int:
        if self.baseline_steps is not None:
            return self.baseline_steps
        return self.outer.iterations * self.inner.k * self.outer.tasks_per_step

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        profile = data.pop("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
        unknown = set(data) - {"dataset", "model", "loss", "inner", "outer", "eval", "finetune_steps",
                               "baseline_steps", "seed", "out_dir", "data_dir"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        merged = _merge(PROFILES[profile], data)
        ds = merged.get("dataset", {})
        model = dict(merged.get("model", {}))
        model.setdefault("image_size", [ds.get("height", 64), ds.get("width", 64)])
        try:
            return cls(
                profile=profile,
                dataset=DatasetConfig(**ds),
                model=ModelConfig(**model),
                loss=LossWeights(**merged.get("loss", {})),
                inner=InnerConfig(**merged.get("inner", {})),
                outer=OuterConfig(**merged.get("outer", {})),
                eval=EvalConfig(**merged.get("eval", {})),
                finetune_steps=int(merged.get("finetune_steps", 100)),
                baseline_steps=merged.get("baseline_steps"),
                seed=int(merged.get("seed", 0)),
                out_dir=merged.get("out_dir"),
                data_dir=merged.get("data_dir"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = {
            "profile": self.profile,
            "dataset": asdict(self.dataset),
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "inner": asdict(self.inner),
            "outer": asdict(self.outer),
            "eval": asdict(self.eval),
            "finetune_steps": self.finetune_steps,
            "baseline_steps": self.baseline_steps,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data_dir": self.data_dir,
        }
        d["inner"]["betas"] = list(self.inner.betas)
        return d

    def hash(self) -> str:
        """Hash of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("data_dir")
        return config_hash(d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(data)
