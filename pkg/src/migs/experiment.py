"""Training runs, resumption and fine-tune/evaluate sweeps shared by the CLI and the slow tests."""
from __future__ import annotations

import csv
import json
import logging
import os
import re
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import (
    load_checkpoint,
    restore_rng,
    rng_state,
    save_checkpoint,
    split_prefixed,
    flatten_optimizer_state,
    unflatten_optimizer_state,
)
from .config import ConfigError, ExperimentConfig
from .evaluation import MetricsReport, evaluate_task
from .features import FeatureExtractor
from .losses import LossBreakdown
from .meta import SceneGraphLearner, baseline_train, finetune, make_rngs, meta_train, select_shots
from .model import ModelConfig, SceneGraphToImage
from .scenegraph import SceneGraph, Vocabulary, validate
from .synthdata import DatasetManifest, default_vocabulary, load_manifest

log = logging.getLogger(__name__)

METHODS = ("migs", "baseline")
CURVE_COLUMNS = ["iteration", "tasks"] + [f.name for f in fields(LossBreakdown)]
_CKPT_RE = re.compile(r"ckpt_(\d+)\.ckpt$")


def build_learner(model_config: ModelConfig, seed: int, extractor_seed: int = 0) -> SceneGraphLearner:
    torch.manual_seed(seed)
    model = SceneGraphToImage(model_config)
    return SceneGraphLearner(model, FeatureExtractor(seed=extractor_seed))


def source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"migs-{__version__}"


# --- checkpoints -------------------------------------------------------------------------------


def write_state(path: Path, theta, header: dict, optimizer_state: Optional[dict] = None) -> None:
    tensors = {f"model.{k}": v for k, v in theta.items()}
    if optimizer_state:
        tensors.update(flatten_optimizer_state(optimizer_state))
    save_checkpoint(path, tensors, header)


def read_state(path: Path):
    """-> (header, model state, flat optimizer tensors)."""
    header, tensors = load_checkpoint(path)
    theta, rest = split_prefixed(tensors, "model.")
    return header, theta, rest


def latest_checkpoint(run_dir: Path) -> Optional[Path]:
    found = []
    for p in Path(run_dir).glob("ckpt_*.ckpt"):
        m = _CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def model_from_checkpoint(path: Path, extractor_seed: int = 0):
    header, theta, _ = read_state(path)
    cfg = ModelConfig.from_dict(header["experiment_config"]["model"])
    learner = build_learner(cfg, 0, extractor_seed)
    learner.load(theta)
    return header, learner, theta


# --- training ---------------------------------------------------------------------------------


class CurveWriter:
    """Training-curve CSV with one row per outer iteration (baseline: per k steps)."""

    def __init__(self, path: Path, keep_upto: Optional[int] = None):
        self.path = Path(path)
        rows = []
        if keep_upto is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) <= keep_upto]
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, CURVE_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def __call__(self, record: dict) -> None:
        row = {c: record.get(c, "") for c in CURVE_COLUMNS}
        row["tasks"] = ";".join(record.get("tasks", []))
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, CURVE_COLUMNS, lineterminator="\n").writerow(row)


def load_pools(manifest: DatasetManifest, task_ids: Sequence[str]) -> dict[str, list]:
    return {tid: manifest.load_task(tid) for tid in task_ids}


def train(
    method: str,
    cfg: ExperimentConfig,
    data_dir: Path,
    run_dir: Path,
    resume: bool = False,
    manifest: Optional[DatasetManifest] = None,
    pools: Optional[dict] = None,
) -> Path:
    """Meta-train ("migs") or jointly train ("baseline"); returns the final checkpoint path."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest or load_manifest(data_dir)
    if tuple(manifest.image_size) != tuple(cfg.model.image_size):
        raise ConfigError(f"dataset image size {manifest.image_size} != model image size {cfg.model.image_size}")
    pools = pools or load_pools(manifest, manifest.train_task_ids)
    learner = build_learner(cfg.model, cfg.seed, cfg.eval.extractor_seed)
    chash = cfg.hash()
    base_header = {
        "method": method,
        "config_hash": chash,
        "experiment_config": cfg.to_dict(),
        "vocabulary": manifest.vocabulary.to_dict(),
    }
    theta, rngs, start, opt_state = None, None, 0, None
    ckpt = latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        header, theta, rest = read_state(ckpt)
        if header.get("config_hash") != chash or header.get("method") != method:
            raise ConfigError(f"{ckpt} was written by a different config or method")
        start = int(header["outer_iteration"])
        rngs = (restore_rng(header["rng_state"]["task"]), restore_rng(header["rng_state"]["batch"]))
        if rest:
            learner.load(theta)
            opt_state = unflatten_optimizer_state(
                rest, {g: o.state_dict() for g, o in learner.make_optimizers(cfg.inner).items()}
            )
        log.info("resuming %s from %s at iteration %d", method, ckpt, start)
    rngs = rngs or make_rngs(cfg.seed)
    curve = CurveWriter(run_dir / "curve.csv", keep_upto=start if ckpt is not None else None)
    written = []

    def save(theta, iteration, rngs, opt=None):
        path = run_dir / f"ckpt_{iteration:06d}.ckpt"
        header = dict(base_header, outer_iteration=iteration,
                      rng_state={"task": rng_state(rngs[0]), "batch": rng_state(rngs[1])})
        write_state(path, theta, header, opt)
        written.append(str(path))

    started = time.time()
    if method == "migs":
        theta = meta_train(pools, cfg.inner, cfg.outer, learner, theta=theta, rngs=rngs, start_iteration=start,
                           checkpoint_fn=save, log_fn=curve)
        final_iteration = cfg.outer.iterations
    else:
        k = max(cfg.inner.k, 1)
        steps = cfg.total_baseline_steps

        def save_steps(theta, step, rngs, opt):
            save(theta, step // k, rngs, opt)

        theta = baseline_train(
            pools, cfg.inner, steps, learner, theta=theta, rngs=rngs, start_step=start * k,
            optimizer_state=opt_state, log_every=k, checkpoint_every=cfg.outer.checkpoint_every * k,
            checkpoint_fn=save_steps, log_fn=curve, divergence_bound=cfg.outer.divergence_bound,
        )
        final_iteration = steps // k
    final = run_dir / "final.ckpt"
    write_state(final, theta, dict(base_header, outer_iteration=final_iteration,
                                   rng_state={"task": rng_state(rngs[0]), "batch": rng_state(rngs[1])}))
    record = {
        "config_hash": chash,
        "source_revision": source_revision(),
        "method": method,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "checkpoints": written + [str(final)],
        "curve": str(run_dir / "curve.csv"),
    }
    (run_dir / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return final


# --- fine-tune and evaluate -------------------------------------------------------------------


def cell_seed(seed: int, task_index: int, shots: int) -> int:
    """Shared by every method so all of them see the same shots and noise for a cell."""
    return int(np.random.default_rng([seed, task_index, shots, 5]).integers(2**31))


def method_label(header: dict) -> str:
    decoder = header["experiment_config"]["model"]["decoder"]
    return f"{header.get('method', 'model')}/{decoder}"


def run_cell(
    checkpoint: Path,
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    task_id: str,
    shots: int,
    scenes: Optional[list] = None,
    label: Optional[str] = None,
):
    """Fine-tune one checkpoint on one test task at one shot count and evaluate it."""
    header, learner, theta = model_from_checkpoint(checkpoint, cfg.eval.extractor_seed)
    scenes = scenes if scenes is not None else manifest.load_task(task_id)
    test = [scenes[i] for i in manifest.test_split(task_id)]
    pool = [scenes[i] for i in manifest.finetune_split(task_id)]
    seed = cell_seed(cfg.seed, manifest.test_task_ids.index(task_id), shots)
    shot_ids = [pool[int(i)].scene_id for i in select_shots(len(pool), shots, seed)]
    adapted = finetune(theta, pool, shots, cfg.finetune_steps, cfg.inner, learner, seed)
    learner.load(adapted)
    return evaluate_task(
        learner.generate, test, learner.extractor, task_id, label or method_label(header), shots, shot_ids,
        seed, cfg.eval.num_clusters, cfg.eval.num_angles, cfg.eval.kid_block_size, cfg.eval.metrics,
    )


def _cell_worker(args):
    checkpoint, cfg_dict, data_dir, task_id, shots = args
    torch.set_num_threads(1)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_cell(Path(checkpoint), cfg, load_manifest(data_dir), task_id, shots)


def num_workers(default: int = 1) -> int:
    raw = os.environ.get("MIGS_NUM_WORKERS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"MIGS_NUM_WORKERS must be an integer, got {raw!r}") from exc


def finetune_eval(
    cfg: ExperimentConfig,
    data_dir: Path,
    checkpoints: Sequence[Path],
    shots: Optional[Sequence[int]] = None,
    workers: Optional[int] = None,
) -> MetricsReport:
    manifest = load_manifest(data_dir)
    shots = list(shots or cfg.eval.shots)
    if max(shots) > manifest.max_shots:
        raise ConfigError(f"shots {shots} exceed the dataset's max_shots={manifest.max_shots}")
    workers = workers or num_workers()
    cells = [(str(c), t, s) for c in checkpoints for t in manifest.test_task_ids for s in shots]
    if workers > 1 and len(cells) > 1:
        jobs = [(c, cfg.to_dict(), str(data_dir), t, s) for c, t, s in cells]
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            rows = list(ex.map(_cell_worker, jobs))
    else:
        cache: dict = {}
        rows = []
        for c, t, s in cells:
            if t not in cache:
                cache = {t: manifest.load_task(t)}
            rows.append(run_cell(Path(c), cfg, manifest, t, s, cache[t]))
    fingerprint = FeatureExtractor(seed=cfg.eval.extractor_seed).fingerprint()
    return MetricsReport(rows, fingerprint, cfg.hash())


def generate_from_checkpoint(checkpoint: Path, graph: SceneGraph, seed: int) -> np.ndarray:
    header, learner, theta = model_from_checkpoint(checkpoint)
    vocab = Vocabulary.from_dict(header["vocabulary"]) if "vocabulary" in header else default_vocabulary()
    result = validate(graph, vocab)
    if not result.ok:
        raise ValueError("invalid scene graph: " + "; ".join(result.violations))
    return learner.generate(graph, seed)
