"""Reptile meta-training, inner-loop adaptation, few-shot fine-tuning and the joint baseline.

Training code is written against a small learner interface so the same loops drive both the
scene-graph model and toy problems:

* ``groups``: mapping of group name -> state keys receiving separate outer updates
* ``state()`` / ``load(state)``: snapshot and restore every tensor (parameters and buffers)
* ``make_optimizers(cfg)``: fresh optimizers for one adaptation run
* ``step(batch, optimizers, rng)``: one optimization step, returns a dict of float losses
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .discriminators import crop_objects
from .features import FeatureExtractor
from .losses import (
    LossBreakdown,
    LossWeights,
    aux_obj_loss,
    box_loss,
    gan_loss_d,
    gan_loss_g,
    image_l1,
    multiscale_gan_loss_d,
    multiscale_gan_loss_g,
    perceptual_loss,
    total_task_loss,
)
from .model import GROUPS, SceneGraphToImage, collate, graph_tensors, group_keys
from .scenegraph import SceneGraph

log = logging.getLogger(__name__)

State = dict[str, torch.Tensor]


class DivergenceError(RuntimeError):
    def __init__(self, message: str, losses: Optional[dict] = None):
        super().__init__(message)
        self.losses = losses or {}


@dataclass
class InnerConfig:
    k: int = 10
    lr: float = 1e-4
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    moment_reset: str = "task"  # "task" or "never"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.moment_reset not in ("task", "never"):
            raise ValueError(f"unknown moment reset policy {self.moment_reset!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)


@dataclass
class OuterConfig:
    beta: float = 1.0
    iterations: int = 2000
    tasks_per_step: int = 1
    checkpoint_every: int = 200
    divergence_bound: float = 1e4

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if self.tasks_per_step < 1:
            raise ValueError("tasks_per_step must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def make_optimizer(params, cfg: InnerConfig) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for task selection and for batches/noise."""
    task_seq, batch_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(task_seq), np.random.default_rng(batch_seq)


def clone_state(state: Mapping[str, torch.Tensor]) -> State:
    return {k: v.detach().clone() for k, v in state.items()}


def states_equal(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def sample_batch(pool: Sequence, batch_size: int, rng: np.random.Generator) -> list:
    idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
    return [pool[int(i)] for i in idx]


def check_losses(losses: Mapping[str, float], iteration: int, bound: float = math.inf) -> None:
    bad = [k for k, v in losses.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss {bad} at inner iteration {iteration}: {dict(losses)}", dict(losses))
    total = losses.get("total_g", losses.get("loss", 0.0))
    if abs(total) > bound:
        raise DivergenceError(f"loss {total:.4g} exceeds bound {bound:g} at iteration {iteration}", dict(losses))


# --- scene-graph learner -----------------------------------------------------------------------


def _to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 0.5


class SceneGraphLearner:
    """Runs the full training step of the scene-graph-to-image model."""

    def __init__(
        self,
        model: SceneGraphToImage,
        extractor: FeatureExtractor,
        weights: Optional[LossWeights] = None,
        teacher_forcing: bool = False,
        aux_on_generator: bool = True,
    ):
        self.model = model
        self.extractor = extractor.to(next(model.parameters()).dtype)
        self.weights = weights or LossWeights()
        self.teacher_forcing = teacher_forcing
        self.aux_on_generator = aux_on_generator
        keys = list(model.state_dict().keys())
        self.groups = {g: group_keys(keys, g) for g in GROUPS}

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def state(self) -> State:
        return clone_state(self.model.state_dict())

    def load(self, state: Mapping[str, torch.Tensor]) -> None:
        self.model.load_state_dict(state)

    def make_optimizers(self, cfg: InnerConfig) -> dict[str, torch.optim.Optimizer]:
        return {g: make_optimizer(self.model.group_parameters(g), cfg) for g in GROUPS}

    def _set_trainable(self, group: str) -> None:
        for g in GROUPS:
            for p in self.model.group_parameters(g):
                p.requires_grad_(g == group)

    def step(self, scenes: Sequence, optimizers, rng: np.random.Generator) -> dict[str, float]:
        model, w = self.model, self.weights
        model.train()
        batch = collate(scenes, self.dtype)
        B = batch.size
        noise = model.sample_noise(B, int(rng.integers(2**63 - 1)))
        crop = model.d_obj.crop_size
        bd = LossBreakdown()

        self._set_trainable("generator")
        out = model.generate(
            batch.objects, batch.triples, batch.obj_to_img, B, noise,
            batch.boxes if self.teacher_forcing else None,
        )
        fake = out.images
        bd.box = box_loss(out.raw_boxes, batch.boxes)
        bd.image_l1 = image_l1(fake, batch.images)
        bd.perceptual = perceptual_loss(_to_unit(fake), _to_unit(batch.images), self.extractor)
        bd.gan_global_g = multiscale_gan_loss_g(model.d_global(fake))
        rf, cls = model.d_obj(crop_objects(fake, out.layout_boxes, crop, batch.obj_to_img))
        bd.gan_obj_g = gan_loss_g(rf)
        if self.aux_on_generator:
            bd.aux = aux_obj_loss(cls, batch.objects)
        total_g, _ = total_task_loss(bd, w)
        optimizers["generator"].zero_grad(set_to_none=True)
        total_g.backward()
        optimizers["generator"].step()

        fake = fake.detach()
        self._set_trainable("d_global")
        bd.gan_global_d = multiscale_gan_loss_d(model.d_global(batch.images), model.d_global(fake))
        optimizers["d_global"].zero_grad(set_to_none=True)
        (w.gan_global * bd.gan_global_d).backward()
        optimizers["d_global"].step()

        self._set_trainable("d_obj")
        rf_real, cls_real = model.d_obj(crop_objects(batch.images, batch.boxes, crop, batch.obj_to_img))
        rf_fake, cls_fake = model.d_obj(crop_objects(fake, out.layout_boxes.detach(), crop, batch.obj_to_img))
        bd.gan_obj_d = gan_loss_d(rf_real, rf_fake)
        bd.aux_d = 0.5 * (aux_obj_loss(cls_real, batch.objects) + aux_obj_loss(cls_fake, batch.objects))
        optimizers["d_obj"].zero_grad(set_to_none=True)
        (w.gan_obj * bd.gan_obj_d + w.aux * bd.aux_d).backward()
        optimizers["d_obj"].step()

        for p in model.parameters():
            p.requires_grad_(True)
        bd.total_g, bd.total_d = total_task_loss(bd, w)
        return bd.as_floats()

    @torch.no_grad()
    def generate(self, graph: SceneGraph, seed: int = 0) -> np.ndarray:
        """One image [H, W, 3] in [0, 1] from predicted boxes and masks (evaluation mode)."""
        model = self.model
        model.eval()
        objects, triples, obj_to_img = graph_tensors([graph])
        noise = model.sample_noise(1, seed)
        out = model.generate(objects, triples, obj_to_img, 1, noise)
        return _to_unit(out.images[0]).clamp(0, 1).permute(1, 2, 0).to(torch.float32).numpy()


# --- outer-loop algebra and loops -------------------------------------------------------------


def reptile_step(
    theta: Mapping[str, torch.Tensor],
    adapted: Sequence[Mapping[str, torch.Tensor]],
    beta: float,
    keys: Optional[Sequence[str]] = None,
) -> State:
    """theta + beta * mean_l(theta_l - theta) for every tensor in ``keys`` (default: all).

    Written as (1 - beta) * theta + beta * mean_l(theta_l) so that beta = 0 and beta = 1 with a
    single adapted state are exact. Tensors outside ``keys`` are copied unchanged.
    """
    if not adapted:
        raise ValueError("need at least one adapted state")
    names = set(theta)
    for s in adapted:
        if set(s) != names:
            raise KeyError(f"adapted state keys differ from theta: {sorted(names ^ set(s))[:5]}")
    keys = list(theta) if keys is None else list(keys)
    out = {k: v.detach().clone() for k, v in theta.items()}
    L = len(adapted)
    for k in keys:
        base = theta[k]
        if base.is_floating_point():
            mean = adapted[0][k].detach().clone() if L == 1 else torch.stack([s[k] for s in adapted]).mean(0)
            out[k] = (1.0 - beta) * base + beta * mean
        else:
            mean = torch.stack([s[k].to(torch.float64) for s in adapted]).mean(0)
            out[k] = torch.round((1.0 - beta) * base.to(torch.float64) + beta * mean).to(base.dtype)
    return out


def inner_adapt(
    theta: Mapping[str, torch.Tensor],
    pool: Sequence,
    cfg: InnerConfig,
    rng: np.random.Generator,
    learner,
    history: Optional[list] = None,
    optimizer_state: Optional[dict] = None,
    divergence_bound: float = math.inf,
) -> State:
    """k optimization steps on batches from ``pool``, starting from a copy of ``theta``."""
    if len(pool) == 0:
        raise ValueError("task pool is empty")
    learner.load(theta)
    optimizers = learner.make_optimizers(cfg)
    if optimizer_state:
        for name, opt in optimizers.items():
            if name in optimizer_state:
                opt.load_state_dict(optimizer_state[name])
    for it in range(cfg.k):
        losses = learner.step(sample_batch(pool, cfg.batch_size, rng), optimizers, rng)
        check_losses(losses, it, divergence_bound)
        if history is not None:
            history.append(losses)
    if optimizer_state is not None:
        optimizer_state.update({name: opt.state_dict() for name, opt in optimizers.items()})
    return learner.state()


def _mean_losses(history: Sequence[Mapping[str, float]]) -> dict[str, float]:
    if not history:
        return {}
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]}


def meta_train(
    task_pools: Mapping[str, Sequence],
    inner_cfg: InnerConfig,
    outer_cfg: OuterConfig,
    learner,
    theta: Optional[Mapping[str, torch.Tensor]] = None,
    seed: int = 0,
    rngs: Optional[tuple[np.random.Generator, np.random.Generator]] = None,
    start_iteration: int = 0,
    checkpoint_fn: Optional[Callable] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
) -> State:
    """Reptile over training tasks. Each group in ``learner.groups`` is updated separately.

    ``checkpoint_fn(theta, iteration, rngs)`` runs every ``outer_cfg.checkpoint_every``
    iterations; ``log_fn`` receives one record per outer iteration.
    """
    task_ids = sorted(task_pools)
    if not task_ids:
        raise ValueError("meta-training needs at least one training task")
    theta = learner.state() if theta is None else clone_state(theta)
    task_rng, batch_rng = rngs if rngs is not None else make_rngs(seed)
    L = outer_cfg.tasks_per_step
    carried = {} if inner_cfg.moment_reset == "never" else None
    for it in range(start_iteration, outer_cfg.iterations):
        chosen = task_rng.choice(len(task_ids), size=L, replace=L > len(task_ids))
        adapted, history = [], []
        for t in chosen:
            adapted.append(
                inner_adapt(theta, task_pools[task_ids[int(t)]], inner_cfg, batch_rng, learner, history,
                            carried, outer_cfg.divergence_bound)
            )
        new = theta
        for keys in learner.groups.values():
            new = reptile_step(new, adapted, outer_cfg.beta, keys)
        theta = new
        if log_fn is not None:
            log_fn({"iteration": it + 1, "tasks": [task_ids[int(t)] for t in chosen], **_mean_losses(history)})
        if checkpoint_fn is not None and outer_cfg.checkpoint_every and (it + 1) % outer_cfg.checkpoint_every == 0:
            checkpoint_fn(theta, it + 1, (task_rng, batch_rng))
    learner.load(theta)
    return theta


def baseline_train(
    task_pools: Mapping[str, Sequence],
    inner_cfg: InnerConfig,
    steps: int,
    learner,
    theta: Optional[Mapping[str, torch.Tensor]] = None,
    seed: int = 0,
    rngs: Optional[tuple[np.random.Generator, np.random.Generator]] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
    log_every: Optional[int] = None,
    checkpoint_every: int = 0,
    checkpoint_fn: Optional[Callable] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
    divergence_bound: float = math.inf,
) -> State:
    """Joint training on the union of all training tasks with one persistent optimizer.

    Batches and noise come from the same stream as in :func:`meta_train`, so with a single task,
    a stateless optimizer and beta = 1 both visit the same parameter states.
    ``checkpoint_fn(theta, step, rngs, optimizer_state)`` runs every ``checkpoint_every`` steps.
    """
    task_ids = sorted(task_pools)
    if not task_ids:
        raise ValueError("baseline training needs at least one training task")
    union = [scene for t in task_ids for scene in task_pools[t]]
    task_rng, batch_rng = rngs if rngs is not None else make_rngs(seed)
    learner.load(learner.state() if theta is None else theta)
    optimizers = learner.make_optimizers(inner_cfg)
    if optimizer_state:
        for name, opt in optimizers.items():
            opt.load_state_dict(optimizer_state[name])
    log_every = log_every or max(inner_cfg.k, 1)
    history = []
    for step in range(start_step, steps):
        losses = learner.step(sample_batch(union, inner_cfg.batch_size, batch_rng), optimizers, batch_rng)
        check_losses(losses, step, divergence_bound)
        history.append(losses)
        if log_fn is not None and (step + 1) % log_every == 0:
            log_fn({"iteration": (step + 1) // log_every, "tasks": ["*"], **_mean_losses(history)})
            history = []
        if checkpoint_fn is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            checkpoint_fn(learner.state(), step + 1, (task_rng, batch_rng),
                          {name: opt.state_dict() for name, opt in optimizers.items()})
    return learner.state()


def select_shots(pool_size: int, shots: int, seed: int) -> np.ndarray:
    if shots > pool_size:
        raise ValueError(f"pool has {pool_size} scenes, cannot draw {shots} shots")
    if shots < 1:
        raise ValueError("shots must be positive")
    return np.random.default_rng([seed, 7]).choice(pool_size, size=shots, replace=False)


def finetune(
    theta: Mapping[str, torch.Tensor],
    pool: Sequence,
    shots: int,
    steps: int,
    inner_cfg: InnerConfig,
    learner,
    seed: int = 0,
) -> State:
    """Adapt ``theta`` for ``steps`` iterations on exactly ``shots`` scenes drawn once from ``pool``."""
    idx = select_shots(len(pool), shots, seed)
    shot_set = [pool[int(i)] for i in idx]
    rng = np.random.default_rng([seed, 11])
    return inner_adapt(theta, shot_set, replace(inner_cfg, k=steps), rng, learner)


def generate(learner: SceneGraphLearner, state: Mapping[str, torch.Tensor], graph: SceneGraph, seed: int = 0) -> np.ndarray:
    learner.load(state)
    return learner.generate(graph, seed)
