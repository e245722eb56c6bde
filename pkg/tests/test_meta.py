import math

import numpy as np
import pytest
import torch

from migs.discriminators import DiscriminatorConfig
from migs.experiment import build_learner
from migs.graphnet import GcnConfig
from migs.meta import (
    DivergenceError,
    InnerConfig,
    OuterConfig,
    baseline_train,
    check_losses,
    finetune,
    generate,
    inner_adapt,
    make_rngs,
    meta_train,
    reptile_step,
    sample_batch,
    select_shots,
    states_equal,
)
from migs.model import ModelConfig
from migs.synthdata import default_vocabulary, in_memory_task, task_from_attributes

from oracles import quadratic_inner
from toys import QuadraticLearner, TwoGroupLearner

VOCAB = default_vocabulary()
SGD = InnerConfig(k=10, lr=0.1, optimizer="sgd", batch_size=1)


def tiny_config(decoder="spade"):
    return ModelConfig(
        image_size=(16, 16), decoder=decoder, channels=[8, 8], modulation_width=4, noise_dim=8,
        gcn=GcnConfig(embed_dim=8, num_layers=1, propagation_hidden=16, update_hidden=16,
                      box_head_hidden=16, mask_size=8),
        discriminator=DiscriminatorConfig([4, 4], [4, 4], 16, 8),
    )


def tiny_learner(seed=0, decoder="spade"):
    learner = build_learner(tiny_config(decoder), seed)
    learner.model.double()
    learner.extractor.double()
    return learner


def tiny_scenes(n=12, seed=1, palette="warm"):
    return in_memory_task(task_from_attributes("day", palette, "sparse", seed=seed), n, VOCAB, 16, 16)


# --- inner loop ----------------------------------------------------------------------------------


def test_zero_inner_steps_is_identity():
    learner = QuadraticLearner([0.3, -0.2])
    theta = learner.state()
    out = inner_adapt(theta, [np.array([1.0, 1.0])], InnerConfig(k=0, optimizer="sgd"), np.random.default_rng(0), learner)
    assert states_equal(out, theta)


def test_single_sgd_step_example():
    learner = QuadraticLearner([1.0])
    # loss 0.5 * (theta - 3)^2, gradient -2, lr 0.1 -> 1.2
    out = inner_adapt(learner.state(), [np.array([3.0])], InnerConfig(k=1, lr=0.1, optimizer="sgd"),
                      np.random.default_rng(0), learner)
    assert out["theta"].item() == pytest.approx(1.2, abs=1e-15)


def test_k_steps_match_reference_loop():
    learner = QuadraticLearner([0.5, -2.0])
    center = np.array([1.5, 0.25])
    out = inner_adapt(learner.state(), [center], SGD, np.random.default_rng(0), learner)
    np.testing.assert_allclose(out["theta"].numpy(), quadratic_inner([0.5, -2.0], center, 0.1, 10), rtol=0, atol=1e-14)


def test_inner_adapt_does_not_mutate_theta():
    learner = QuadraticLearner([0.5])
    theta = learner.state()
    snapshot = {k: v.clone() for k, v in theta.items()}
    inner_adapt(theta, [np.array([4.0])], SGD, np.random.default_rng(0), learner)
    assert states_equal(theta, snapshot)


def test_empty_pool_rejected():
    learner = QuadraticLearner([0.5])
    with pytest.raises(ValueError):
        inner_adapt(learner.state(), [], SGD, np.random.default_rng(0), learner)


def test_config_validation():
    with pytest.raises(ValueError):
        InnerConfig(k=-1)
    with pytest.raises(ValueError):
        InnerConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        OuterConfig(beta=0.0)
    with pytest.raises(ValueError):
        OuterConfig(beta=1.5)


# --- outer update --------------------------------------------------------------------------------


def test_reptile_examples():
    theta = {"w": torch.tensor([1.0, 1.0], dtype=torch.float64)}
    a = {"w": torch.tensor([3.0, 1.0], dtype=torch.float64)}
    b = {"w": torch.tensor([1.0, 3.0], dtype=torch.float64)}
    assert torch.equal(reptile_step(theta, [a, b], 0.5)["w"], torch.tensor([1.5, 1.5], dtype=torch.float64))
    assert torch.equal(reptile_step(theta, [a], 1.0)["w"], a["w"])
    assert torch.equal(reptile_step(theta, [a], 0.0)["w"], theta["w"])
    assert torch.equal(reptile_step(theta, [a], 0.25)["w"], torch.tensor([1.5, 1.0], dtype=torch.float64))


def test_reptile_key_mismatch():
    theta = {"w": torch.zeros(2)}
    with pytest.raises(KeyError):
        reptile_step(theta, [{"v": torch.zeros(2)}], 0.5)
    with pytest.raises(ValueError):
        reptile_step(theta, [], 0.5)


def test_reptile_restricted_to_keys():
    theta = {"w": torch.zeros(2), "u": torch.zeros(2)}
    adapted = [{"w": torch.ones(2), "u": torch.ones(2)}]
    out = reptile_step(theta, adapted, 1.0, keys=["w"])
    assert torch.equal(out["w"], torch.ones(2)) and torch.equal(out["u"], torch.zeros(2))


def test_groups_receive_separate_updates():
    learner = TwoGroupLearner([0.0], [0.0])
    outer = OuterConfig(beta=0.5, iterations=1, tasks_per_step=1, checkpoint_every=0)
    theta = meta_train({"t": [np.array([2.0])]}, InnerConfig(k=1, lr=0.5, optimizer="sgd", batch_size=1), outer, learner)
    # one step: gen 0 -> 1, disc 0 -> -1; half-way interpolation per group
    assert theta["theta"].item() == pytest.approx(0.5)
    assert theta["other"].item() == pytest.approx(-0.5)


def test_meta_train_is_deterministic():
    pools = {"a": [np.array([-1.0]), np.array([-2.0])], "b": [np.array([1.0]), np.array([3.0])]}
    inner = InnerConfig(k=3, lr=0.05, optimizer="adam", batch_size=1)
    outer = OuterConfig(beta=0.3, iterations=20, checkpoint_every=0)
    one = meta_train(pools, inner, outer, QuadraticLearner([0.0]), seed=4)
    two = meta_train(pools, inner, outer, QuadraticLearner([0.0]), seed=4)
    other = meta_train(pools, inner, outer, QuadraticLearner([0.0]), seed=5)
    assert states_equal(one, two) and not states_equal(one, other)


def test_meta_train_resume_matches_uninterrupted_run():
    pools = {"a": [np.array([-1.0]), np.array([-2.0])], "b": [np.array([1.0]), np.array([3.0])]}
    inner = InnerConfig(k=3, lr=0.05, optimizer="adam", batch_size=1)
    saved = {}

    def keep(theta, it, rngs):
        saved[it] = ({k: v.clone() for k, v in theta.items()}, [np.random.default_rng() for _ in rngs])
        for fresh, rng in zip(saved[it][1], rngs):
            fresh.bit_generator.state = rng.bit_generator.state

    full = meta_train(pools, inner, OuterConfig(beta=0.3, iterations=12, checkpoint_every=5), QuadraticLearner([0.0]),
                      seed=2, checkpoint_fn=keep)
    theta, rngs = saved[5]
    resumed = meta_train(pools, inner, OuterConfig(beta=0.3, iterations=12, checkpoint_every=0), QuadraticLearner([9.0]),
                         theta=theta, rngs=tuple(rngs), start_iteration=5)
    assert states_equal(full, resumed)


def test_baseline_and_meta_visit_the_same_states():
    # one task, a stateless optimizer, L = 1 and beta = 1 make the two loops coincide
    pools = {"only": [np.array([float(i)]) for i in range(6)]}
    inner = InnerConfig(k=4, lr=0.1, optimizer="sgd", batch_size=2)
    meta = meta_train(pools, inner, OuterConfig(beta=1.0, iterations=5, checkpoint_every=0), QuadraticLearner([0.0]), seed=7)
    base = baseline_train(pools, inner, 20, QuadraticLearner([0.0]), seed=7)
    assert states_equal(meta, base)


def test_baseline_and_meta_coincide_on_the_scene_model():
    pools = {"only": tiny_scenes(6)}
    inner = InnerConfig(k=2, lr=1e-3, optimizer="sgd", batch_size=2)
    theta0 = tiny_learner().state()
    meta = meta_train(pools, inner, OuterConfig(beta=1.0, iterations=2, checkpoint_every=0), tiny_learner(),
                      theta=theta0, seed=3)
    base = baseline_train(pools, inner, 4, tiny_learner(), theta=theta0, seed=3)
    assert states_equal(meta, base)


# --- divergence ----------------------------------------------------------------------------------


def test_divergence_detection():
    with pytest.raises(DivergenceError) as info:
        check_losses({"total_g": float("nan"), "box": 1.0}, 3)
    assert "total_g" in str(info.value) and info.value.losses["box"] == 1.0
    with pytest.raises(DivergenceError):
        check_losses({"total_g": 2e4}, 0, bound=1e4)
    check_losses({"total_g": 2e4}, 0)
    learner = QuadraticLearner([0.0])
    with pytest.raises(DivergenceError):
        inner_adapt(learner.state(), [np.array([math.inf])], SGD, np.random.default_rng(0), learner)


# --- fine-tuning ---------------------------------------------------------------------------------


def test_finetune_zero_steps_is_identity():
    learner = QuadraticLearner([0.7])
    theta = learner.state()
    pool = [np.array([float(i)]) for i in range(10)]
    assert states_equal(finetune(theta, pool, 5, 0, SGD, learner, seed=1), theta)


def test_shot_selection():
    a = select_shots(100, 5, 3)
    assert len(set(a.tolist())) == 5 and np.array_equal(a, select_shots(100, 5, 3))
    assert not np.array_equal(a, select_shots(100, 5, 4))
    with pytest.raises(ValueError):
        select_shots(4, 5, 0)
    learner = QuadraticLearner([0.0])
    with pytest.raises(ValueError):
        finetune(learner.state(), [np.array([0.0])] * 3, 5, 10, SGD, learner)


def test_finetune_is_deterministic():
    pool = [np.array([float(i)]) for i in range(30)]
    inner = InnerConfig(k=1, lr=0.1, optimizer="adam", batch_size=2)
    runs = [finetune({"theta": torch.zeros(1, dtype=torch.float64)}, pool, 5, 20, inner, QuadraticLearner([0.0]), seed=s)
            for s in (1, 1, 2)]
    assert states_equal(runs[0], runs[1]) and not states_equal(runs[0], runs[2])


# --- scene model -----------------------------------------------------------------------------


def test_generate_is_seeded_and_in_range():
    learner = tiny_learner()
    theta = learner.state()
    graph = tiny_scenes(1)[0].graph
    a, b, c = generate(learner, theta, graph, 1), generate(learner, theta, graph, 1), generate(learner, theta, graph, 2)
    assert a.shape == (16, 16, 3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1


def test_make_rngs_streams_are_independent():
    t1, b1 = make_rngs(0)
    t2, b2 = make_rngs(0)
    assert t1.integers(1 << 30) == t2.integers(1 << 30)
    b2.integers(1 << 30, size=100)  # drawing batches must not shift task selection
    assert t1.integers(1 << 30) == t2.integers(1 << 30)


def test_scene_step_reduces_reconstruction_loss():
    medians = []
    for seed in range(3):
        learner = tiny_learner(seed)
        pool = tiny_scenes(8, seed=seed + 10)
        opts = learner.make_optimizers(InnerConfig(lr=2e-3, batch_size=4))
        rng = np.random.default_rng(seed)
        recon = []
        for _ in range(150):
            out = learner.step(sample_batch(pool, 4, rng), opts, rng)
            recon.append(out["box"] + out["image_l1"])
        medians.append(np.mean(recon[-20:]) / np.mean(recon[:20]))
    assert np.median(medians) < 0.8, medians


def test_scene_step_returns_every_term():
    learner = tiny_learner(decoder="crn")
    opts = learner.make_optimizers(InnerConfig(lr=1e-3))
    out = learner.step(tiny_scenes(3), opts, np.random.default_rng(0))
    assert set(out) >= {"box", "gan_global_g", "gan_global_d", "gan_obj_g", "gan_obj_d", "aux", "aux_d",
                        "perceptual", "image_l1", "total_g", "total_d"}
    assert all(math.isfinite(v) for v in out.values())
