import math

import numpy as np
import pytest

from migs.scenegraph import BoundingBox, validate
from migs.synthdata import (
    DatasetConfig,
    SceneSpec,
    ShapeSpec,
    build_annotated,
    default_vocabulary,
    generate_dataset,
    in_memory_task,
    load_manifest,
    make_tasks,
    render,
    sample_scene,
    scene_rng,
    task_from_attributes,
)

from oracles import relation_oracle

VOCAB = default_vocabulary()


def point_in_shape(shape, box, x, y):
    """Independent point-in-shape test at one point."""
    x0, y0, x1, y1 = box
    if not (x0 <= x < x1 and y0 <= y < y1):
        return False
    if shape == "square":
        return True
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
    if shape == "circle":
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1
    # triangle: apex at the top middle, base on the bottom edge
    frac = (y - y0) / (y1 - y0)
    return abs(x - cx) <= rx * frac


def render_oracle(scene, H, W):
    top, bottom = scene.background
    img = np.zeros((H, W, 3))
    for r in range(H):
        t = (r + 0.5) / H
        for c in range(W):
            color = [top[k] * (1 - t) + bottom[k] * t for k in range(3)]
            for s in scene.shapes:
                if point_in_shape(s.shape, s.box.as_tuple(), (c + 0.5) / W, t):
                    color = list(s.color)
            img[r, c] = color
    return img.astype(np.float32)


@pytest.mark.parametrize("density,lo,hi", [("sparse", 2, 3), ("dense", 4, 6)])
def test_shape_count_by_density(density, lo, hi):
    task = task_from_attributes("day", "warm", density, seed=3)
    counts = {len(sample_scene(task, scene_rng(task, k)).shapes) for k in range(200)}
    assert counts == set(range(lo, hi + 1))


def test_sampling_is_deterministic():
    task = task_from_attributes("dusk", "cool", "dense", seed=11)
    assert sample_scene(task, scene_rng(task, 5)) == sample_scene(task, scene_rng(task, 5))
    assert sample_scene(task, scene_rng(task, 5)) != sample_scene(task, scene_rng(task, 6))


def test_mono_palette_is_grayscale():
    task = task_from_attributes("night", "mono", "dense", seed=1)
    for k in range(1000):
        for s in sample_scene(task, scene_rng(task, k)).shapes:
            assert s.color[0] == s.color[1] == s.color[2]


def test_palettes_differ_in_hue():
    warm = task_from_attributes("day", "warm", "dense", seed=1)
    cool = task_from_attributes("day", "cool", "dense", seed=1)
    r_minus_b = lambda t: np.mean([s.color[0] - s.color[2] for k in range(50)
                                   for s in sample_scene(t, scene_rng(t, k)).shapes])
    assert r_minus_b(warm) > 0.3 and r_minus_b(cool) < -0.3


def test_zero_shape_scene_is_pure_gradient():
    scene = SceneSpec((), ((0.0, 0.2, 0.4), (1.0, 0.8, 0.6)))
    img = render(scene, 16, 20)
    assert np.allclose(img, render_oracle(scene, 16, 20), atol=1e-6)
    assert np.all(img == img[:, :1])  # constant along rows


def test_full_canvas_square_takes_its_color():
    c = (0.3, 0.6, 0.9)
    scene = SceneSpec((ShapeSpec("square", c, BoundingBox(0, 0, 1, 1)),), ((0, 0, 0), (1, 1, 1)))
    img = render(scene, 32, 32)
    assert np.allclose(img, np.array(c, dtype=np.float32))


def test_render_matches_point_in_shape_oracle():
    for style, palette, density in [("day", "warm", "dense"), ("night", "mono", "sparse"), ("dusk", "cool", "dense")]:
        task = task_from_attributes(style, palette, density, seed=7)
        for k in range(3):
            scene = sample_scene(task, scene_rng(task, k))
            np.testing.assert_allclose(render(scene, 64, 64), render_oracle(scene, 64, 64), atol=1e-6)


def test_render_rejects_small_sizes():
    task = task_from_attributes("day", "warm", "sparse")
    with pytest.raises(ValueError):
        render(sample_scene(task, scene_rng(task, 0)), 8, 64)


def test_build_annotated_edges():
    task = task_from_attributes("day", "warm", "dense", seed=2)
    seen = set()
    for k in range(40):
        scene = sample_scene(task, scene_rng(task, k))
        ann = build_annotated(scene, task, VOCAB, 32, 32)
        n = len(scene.shapes)
        seen.add(n)
        assert len(ann.graph.objects) == n
        assert len(ann.graph.edges) == math.comb(n, 2)
        for s, p, o in ann.graph.edges:
            expected = relation_oracle(scene.shapes[s].box.as_tuple(), scene.shapes[o].box.as_tuple())
            assert VOCAB.predicate_categories[p] == expected
        assert [VOCAB.object_categories[c] for c in ann.graph.objects] == [f"{s.shape}_warm" for s in scene.shapes]
        assert ann.attributes == task.attributes
    assert 4 in seen
    sparse = task_from_attributes("day", "warm", "sparse", seed=2)
    two = next(sample_scene(sparse, scene_rng(sparse, k)) for k in range(50)
               if len(sample_scene(sparse, scene_rng(sparse, k)).shapes) == 2)
    ann = build_annotated(two, sparse, VOCAB, 32, 32)
    assert len(ann.graph.objects) == 2 and len(ann.graph.edges) == 1


def test_build_annotated_missing_category():
    from migs.scenegraph import SPATIAL_PREDICATES, Vocabulary

    small = Vocabulary(("circle_warm",), SPATIAL_PREDICATES)
    task = task_from_attributes("day", "cool", "sparse")
    with pytest.raises(KeyError):
        build_annotated(sample_scene(task, scene_rng(task, 0)), task, small, 32, 32)


def test_default_task_split():
    tasks, train, test = make_tasks(DatasetConfig())
    assert len(tasks) == 16 and len(train) == 12 and len(test) == 4
    attr = {t.task_id: t.attribute_tuple for t in tasks}
    assert len(set(attr.values())) == 16
    assert not {attr[t] for t in train} & {attr[t] for t in test}


def test_generate_dataset_layout_and_reload(tmp_path):
    cfg = DatasetConfig(height=16, width=16)
    manifest = generate_dataset(cfg, tmp_path / "d")
    jsons = [p for p in (tmp_path / "d").rglob("scene_*.json")]
    pngs = [p for p in (tmp_path / "d").rglob("scene_*.png")]
    assert len(jsons) == 1024 and len(pngs) == 1024
    assert (tmp_path / "d" / "manifest.json").exists()
    assert len(manifest.train_task_ids) == 12 and len(manifest.test_task_ids) == 4
    reloaded = load_manifest(tmp_path / "d")
    assert reloaded == manifest
    scenes = reloaded.load_task(reloaded.test_task_ids[0])
    assert all(validate(s.graph, VOCAB).ok for s in scenes)
    assert scenes[3].scene_id == f"{reloaded.test_task_ids[0]}/scene_3"
    assert scenes[0].image.shape == (16, 16, 3)


def test_regeneration_is_byte_identical(tmp_path):
    cfg = DatasetConfig(num_tasks=3, num_test_tasks=1, scenes_per_task=30, test_count=16, height=16, width=16)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    for p in (tmp_path / "a").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes(), p


def test_test_tasks_need_room_for_shots_and_eval_split():
    with pytest.raises(ValueError):
        DatasetConfig(scenes_per_task=20, test_count=16, max_shots=10)
    cfg = DatasetConfig(scenes_per_task=20, test_scenes_per_task=40, test_count=16, max_shots=10)
    assert cfg.test_scenes_count == 40


def test_in_memory_task_matches_disk(tmp_path):
    cfg = DatasetConfig(num_tasks=2, num_test_tasks=1, scenes_per_task=26, test_count=16, height=16, width=16)
    manifest = generate_dataset(cfg, tmp_path)
    tid = manifest.train_task_ids[0]
    disk = manifest.load_task(tid)
    mem = in_memory_task(manifest.task(tid), 26, VOCAB, 16, 16)
    for a, b in zip(disk, mem):
        assert a.graph == b.graph and a.scene_id == b.scene_id
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
