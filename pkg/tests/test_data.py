import json
import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from cycle_corr.data import (
    DatasetManifest,
    ImageStore,
    Instance,
    ManifestError,
    SceneError,
    SceneSpec,
    ShapeSpec,
    correspond,
    generate_scenes,
    generate_synthetic_scene,
    load_image,
    load_manifest,
    read_scenes,
    sample_keypoints,
    sample_pair,
    sample_pair_indices,
    write_scenes,
)
from cycle_corr.model import IMAGENET_MEAN


def write_png(path, h=40, w=48, value=100):
    Image.fromarray(np.full((h, w, 3), value, dtype=np.uint8)).save(path)


@pytest.fixture
def image_dir(tmp_path):
    for name in ("c.png", "a.png", "b.jpg"):
        write_png(tmp_path / name)
    (tmp_path / "notes.txt").write_text("not an image")
    return tmp_path


# --- manifests ------------------------------------------------------------------------


def test_manifest_sorted(image_dir):
    m = load_manifest(image_dir)
    assert [r.file for r in m.images] == ["a.png", "b.jpg", "c.png"]
    assert (m.images[0].width, m.images[0].height) == (48, 40)
    assert m.rejects == []


def test_manifest_rejects_corrupt(image_dir):
    (image_dir / "c.png").write_bytes(b"garbage")
    m = load_manifest(image_dir)
    assert len(m) == 2 and len(m.rejects) == 1 and m.rejects[0][0] == "c.png"


def test_manifest_empty_is_fatal(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing")


def test_manifest_json_round_trip(image_dir, tmp_path):
    m = load_manifest(image_dir)
    path = image_dir / "manifest.json"
    m.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) >= {"images", "version"} and doc["images"][0] == {"file": "a.png", "w": 48, "h": 40}
    back = DatasetManifest.load_json(path)
    assert back.images == m.images and back.root == image_dir


def test_load_image_pads_with_mean(tmp_path):
    write_png(tmp_path / "x.png", h=32, w=64, value=255)
    img = load_image(tmp_path / "x.png", (64, 64))
    assert img.shape == (3, 64, 64)
    assert torch.allclose(img[:, 0, 0], torch.tensor(IMAGENET_MEAN), atol=1 / 255)
    assert torch.allclose(img[:, 32, 32], torch.ones(3))


def test_image_store_caches(image_dir):
    store = ImageStore(load_manifest(image_dir), (32, 32))
    assert len(store) == 3 and store[1] is store[1] and store[0].shape == (3, 32, 32)


# --- pair and keypoint sampling -------------------------------------------------------------


def test_two_image_manifest_pair(image_dir):
    (image_dir / "c.png").unlink()
    m = load_manifest(image_dir)
    for seed in range(10):
        assert set(sample_pair_indices(len(m), seed)) == {0, 1}
    a, b = sample_pair(m, 0)
    assert a.shape == b.shape == (3, 40, 48)


def test_pair_determinism():
    assert sample_pair_indices(10, 5) == sample_pair_indices(10, 5)
    with pytest.raises(ManifestError):
        sample_pair_indices(1, 0)


def test_pair_frequencies_uniform():
    n, draws = 10, 10_000
    counts = Counter(tuple(sorted(sample_pair_indices(n, s))) for s in range(draws))
    pairs = n * (n - 1) // 2
    assert len(counts) == pairs
    p = 1 / pairs
    sigma = math.sqrt(draws * p * (1 - p))
    assert all(abs(c - draws * p) <= 3 * sigma for c in counts.values())


def test_keypoints_every_cell_once():
    pts, replaced = sample_keypoints((6, 7), 42, 0)
    assert not replaced
    assert sorted(map(tuple, pts.tolist())) == [(r, c) for r in range(6) for c in range(7)]


def test_keypoints_distinct_cells():
    pts, replaced = sample_keypoints((60, 80), 500, 3)
    assert not replaced and len({tuple(p) for p in pts.tolist()}) == 500
    assert pts[:, 0].max() < 60 and pts[:, 1].max() < 80


def test_keypoints_determinism_and_replacement():
    a, _ = sample_keypoints((8, 8), 20, 9)
    b, _ = sample_keypoints((8, 8), 20, 9)
    assert np.array_equal(a, b)
    pts, replaced = sample_keypoints((2, 2), 9, 0)
    assert replaced and len(pts) == 9
    with pytest.raises(ValueError):
        sample_keypoints((2, 2), 0, 0)


# --- synthetic scenes ---------------------------------------------------------------------


def one_disk():
    return SceneSpec([ShapeSpec("disk", "red", 8.0)])


def test_scene_basics():
    sc = generate_synthetic_scene(SceneSpec.default(3), 0)
    assert sc.image.shape == (3, 64, 64) and sc.image.dtype == torch.float32
    assert sorted(i.shape_id for i in sc.instances) == [0, 1, 2]
    owners = sc.instance_map()
    assert set(np.unique(owners)) == {-1, 0, 1, 2}


def test_disk_center_maps_to_center():
    a, b = generate_synthetic_scene(one_disk(), 1), generate_synthetic_scene(one_disk(), 2)
    ia, ib = a.instances[0], b.instances[0]
    assert (ia.row, ia.col) != (ib.row, ib.col)
    np.testing.assert_allclose(correspond(a, b, [[ia.row, ia.col]])[0], [ib.row, ib.col], atol=1e-9)


def test_boundary_maps_to_boundary():
    a, b = generate_synthetic_scene(one_disk(), 3), generate_synthetic_scene(one_disk(), 4)
    ia, ib = a.instances[0], b.instances[0]
    for t in np.linspace(0, 2 * np.pi, 12, endpoint=False):
        p = np.array([[ia.row + 7.99 * np.cos(t), ia.col + 7.99 * np.sin(t)]])
        q = correspond(a, b, p)[0]
        assert abs(math.hypot(q[0] - ib.row, q[1] - ib.col) - 8.0) <= 0.5


def test_background_has_no_correspondence():
    a, b = generate_synthetic_scene(one_disk(), 5), generate_synthetic_scene(one_disk(), 6)
    bg = np.argwhere(a.instance_map() < 0)[0]
    assert np.isnan(correspond(a, b, [bg])).all()


def test_absent_instance_has_no_correspondence():
    spec = SceneSpec.default(2)
    a = generate_synthetic_scene(spec, 0)
    b = generate_synthetic_scene(spec, 1, present=[1])
    pts = np.argwhere(a.instance_map() == 0)[:5]
    assert np.isnan(correspond(a, b, pts)).all()


@given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_oracle_symmetric(s1, s2):
    spec = SceneSpec.default(3)
    a, b = generate_synthetic_scene(spec, s1), generate_synthetic_scene(spec, s2)
    pts = np.argwhere(a.instance_map() >= 0).astype(np.float64)[::13]
    fwd = correspond(a, b, pts)
    ok = np.isfinite(fwd).all(1)
    # interior of the shapes stays inside under a rigid motion; points grazing an edge may fall out
    back = correspond(b, a, fwd[ok])
    fine = np.isfinite(back).all(1)
    assert fine.mean() > 0.9
    assert np.abs(back[fine] - pts[ok][fine]).max() <= 0.5


def test_rotation_range_respected():
    for sc in generate_scenes(SceneSpec.default(3), 20, 0, max_rotation_deg=10):
        assert all(abs(i.angle) <= math.radians(10) for i in sc.instances)


def test_overlap_impossible_raises():
    spec = SceneSpec([ShapeSpec("disk", "red", 14.0), ShapeSpec("disk", "green", 14.0),
                      ShapeSpec("disk", "blue", 14.0)])
    with pytest.raises(SceneError):
        generate_synthetic_scene(spec, 0, max_tries=5)


def test_spec_validation_and_json():
    with pytest.raises(ValueError):
        SceneSpec([ShapeSpec("disk", "red"), ShapeSpec("ring", "red")])
    with pytest.raises(ValueError):
        SceneSpec([ShapeSpec("disk", c) for c in ("red", "green", "blue", "yellow", "magenta", "cyan")])
    with pytest.raises(ValueError):
        ShapeSpec("hexagon", "red")
    spec = SceneSpec.default(4)
    assert SceneSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


def test_generate_scenes_deterministic_and_p_absent():
    spec = SceneSpec.default(3)
    a = generate_scenes(spec, 5, 11)
    b = generate_scenes(spec, 5, 11)
    assert all(torch.equal(x.image, y.image) for x, y in zip(a, b))
    sparse = generate_scenes(spec, 30, 2, p_absent=0.5)
    counts = [len(s.instances) for s in sparse]
    assert min(counts) >= 1 and min(counts) < 3


def test_write_and_read_scenes(tmp_path):
    scenes = generate_scenes(SceneSpec.default(3), 4, 0)
    oracle = write_scenes(scenes, tmp_path)
    assert len(list(tmp_path.glob("*.png"))) == 4
    back = read_scenes(oracle)
    assert list(back) == [f"scene_{i:05d}.png" for i in range(4)]
    first = back["scene_00000.png"]
    assert first.instances == scenes[0].instances
    assert torch.allclose(first.image, scenes[0].image)
    # the saved PNG is the render, up to 8-bit quantization
    assert torch.allclose(load_image(tmp_path / "scene_00000.png"), scenes[0].image, atol=1 / 255)


def test_instance_local_world_round_trip():
    inst = Instance(0, 20.0, 30.0, 0.7)
    pts = np.random.default_rng(0).uniform(0, 64, size=(10, 2))
    np.testing.assert_allclose(inst.to_world(inst.to_local(pts)), pts, atol=1e-12)
