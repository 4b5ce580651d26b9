import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cycle_corr.data import SceneSpec, generate_scenes
from cycle_corr.evaluation import (
    AnnotatedKeypoint,
    AnnotatedPair,
    AnnotationFile,
    EmptyErrorsError,
    MetricsReport,
    annotate_synthetic_pairs,
    auc_pck,
    auc_pck_sweep,
    evaluate,
    match_all,
    match_fields,
    normalized_mean_pixel_error,
    pck,
)
from cycle_corr.model import DescriptorNet, ModelConfig, normalize_image

errors_st = st.lists(st.floats(0, 80, allow_nan=False), min_size=1, max_size=50)


# --- metric examples ------------------------------------------------------------------


def test_pck_example():
    assert pck([1, 2, 7, 12], 5) == 0.5


def test_pck_zeros():
    for k in (0.1, 1, 3, 50):
        assert pck([0.0] * 7, k) == 1.0


def test_pck_requires_positive_k():
    with pytest.raises(ValueError):
        pck([1.0], 0)


def test_auc_examples():
    assert auc_pck([0.0, 0.0]) == 1.0
    assert auc_pck([51.0, 300.0]) == 0.0
    assert auc_pck([25.0]) == pytest.approx(26 / 50, abs=1e-15)


def test_norm_error_examples():
    assert normalized_mean_pixel_error([0.0, 0.0], 10) == 0
    diag = math.hypot(640, 480)
    assert diag == 800
    assert normalized_mean_pixel_error([30.0, 34.0], diag) == pytest.approx(0.04, abs=1e-15)
    with pytest.raises(ValueError):
        normalized_mean_pixel_error([1.0], 0)


@pytest.mark.parametrize("fn", [lambda e: pck(e, 3), auc_pck, auc_pck_sweep,
                                lambda e: normalized_mean_pixel_error(e, 10)])
def test_empty_errors_raise(fn):
    with pytest.raises(EmptyErrorsError):
        fn([])


# --- metric properties ----------------------------------------------------------------


@given(errors_st)
def test_auc_two_ways(errors):
    assert abs(auc_pck(errors) - auc_pck_sweep(errors)) <= 1e-9


@given(errors_st)
def test_pck_monotone(errors):
    vals = [pck(errors, k) for k in np.linspace(0.5, 60, 40)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert 0 <= auc_pck(errors) <= 1


@given(errors_st, st.floats(0, 20, allow_nan=False))
def test_constant_shift(errors, c):
    diag = 91.0
    before = normalized_mean_pixel_error(errors, diag)
    after = normalized_mean_pixel_error([e + c for e in errors], diag)
    assert after - before == pytest.approx(c / diag, abs=1e-12)


def test_report_from_errors():
    rep = MetricsReport.from_errors([1, 2, 7, 12], 800.0)
    assert rep.pck[5] == 0.5 and rep.pck[3] == 0.5 and rep.pck[50] == 1.0
    assert rep.num_keypoints == 4
    vals = [rep.pck[k] for k in sorted(rep.pck)]
    assert vals == sorted(vals)


# --- matching ----------------------------------------------------------------------


def orthonormal_field(h, w):
    return torch.eye(h * w, dtype=torch.float64).T.reshape(h * w, h, w)


def test_match_fields_identity_zero_error():
    f = orthonormal_field(5, 6)
    pts = [[0, 0], [2, 3], [4, 5]]
    assert np.array_equal(match_fields(f, f, pts, pts), np.zeros(3))


def test_match_fields_known_displacement():
    f = orthonormal_field(4, 4)
    assert match_fields(f, f, [[1, 1]], [[4, 5]]).tolist() == [5.0]


class LookupModel(DescriptorNet):
    """Returns a precomputed field for each known (normalized) input image."""

    def __init__(self, pairs):
        super().__init__(ModelConfig(descriptor_dim=pairs[0][1].shape[0], stride=1, normalize_descriptors=False))
        self.pairs = [(normalize_image(img), f) for img, f in pairs]

    def forward(self, image):
        for img, f in self.pairs:
            if torch.equal(img, image):
                return f
        raise KeyError("unknown image")


def ideal_field(scene, num_shapes):
    """Unit descriptors that encode (shape id, local position); background gets its own axis."""
    H, W = scene.image.shape[-2:]
    D = 4 * num_shapes + 1
    field = np.zeros((D, H, W))
    owner = scene.instance_map()
    rr, cc = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], 1)
    field[-1][owner < 0] = 1.0
    a = 0.1  # phases stay well inside (-pi, pi) over one shape
    for inst in scene.instances:
        mask = (owner == inst.shape_id).ravel()
        local = inst.to_local(pts[mask])
        block = np.stack([np.cos(a * local[:, 0]), np.sin(a * local[:, 0]),
                          np.cos(a * local[:, 1]), np.sin(a * local[:, 1])]) / math.sqrt(2)
        k = 4 * inst.shape_id
        field[k:k + 4].reshape(4, -1)[:, mask] = block
    return torch.from_numpy(field).float()


@pytest.fixture(scope="module")
def synthetic_pairs():
    spec = SceneSpec.default(3)
    scenes = generate_scenes(spec, 8, 77)
    named = {f"s{i}.png": s for i, s in enumerate(scenes)}
    pairs = [(f"s{i}.png", f"s{i + 1}.png") for i in range(0, 8, 2)]
    ann = annotate_synthetic_pairs(named, pairs, per_pair=25, rng_seed=3)
    model = LookupModel([(s.image, ideal_field(s, 3)) for s in scenes])
    images = {n: s.image for n, s in named.items()}
    return ann, model, images


def test_oracle_field_matches(synthetic_pairs):
    ann, model, images = synthetic_pairs
    assert sum(len(p.keypoints) for p in ann.pairs) >= 80
    rep = evaluate(model, ann, images=images)
    errors = [e for p in rep.per_pair for e in p["errors"]]
    assert max(errors) <= 1.0
    assert rep.pck[3] == 1.0
    assert rep.image_diag == pytest.approx(math.hypot(64, 64))


def test_missing_image_skipped(synthetic_pairs, tmp_path):
    ann, model, images = synthetic_pairs
    extra = AnnotationFile(ann.pairs + [AnnotatedPair("nope.png", "s0.png", [AnnotatedKeypoint((1, 1), (1, 1))])])
    per_pair, skipped = match_all(model, extra, tmp_path, images=images)
    assert len(per_pair) == len(ann.pairs) and len(skipped) == 1
    assert skipped[0]["image_a"] == "nope.png"


def test_empty_annotation():
    model = DescriptorNet(ModelConfig(descriptor_dim=4))
    rep = evaluate(model, AnnotationFile([]), size=(64, 64))
    assert rep.num_keypoints == 0 and rep.num_pairs == 0 and math.isnan(rep.auc)
    assert rep.to_json()["counts"] == {"keypoints": 0, "pairs": 0, "skipped_pairs": 0}


def test_annotation_json_round_trip(tmp_path):
    ann = AnnotationFile([AnnotatedPair("a.png", "b.png", [AnnotatedKeypoint((1.0, 2.0), (3.5, 4.0), 7)])])
    path = tmp_path / "ann.json"
    ann.save(path)
    doc = json.loads(path.read_text())
    assert doc["version"] == 1 and doc["pairs"][0]["keypoints"][0] == {"a": [1.0, 2.0], "b": [3.5, 4.0], "object_id": 7}
    assert AnnotationFile.load(path) == ann


def test_report_files(synthetic_pairs, tmp_path):
    ann, model, images = synthetic_pairs
    rep = evaluate(model, ann, images=images)
    jpath, cpath = rep.write(tmp_path)
    doc = json.loads(jpath.read_text())
    assert doc["normalizer"] == {"kind": "image_diagonal", "value": rep.image_diag}
    assert doc["pixel_units"] == "full-resolution"
    assert set(doc["pck"]) == {"3", "5", "10", "25", "50"}
    rows = list(csv.DictReader(open(cpath)))
    assert len(rows) == rep.num_keypoints
