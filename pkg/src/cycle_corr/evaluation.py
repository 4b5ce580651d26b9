"""Keypoint matching metrics: PCK@k, AUC over k = 1..50, normalized mean pixel error."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .correspondence import nearest_descriptor_match
from .data import SyntheticScene, correspond, load_image
from .model import DescriptorNet, normalize_image, upsample

log = logging.getLogger(__name__)

ANNOTATION_VERSION = 1
AUC_THRESHOLDS = tuple(range(1, 51))
REPORT_PCK_AT = (3, 5, 10, 25, 50)


class EmptyErrorsError(ValueError):
    pass


@dataclass
class AnnotatedKeypoint:
    a: tuple[float, float]
    b: tuple[float, float]
    object_id: int | str | None = None


@dataclass
class AnnotatedPair:
    image_a: str
    image_b: str
    keypoints: list[AnnotatedKeypoint]


@dataclass
class AnnotationFile:
    pairs: list[AnnotatedPair]
    version: int = ANNOTATION_VERSION

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "pairs": [
                {
                    "image_a": p.image_a,
                    "image_b": p.image_b,
                    "keypoints": [{"a": list(k.a), "b": list(k.b), "object_id": k.object_id} for k in p.keypoints],
                }
                for p in self.pairs
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, doc: dict) -> "AnnotationFile":
        pairs = [
            AnnotatedPair(
                p["image_a"],
                p["image_b"],
                [AnnotatedKeypoint(tuple(k["a"]), tuple(k["b"]), k.get("object_id")) for k in p["keypoints"]],
            )
            for p in doc["pairs"]
        ]
        return cls(pairs, doc.get("version", ANNOTATION_VERSION))

    @classmethod
    def load(cls, path) -> "AnnotationFile":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- metrics -----------------------------------------------------------------------


def _errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyErrorsError("no errors to summarize")
    return e


def pck(errors, k: float) -> float:
    if not k > 0:
        raise ValueError("k must be > 0")
    e = _errors(errors)
    return float(np.count_nonzero(e <= k) / e.size)


def auc_pck(errors) -> float:
    """Mean of PCK@k over integer k = 1..50."""
    e = _errors(errors)
    return float(np.mean([pck(e, k) for k in AUC_THRESHOLDS]))


def auc_pck_sweep(errors) -> float:
    """Same quantity as :func:`auc_pck`, computed from sorted errors.

    Each error e contributes to every threshold k >= e, i.e. to
    ``50 - max(ceil(e), 1) + 1`` of the 50 thresholds.
    """
    e = np.sort(_errors(errors))
    kmax = AUC_THRESHOLDS[-1]
    first_k = np.maximum(np.ceil(e), 1)
    hits = np.clip(kmax - first_k + 1, 0, kmax)
    return float(hits.sum() / (e.size * kmax))


def normalized_mean_pixel_error(errors, image_diag: float) -> float:
    if not image_diag > 0:
        raise ValueError("image_diag must be > 0")
    return float(_errors(errors).mean() / image_diag)


@dataclass
class MetricsReport:
    pck: dict[int, float]
    auc: float
    norm_mean_pixel_error: float
    image_diag: float
    per_pair: list[dict] = field(default_factory=list)
    num_keypoints: int = 0
    num_pairs: int = 0
    skipped_pairs: list[dict] = field(default_factory=list)
    pixel_units: str = "full-resolution"

    @classmethod
    def from_errors(cls, errors, image_diag: float, per_pair=None, skipped=None) -> "MetricsReport":
        per_pair = per_pair or []
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            nan = float("nan")
            return cls({k: nan for k in REPORT_PCK_AT}, nan, nan, image_diag, per_pair, 0, len(per_pair), skipped or [])
        return cls(
            {k: pck(e, k) for k in REPORT_PCK_AT},
            auc_pck(e),
            normalized_mean_pixel_error(e, image_diag),
            image_diag,
            per_pair,
            int(e.size),
            len(per_pair),
            skipped or [],
        )

    def to_json(self) -> dict:
        return {
            "pck": {str(k): v for k, v in self.pck.items()},
            "auc": self.auc,
            "norm_mean_pixel_error": self.norm_mean_pixel_error,
            "normalizer": {"kind": "image_diagonal", "value": self.image_diag},
            "pixel_units": self.pixel_units,
            "counts": {"keypoints": self.num_keypoints, "pairs": self.num_pairs, "skipped_pairs": len(self.skipped_pairs)},
            "skipped": self.skipped_pairs,
        }

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}_pairs.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=1))
        with open(cpath, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pair", "image_a", "image_b", "keypoint", "object_id", "error_px"])
            for i, p in enumerate(self.per_pair):
                for j, (err, oid) in enumerate(zip(p["errors"], p["object_ids"])):
                    w.writerow([i, p["image_a"], p["image_b"], j, oid, f"{err:.6f}"])
        return jpath, cpath


# --- matching ---------------------------------------------------------------------


def match_fields(field_a: torch.Tensor, field_b: torch.Tensor, a_points, b_points) -> np.ndarray:
    """Nearest-descriptor errors for full-resolution fields and annotated (row, col) pairs."""
    a = np.asarray(a_points, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b_points, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0:
        return np.zeros(0)
    H, W = field_a.shape[-2:]
    ar = torch.from_numpy(np.clip(np.round(a[:, 0]), 0, H - 1).astype(np.int64))
    ac = torch.from_numpy(np.clip(np.round(a[:, 1]), 0, W - 1).astype(np.int64))
    queries = field_a[:, ar, ac].T
    rows, cols, _ = nearest_descriptor_match(queries, field_b)
    pred = np.stack([rows.numpy(), cols.numpy()], axis=1).astype(np.float64)
    return np.linalg.norm(pred - b, axis=1)


@torch.no_grad()
def dense_field(model: DescriptorNet, image: torch.Tensor) -> torch.Tensor:
    """Full-resolution descriptor field for a raw [0, 1] image."""
    was_training = model.training
    model.eval()
    try:
        low = model(normalize_image(image))
        return upsample(low, *image.shape[-2:], renormalize=model.config.normalize_descriptors)
    finally:
        model.train(was_training)


def match_all(model: DescriptorNet, annotation: AnnotationFile, image_root, size=None, images=None):
    """Per-pair nearest-descriptor errors in full-resolution pixels.

    ``images`` optionally maps file names to already decoded images.
    Returns ``(per_pair, skipped)``.
    """
    image_root = Path(image_root) if image_root is not None else None
    cache: dict[str, torch.Tensor] = {}

    def field_for(name):
        if name not in cache:
            if images is not None and name in images:
                img = images[name]
            else:
                img = load_image(image_root / name, size)
            cache[name] = dense_field(model, img)
        return cache[name]

    per_pair, skipped = [], []
    for p in annotation.pairs:
        try:
            fa, fb = field_for(p.image_a), field_for(p.image_b)
        except (OSError, FileNotFoundError) as e:
            log.warning("skipping pair %s/%s: %s", p.image_a, p.image_b, e)
            skipped.append({"image_a": p.image_a, "image_b": p.image_b, "reason": str(e)})
            continue
        errs = match_fields(fa, fb, [k.a for k in p.keypoints], [k.b for k in p.keypoints])
        per_pair.append({
            "image_a": p.image_a,
            "image_b": p.image_b,
            "errors": errs.tolist(),
            "object_ids": [k.object_id for k in p.keypoints],
            "dims": tuple(fb.shape[-2:]),
        })
    return per_pair, skipped


def evaluate(model, annotation: AnnotationFile, image_root=None, size=None, images=None) -> MetricsReport:
    per_pair, skipped = match_all(model, annotation, image_root, size, images)
    errors = [e for p in per_pair for e in p["errors"]]
    if per_pair:
        H, W = per_pair[0]["dims"]
    elif size is not None:
        H, W = size
    else:
        H = W = 1
    return MetricsReport.from_errors(errors, math.hypot(H, W), per_pair, skipped)


# --- synthetic ground truth ----------------------------------------------------------


def annotate_synthetic_pairs(
    scenes: dict[str, SyntheticScene], pairs: list[tuple[str, str]], per_pair: int = 10, rng_seed: int = 0
) -> AnnotationFile:
    """Oracle annotations: random object pixels of A and their exact positions in B."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for name_a, name_b in pairs:
        sa, sb = scenes[name_a], scenes[name_b]
        owners = sa.instance_map()
        shared = {i.shape_id for i in sa.instances} & {i.shape_id for i in sb.instances}
        cand = np.argwhere(np.isin(owners, list(shared)))
        if len(cand) == 0:
            continue
        pick = cand[rng.choice(len(cand), size=min(per_pair, len(cand)), replace=False)].astype(np.float64)
        mapped = correspond(sa, sb, pick)
        kps = [
            AnnotatedKeypoint((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), int(owners[int(a[0]), int(a[1])]))
            for a, b in zip(pick, mapped)
            if np.isfinite(b).all()
        ]
        if kps:
            out.append(AnnotatedPair(name_a, name_b, kps))
    return AnnotationFile(out)
