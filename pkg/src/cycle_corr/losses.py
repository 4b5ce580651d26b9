"""Distributional, cycle-correspondence and identical-view losses.

All coordinates are in the grid units of the fields passed in (the
low-resolution grid during training).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch

from .correspondence import (
    DEGENERATE_EPS,
    heatmap_to_distribution,
    interpolate_descriptors,
    similarity_heatmap,
    weighted_descriptor,
)


class NoValidKeypointsError(ValueError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.03
    quantile_keep: float = 0.35
    variance_scaling: bool = True
    lambda_identical: float = 0.0
    num_keypoints: int = 500
    similarity: str = "cosine"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.quantile_keep <= 1:
            raise ValueError(f"quantile_keep must be in (0, 1], got {self.quantile_keep}")
        if self.lambda_identical < 0:
            raise ValueError(f"lambda_identical must be >= 0, got {self.lambda_identical}")
        if self.num_keypoints < 1:
            raise ValueError(f"num_keypoints must be >= 1, got {self.num_keypoints}")


class KeypointSample(NamedTuple):
    source: tuple[float, float]
    target: tuple[float, float]
    valid: bool


@dataclass
class KeypointBatch:
    """Keypoints of one image pair: ``source`` on I_A, ``target`` on the augmented copy."""

    source: torch.Tensor  # (N, 2)
    target: torch.Tensor  # (N, 2)
    valid: torch.Tensor  # (N,) bool

    def __len__(self):
        return self.source.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[KeypointSample], dtype=torch.float32) -> "KeypointBatch":
        if not samples:
            return cls(torch.zeros(0, 2, dtype=dtype), torch.zeros(0, 2, dtype=dtype), torch.zeros(0, dtype=torch.bool))
        return cls(
            torch.tensor([s.source for s in samples], dtype=dtype),
            torch.tensor([s.target for s in samples], dtype=dtype),
            torch.tensor([bool(s.valid) for s in samples]),
        )

    def samples(self) -> list[KeypointSample]:
        return [
            KeypointSample(tuple(s.tolist()), tuple(t.tolist()), bool(v))
            for s, t, v in zip(self.source, self.target, self.valid)
        ]

    def permute(self, order: torch.Tensor) -> "KeypointBatch":
        return KeypointBatch(self.source[order], self.target[order], self.valid[order])


@dataclass
class CycleBatchResult:
    per_keypoint_error: torch.Tensor  # (N,) l_i, NaN where not computed
    summed_variance: torch.Tensor  # (N,) X_i, detached; NaN where not computed
    kept: torch.Tensor  # (N,) bool
    weights: torch.Tensor  # (N,) 1 / (1 + X_i)
    degenerate: torch.Tensor  # (N,) bool
    loss: torch.Tensor  # scalar

    @property
    def num_valid(self) -> int:
        return int(torch.isfinite(self.summed_variance).sum()) + int(self.degenerate.sum())

    @property
    def kept_fraction(self) -> float:
        n = self.num_valid
        return int(self.kept.sum()) / n if n else 0.0

    @property
    def mean_summed_variance(self) -> float:
        x = self.summed_variance[torch.isfinite(self.summed_variance)]
        return float(x.mean()) if x.numel() else float("nan")


def keep_count(q: float, n_valid: int) -> int:
    """Number of keypoints retained by the quantile drop: ``max(1, floor(q * n))``."""
    if n_valid <= 0:
        return 0
    # guard against q * n landing a hair below an integer, e.g. 0.29 * 100
    return max(1, math.floor(q * n_valid + 1e-9))


def select_lowest(values: torch.Tensor, candidates: torch.Tensor, count: int) -> torch.Tensor:
    """Mask of the ``count`` candidates with smallest value; ties keep the lower index."""
    idx = torch.nonzero(candidates, as_tuple=False).flatten()
    mask = torch.zeros_like(candidates, dtype=torch.bool)
    if idx.numel() == 0 or count <= 0:
        return mask
    order = torch.sort(values[idx], stable=True).indices
    mask[idx[order[:count]]] = True
    return mask


def distributional_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum of Euclidean distances between predicted and target (N, 2) positions."""
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    if predicted.shape[0] == 0:
        warnings.warn("distributional_loss on an empty keypoint list", RuntimeWarning, stacklevel=2)
        return predicted.sum() * 0
    return torch.linalg.vector_norm(predicted - target, dim=-1).sum()


def source_descriptors(field: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    """Descriptors at (possibly fractional) source positions, bilinearly interpolated."""
    return interpolate_descriptors(field, source, renormalize=True)


def cycle_loss(
    field_A: torch.Tensor,
    field_B: torch.Tensor,
    field_hatA: torch.Tensor,
    keypoints: KeypointBatch,
    config: LossConfig,
    summed_variance: torch.Tensor | None = None,
    detach_variance: bool = True,
) -> CycleBatchResult:
    """Cycle A -> B -> augmented A for every valid keypoint.

    ``summed_variance`` replaces the computed X_i by given constants
    (used to verify that no gradient flows through the variances).
    ``detach_variance=False`` lets gradients flow through X_i; it exists
    only as a negative control for that check.
    """
    D = field_A.shape[0]
    if field_B.shape[0] != D or field_hatA.shape[0] != D:
        raise ValueError("fields have different descriptor dimensions")
    valid = keypoints.valid.bool()
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidKeypointsError("no valid keypoints in this pair")
    N = len(keypoints)
    idx = torch.nonzero(valid).flatten()

    d_A = source_descriptors(field_A, keypoints.source[idx])
    dist_B = heatmap_to_distribution(similarity_heatmap(d_A, field_B, config.similarity), config.temperature)
    raw = weighted_descriptor(dist_B.probs, field_B)
    norm = torch.linalg.vector_norm(raw, dim=-1)
    degenerate_v = norm < DEGENERATE_EPS
    d_bar = raw / norm.clamp_min(DEGENERATE_EPS).unsqueeze(-1)
    dist_hat = heatmap_to_distribution(similarity_heatmap(d_bar, field_hatA, config.similarity), config.temperature)
    target = keypoints.target[idx].to(dist_hat.mean.dtype)
    err = torch.linalg.vector_norm(dist_hat.mean - target, dim=-1)
    X = dist_B.summed_variance + dist_hat.summed_variance
    if detach_variance:
        X = X.detach()
    if summed_variance is not None:
        X = torch.as_tensor(summed_variance, dtype=err.dtype)[idx]

    count = keep_count(config.quantile_keep, n_valid)
    kept_v = select_lowest(X.detach(), ~degenerate_v, count)
    weights_v = 1.0 / (1.0 + X)
    terms = weights_v * err if config.variance_scaling else err
    loss = (terms * kept_v.to(terms.dtype)).sum()

    nan = torch.full((N,), float("nan"), dtype=err.dtype)
    per_err = nan.clone()
    per_err[idx] = err.detach()
    per_X = nan.clone()
    per_X[idx] = X.detach()
    per_X[idx[degenerate_v]] = float("nan")
    kept = torch.zeros(N, dtype=torch.bool)
    kept[idx] = kept_v
    degenerate = torch.zeros(N, dtype=torch.bool)
    degenerate[idx] = degenerate_v
    return CycleBatchResult(per_err, per_X, kept, 1.0 / (1.0 + per_X), degenerate, loss)


def identical_view_loss(
    field_A: torch.Tensor, field_hatA: torch.Tensor, keypoints: KeypointBatch, config: LossConfig
) -> torch.Tensor:
    """Match A's keypoint descriptors directly in the augmented copy."""
    valid = keypoints.valid.bool()
    if int(valid.sum()) == 0:
        raise NoValidKeypointsError("no valid keypoints in this pair")
    if field_A.shape[0] != field_hatA.shape[0]:
        raise ValueError("fields have different descriptor dimensions")
    d_A = source_descriptors(field_A, keypoints.source[valid])
    dist = heatmap_to_distribution(similarity_heatmap(d_A, field_hatA, config.similarity), config.temperature)
    return distributional_loss(dist.mean, keypoints.target[valid].to(dist.mean.dtype))


def combined_loss(cycle: CycleBatchResult | torch.Tensor, identical, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    c = cycle.loss if isinstance(cycle, CycleBatchResult) else cycle
    return c + lam * identical
