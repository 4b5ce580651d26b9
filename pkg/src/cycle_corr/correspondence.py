"""Differentiable matching math over descriptor fields.

Every function accepts a single query of shape ``(D,)`` or a stack of
queries ``(N, D)``; fields are ``(D, h, w)``.  Pixel coordinates are
``(row, col)`` with the origin at the top-left cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


class DegenerateDescriptorError(ValueError):
    """Expected descriptor has (numerically) zero norm."""


DEGENERATE_EPS = 1e-8


@dataclass
class MatchDistribution:
    probs: torch.Tensor  # (..., h, w), sums to one over the last two dims
    mu_row: torch.Tensor
    mu_col: torch.Tensor
    var_row: torch.Tensor
    var_col: torch.Tensor

    @property
    def mean(self) -> torch.Tensor:
        return torch.stack([self.mu_row, self.mu_col], dim=-1)

    @property
    def summed_variance(self) -> torch.Tensor:
        return self.var_row + self.var_col


def _check_query(query: torch.Tensor, field: torch.Tensor) -> None:
    if field.dim() != 3:
        raise ValueError(f"field must be (D, h, w), got {tuple(field.shape)}")
    if query.shape[-1] != field.shape[0]:
        raise ValueError(f"descriptor dim mismatch: query {query.shape[-1]} vs field {field.shape[0]}")


def similarity_heatmap(query: torch.Tensor, field: torch.Tensor, mode: str = "cosine") -> torch.Tensor:
    """Similarity of ``query`` to every pixel of ``field``.

    ``cosine`` assumes unit-norm inputs and returns plain dot products.
    ``l2`` returns negated Euclidean distances so that larger is better.
    """
    _check_query(query, field)
    D, h, w = field.shape
    flat = field.reshape(D, h * w)
    if mode == "cosine":
        sim = query @ flat
    elif mode == "l2":
        q = query.unsqueeze(-1)
        sim = -((q - flat) ** 2).sum(-2).clamp_min(0).sqrt()
    else:
        raise ValueError(f"unknown similarity mode {mode!r}")
    return sim.reshape(*query.shape[:-1], h, w)


def marginal_variances(probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    p_row = probs.sum(-1)
    p_col = probs.sum(-2)
    rows = torch.arange(probs.shape[-2], dtype=probs.dtype, device=probs.device)
    cols = torch.arange(probs.shape[-1], dtype=probs.dtype, device=probs.device)
    mu_row = (p_row * rows).sum(-1, keepdim=True)
    mu_col = (p_col * cols).sum(-1, keepdim=True)
    var_row = (p_row * (rows - mu_row) ** 2).sum(-1)
    var_col = (p_col * (cols - mu_col) ** 2).sum(-1)
    return var_row, var_col


def spatial_expectation(probs: torch.Tensor) -> torch.Tensor:
    """Soft argmax: expected (row, col) of the marginals of ``probs`` (..., h, w)."""
    if isinstance(probs, MatchDistribution):
        probs = probs.probs
    rows = torch.arange(probs.shape[-2], dtype=probs.dtype, device=probs.device)
    cols = torch.arange(probs.shape[-1], dtype=probs.dtype, device=probs.device)
    mu_row = (probs.sum(-1) * rows).sum(-1)
    mu_col = (probs.sum(-2) * cols).sum(-1)
    return torch.stack([mu_row, mu_col], dim=-1)


def heatmap_to_distribution(heatmap: torch.Tensor, temperature: float) -> MatchDistribution:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    h, w = heatmap.shape[-2:]
    logits = heatmap.reshape(*heatmap.shape[:-2], h * w) / temperature
    logits = logits - logits.max(-1, keepdim=True).values.detach()
    e = logits.exp()
    probs = (e / e.sum(-1, keepdim=True)).reshape(heatmap.shape)
    mu = spatial_expectation(probs)
    var_row, var_col = marginal_variances(probs)
    return MatchDistribution(probs, mu[..., 0], mu[..., 1], var_row, var_col)


def weighted_descriptor(probs: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Probability-weighted sum of field descriptors, not renormalized."""
    D, h, w = field.shape
    return probs.reshape(*probs.shape[:-2], h * w) @ field.reshape(D, h * w).T


def expected_descriptor(probs: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    if isinstance(probs, MatchDistribution):
        probs = probs.probs
    if probs.shape[-2:] != field.shape[-2:]:
        raise ValueError(f"distribution grid {tuple(probs.shape[-2:])} != field grid {tuple(field.shape[-2:])}")
    raw = weighted_descriptor(probs, field)
    norm = raw.norm(dim=-1)
    if bool((norm < DEGENERATE_EPS).any()):
        raise DegenerateDescriptorError("expected descriptor has zero norm")
    return raw / norm.unsqueeze(-1)


def nearest_descriptor_match(query: torch.Tensor, field: torch.Tensor, mode: str = "cosine"):
    """Brute-force best match; ties go to the smallest row-major index.

    Returns ``(rows, cols, similarity)``; scalars for a single query,
    tensors of shape ``(N,)`` for a stack.
    """
    with torch.no_grad():
        sim = similarity_heatmap(query, field, mode)
        w = field.shape[-1]
        flat = sim.reshape(*sim.shape[:-2], -1)
        # torch.argmax returns the first maximal index
        idx = flat.argmax(-1)
        best = flat.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
        rows, cols = idx // w, idx % w
    if query.dim() == 1:
        return int(rows), int(cols), float(best)
    return rows, cols, best


def sample_descriptors(field: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Gather descriptors at integer cells -> (N, D)."""
    return field[:, rows.long(), cols.long()].T


def interpolate_descriptors(field: torch.Tensor, points: torch.Tensor, renormalize: bool = True) -> torch.Tensor:
    """Bilinear descriptors at continuous (row, col) grid positions -> (N, D).

    At integer positions this returns the cell descriptor exactly.  Points
    are clamped to the grid.
    """
    D, h, w = field.shape
    r = points[:, 0].to(field.dtype).clamp(0, h - 1)
    c = points[:, 1].to(field.dtype).clamp(0, w - 1)
    r0 = r.floor().long().clamp(max=max(h - 2, 0))
    c0 = c.floor().long().clamp(max=max(w - 2, 0))
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)
    fr = (r - r0).unsqueeze(-1)
    fc = (c - c0).unsqueeze(-1)
    out = (
        field[:, r0, c0].T * (1 - fr) * (1 - fc)
        + field[:, r0, c1].T * (1 - fr) * fc
        + field[:, r1, c0].T * fr * (1 - fc)
        + field[:, r1, c1].T * fr * fc
    )
    if renormalize:
        out = out / torch.linalg.vector_norm(out, dim=-1, keepdim=True).clamp_min(DEGENERATE_EPS)
    return out


__all__ = [
    "DegenerateDescriptorError",
    "MatchDistribution",
    "similarity_heatmap",
    "heatmap_to_distribution",
    "spatial_expectation",
    "marginal_variances",
    "weighted_descriptor",
    "expected_descriptor",
    "nearest_descriptor_match",
    "sample_descriptors",
    "interpolate_descriptors",
]
