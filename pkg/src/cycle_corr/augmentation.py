"""Random homography warps, photometric jitter and keypoint transport.

Homographies act on homogeneous ``(row, col, 1)`` pixel coordinates and
map a source pixel to its position in the augmented image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .losses import KeypointBatch
from .model import normalize_image

LUMA = (0.299, 0.587, 0.114)


@dataclass
class AugmentConfig:
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    scale: tuple[float, float] = (0.7, 1.3)
    translate: tuple[float, float] = (0.0, 0.0)  # fraction of the image size
    perspective: float = 0.1  # max corner displacement, fraction of min(H, W)
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.8, 1.2)
    p_affine: float = 1.0
    p_perspective: float = 0.5
    p_color: float = 1.0

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "translate", "brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))
        if self.scale[0] <= 0:
            raise ValueError("scale must be > 0")
        if self.perspective < 0:
            raise ValueError("perspective must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(
            rotation_deg=(0, 0), scale=(1, 1), translate=(0, 0), perspective=0.0,
            brightness=(1, 1), contrast=(1, 1), saturation=(1, 1),
        )


@dataclass
class Warp:
    matrix: np.ndarray
    source_dims: tuple[int, int]
    target_dims: tuple[int, int] = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 3):
            raise ValueError("warp matrix must be 3x3")
        if abs(np.linalg.det(self.matrix)) <= 1e-8:
            raise ValueError("warp matrix is not invertible")
        self.source_dims = tuple(int(d) for d in self.source_dims)
        self.target_dims = tuple(int(d) for d in (self.target_dims or self.source_dims))

    @classmethod
    def identity(cls, dims) -> "Warp":
        return cls(np.eye(3), dims)

    @classmethod
    def translation(cls, d_row: float, d_col: float, dims) -> "Warp":
        m = np.eye(3)
        m[0, 2], m[1, 2] = d_row, d_col
        return cls(m, dims)

    @classmethod
    def rotation(cls, degrees: float, dims, scale: float = 1.0) -> "Warp":
        """Rotation (and scale) about the image center."""
        center = ((dims[0] - 1) / 2, (dims[1] - 1) / 2)
        return cls(_about(center, _rot_scale(np.deg2rad(degrees), scale)), dims)

    def inverse(self) -> "Warp":
        return Warp(np.linalg.inv(self.matrix), self.target_dims, self.source_dims)

    def then(self, other: "Warp") -> "Warp":
        """Apply ``self`` first, then ``other``."""
        return Warp(other.matrix @ self.matrix, self.source_dims, other.target_dims)

    def apply_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ self.matrix.T
        return homog[:, :2] / homog[:, 2:3]


def _rot_scale(theta: float, scale: float) -> np.ndarray:
    c, s = np.cos(theta) * scale, np.sin(theta) * scale
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _about(center, m: np.ndarray) -> np.ndarray:
    t = np.eye(3)
    t[:2, 2] = center
    t_inv = np.eye(3)
    t_inv[:2, 2] = -np.asarray(center)
    return t @ m @ t_inv


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homography through four point correspondences (h33 = 1)."""
    A, b = [], []
    for (r, c), (r2, c2) in zip(src, dst):
        A.append([r, c, 1, 0, 0, 0, -r * r2, -c * r2])
        b.append(r2)
        A.append([0, 0, 0, r, c, 1, -r * c2, -c * c2])
        b.append(c2)
    h = np.linalg.solve(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def sample_warp(config: AugmentConfig, rng_seed: int, dims=(64, 64)) -> Warp:
    rng = np.random.default_rng(rng_seed)
    H, W = dims
    center = ((H - 1) / 2, (W - 1) / 2)
    m = np.eye(3)
    # draws happen unconditionally so the stream layout is seed-stable
    u_aff, u_persp = rng.random(2)
    theta = np.deg2rad(rng.uniform(*config.rotation_deg))
    scale = rng.uniform(*config.scale)
    shift = rng.uniform(*config.translate, size=2) * np.array([H, W])
    corners_jitter = rng.uniform(-1, 1, size=(4, 2)) * config.perspective * min(H, W)
    if u_aff < config.p_affine:
        m = _about(center, _rot_scale(theta, scale))
        m[:2, 2] += shift
    if u_persp < config.p_perspective and config.perspective > 0:
        corners = np.array([[0, 0], [0, W - 1], [H - 1, W - 1], [H - 1, 0]], dtype=np.float64)
        m = homography_from_points(corners, corners + corners_jitter) @ m
    return Warp(m, dims)


def apply_warp(image: torch.Tensor, warp: Warp) -> torch.Tensor:
    """Inverse-mapped bilinear resampling; pixels from outside the source become 0."""
    if tuple(image.shape[-2:]) != warp.source_dims:
        raise ValueError(f"image dims {tuple(image.shape[-2:])} != warp source dims {warp.source_dims}")
    H, W = warp.source_dims
    Ht, Wt = warp.target_dims
    rr, cc = np.meshgrid(np.arange(Ht), np.arange(Wt), indexing="ij")
    src = warp.inverse().apply_points(np.stack([rr.ravel(), cc.ravel()], axis=1))
    # grid_sample wants (x, y) = (col, row) in [-1, 1] with align_corners=True
    grid = np.stack([2 * src[:, 1] / (W - 1) - 1, 2 * src[:, 0] / (H - 1) - 1], axis=1)
    grid = torch.from_numpy(grid.reshape(1, Ht, Wt, 2)).to(image.dtype)
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    out = F.grid_sample(x, grid.expand(x.shape[0], -1, -1, -1), mode="bilinear",
                        padding_mode="zeros", align_corners=True)
    # a full pixel or more outside the source: exactly zero, not a 1e-15 blend
    inside = (src[:, 0] > -1) & (src[:, 0] < H) & (src[:, 1] > -1) & (src[:, 1] < W)
    out = out * torch.from_numpy(inside.reshape(Ht, Wt)).to(out.dtype)
    return out[0] if single else out


def in_bounds(points: np.ndarray, dims, tol: float = 1e-6) -> np.ndarray:
    """Inside the hull of pixel centers, i.e. at least half a pixel inside the image border."""
    H, W = dims
    p = np.asarray(points).reshape(-1, 2)
    return ((p[:, 0] >= -tol) & (p[:, 0] <= H - 1 + tol) & (p[:, 1] >= -tol) & (p[:, 1] <= W - 1 + tol)
            & np.isfinite(p).all(1))


def transport_keypoints(kps, warp: Warp) -> KeypointBatch:
    src = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    dst = warp.apply_points(src)
    valid = in_bounds(dst, warp.target_dims)
    return KeypointBatch(torch.from_numpy(src), torch.from_numpy(dst), torch.from_numpy(valid))


def jitter_factors(config: AugmentConfig, rng_seed: int) -> dict[str, float]:
    rng = np.random.default_rng(rng_seed)
    u, b, c, s = rng.random(4)
    if u >= config.p_color:
        return {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0}
    return {
        "brightness": _lerp(config.brightness, b),
        "contrast": _lerp(config.contrast, c),
        "saturation": _lerp(config.saturation, s),
    }


def _lerp(bounds, t) -> float:
    return float(bounds[0] + (bounds[1] - bounds[0]) * t)


def grayscale(image: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA, dtype=image.dtype).view(3, 1, 1)
    return (image * w).sum(-3, keepdim=True)


def adjust(image: torch.Tensor, brightness=1.0, contrast=1.0, saturation=1.0) -> torch.Tensor:
    """Brightness, then contrast about the mean luminance, then saturation; clamped after each."""
    out = (image * brightness).clamp(0, 1)
    if contrast != 1.0:
        m = grayscale(out).mean()
        out = (m + contrast * (out - m)).clamp(0, 1)
    if saturation != 1.0:
        g = grayscale(out)
        out = (g + saturation * (out - g)).clamp(0, 1)
    return out


def color_jitter(image: torch.Tensor, config: AugmentConfig, rng_seed: int) -> torch.Tensor:
    """Photometric jitter on an un-normalized [0, 1] RGB image."""
    return adjust(image, **jitter_factors(config, rng_seed))


@dataclass
class AugmentedView:
    image: torch.Tensor  # normalized; out-of-view pixels are 0, i.e. the channel mean
    warp: Warp
    jitter: dict = field(default_factory=dict)


def augment(image: torch.Tensor, config: AugmentConfig, rng_seed: int) -> AugmentedView:
    """Jitter a raw [0, 1] image, normalize it, then warp it."""
    seeds = np.random.SeedSequence(rng_seed).generate_state(2)
    warp = sample_warp(config, int(seeds[0]), tuple(image.shape[-2:]))
    jitter = jitter_factors(config, int(seeds[1]))
    return AugmentedView(apply_warp(normalize_image(adjust(image, **jitter)), warp), warp, jitter)
