"""Image collections, pair/keypoint sampling and synthetic scenes with exact correspondences."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .model import IMAGENET_MEAN

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MANIFEST_VERSION = 1
ORACLE_VERSION = 1


class ManifestError(RuntimeError):
    pass


class SceneError(RuntimeError):
    pass


# --- manifests -----------------------------------------------------------------


@dataclass
class ImageRecord:
    file: str
    width: int
    height: int
    scene: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    images: list[ImageRecord]
    split: str = "train"
    rejects: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def path(self, i: int) -> Path:
        return self.root / self.images[i].file

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "images": [{"file": r.file, "w": r.width, "h": r.height, **({"scene": r.scene} if r.scene else {})}
                       for r in self.images],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load_json(cls, path, root=None) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {doc.get('version')}")
        images = [ImageRecord(d["file"], d["w"], d["h"], d.get("scene")) for d in doc["images"]]
        return cls(Path(root) if root else path.parent, images, doc.get("split", "train"))


def load_manifest(root, split: str = "train") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, rejects = [], []
    for p in files:
        try:
            with Image.open(p) as im:
                im.load()
                w, h = im.size
        except Exception as e:
            rejects.append((p.name, str(e)))
            log.warning("rejecting %s: %s", p.name, e)
            continue
        images.append(ImageRecord(p.name, w, h))
    if not images:
        raise ManifestError(f"no readable images in {root}")
    return DatasetManifest(root, images, split, rejects)


def load_image(path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Read an RGB image as a (3, H, W) float tensor in [0, 1].

    With ``size`` the image is resized preserving aspect ratio and padded
    (with the ImageNet mean color) to exactly ``size``.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            H, W = size
            scale = min(H / im.height, W / im.width)
            nh, nw = max(1, round(im.height * scale)), max(1, round(im.width * scale))
            im = im.resize((nw, nh), Image.BILINEAR)
            canvas = Image.new("RGB", (W, H), tuple(int(round(255 * m)) for m in IMAGENET_MEAN))
            canvas.paste(im, ((W - nw) // 2, (H - nh) // 2))
            im = canvas
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


class ImageStore:
    """Decoded images of a manifest, cached in memory."""

    def __init__(self, manifest: DatasetManifest, size: tuple[int, int] | None = None):
        self.manifest = manifest
        self.size = size
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, i: int) -> torch.Tensor:
        if i not in self._cache:
            self._cache[i] = load_image(self.manifest.path(i), self.size)
        return self._cache[i]


def sample_pair_indices(n: int, rng_seed: int) -> tuple[int, int]:
    if n < 2:
        raise ManifestError("need at least two images to sample a pair")
    rng = np.random.default_rng(rng_seed)
    i, j = rng.choice(n, size=2, replace=False)
    return int(i), int(j)


def sample_pair(manifest: DatasetManifest, rng_seed: int, size=None) -> tuple[torch.Tensor, torch.Tensor]:
    i, j = sample_pair_indices(len(manifest), rng_seed)
    return load_image(manifest.path(i), size), load_image(manifest.path(j), size)


def sample_keypoints(dims, n: int, rng_seed: int) -> tuple[np.ndarray, bool]:
    """``n`` integer (row, col) cells, uniform without replacement when possible.

    Returns the points and whether sampling had to fall back to replacement.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = dims
    rng = np.random.default_rng(rng_seed)
    replace = n > h * w
    flat = rng.choice(h * w, size=n, replace=replace)
    return np.stack([flat // w, flat % w], axis=1).astype(np.int64), replace


# --- synthetic scenes ------------------------------------------------------------

# amplitude of the per-shape color gradient; makes every object pixel distinguishable
TEX = 0.18
# scene-to-scene rotation range of each instance, matching the default augmentation range
MAX_ROTATION_DEG = 30.0
SHAPE_KINDS = ("disk", "square", "triangle", "ring")

NAMED_COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.15),
    "magenta": (0.8, 0.2, 0.8),
    "cyan": (0.15, 0.8, 0.8),
}


@dataclass
class ShapeSpec:
    kind: str
    color: tuple[float, float, float] | str
    size: float = 10.0  # circumradius in pixels

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if isinstance(self.color, str):
            self.color = NAMED_COLORS[self.color]
        self.color = tuple(float(c) for c in self.color)
        if self.size <= 0:
            raise ValueError("shape size must be > 0")


@dataclass
class SceneSpec:
    shapes: list[ShapeSpec]
    canvas: tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.shapes = [s if isinstance(s, ShapeSpec) else ShapeSpec(**s) for s in self.shapes]
        self.canvas = tuple(int(c) for c in self.canvas)
        if not 1 <= len(self.shapes) <= 5:
            raise ValueError("a scene holds 1 to 5 shapes")
        if len({s.color for s in self.shapes}) != len(self.shapes):
            raise ValueError("shape colors must be distinct")

    @classmethod
    def default(cls, n_shapes: int = 3, size: float = 10.0, canvas=(64, 64)) -> "SceneSpec":
        kinds = ["disk", "square", "triangle", "ring", "square"]
        colors = ["red", "green", "blue", "yellow", "magenta"]
        return cls([ShapeSpec(kinds[i], colors[i], size) for i in range(n_shapes)], canvas)

    def to_json(self) -> dict:
        return {"shapes": [asdict(s) for s in self.shapes], "canvas": list(self.canvas)}

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSpec":
        return cls([ShapeSpec(**s) for s in doc["shapes"]], tuple(doc.get("canvas", (64, 64))))


@dataclass
class Instance:
    shape_id: int
    row: float
    col: float
    angle: float

    def to_local(self, points: np.ndarray) -> np.ndarray:
        d = np.asarray(points, dtype=np.float64).reshape(-1, 2) - (self.row, self.col)
        c, s = math.cos(self.angle), math.sin(self.angle)
        # inverse rotation of (row, col) offsets
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)

    def to_world(self, local: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        u, v = local[:, 0], local[:, 1]
        return np.stack([c * u - s * v + self.row, s * u + c * v + self.col], axis=1)


def inside(kind: str, size: float, local: np.ndarray) -> np.ndarray:
    u, v = local[:, 0], local[:, 1]
    r = np.hypot(u, v)
    if kind == "disk":
        return r <= size
    if kind == "ring":
        return (r <= size) & (r >= 0.5 * size)
    if kind == "square":
        half = size / math.sqrt(2)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        # equilateral, circumradius ``size``, apex towards -row
        ok = np.ones(len(u), dtype=bool)
        for k in range(3):
            a = -math.pi / 2 + k * 2 * math.pi / 3  # outward normal directions of the edges
            n = np.array([math.cos(a + math.pi), math.sin(a + math.pi)])
            ok &= u * n[0] + v * n[1] <= size / 2
        return ok
    raise ValueError(kind)


def shape_texture(color, local: np.ndarray, size: float) -> np.ndarray:
    """Base color plus a rank-2 linear gradient over the shape, so interior points are distinguishable."""
    u, v = local[:, 0] / size, local[:, 1] / size
    grad = TEX * np.stack([u, v, 0.7 * (u - v)], axis=1)
    return np.clip(np.asarray(color) + grad, 0.0, 1.0)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    instances: list[Instance]
    image: torch.Tensor  # (3, H, W) in [0, 1]
    background_seed: int = 0

    def instance_map(self) -> np.ndarray:
        """Shape id owning each pixel center, -1 for background."""
        H, W = self.spec.canvas
        rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
        return self.owner(pts).reshape(H, W)

    def owner(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.full(len(pts), -1, dtype=np.int64)
        for inst in self.instances:
            s = self.spec.shapes[inst.shape_id]
            out[inside(s.kind, s.size, inst.to_local(pts)) & (out < 0)] = inst.shape_id
        return out

    def to_json(self) -> dict:
        return {"instances": [asdict(i) for i in self.instances], "background_seed": self.background_seed}


def correspond(scene_a: SyntheticScene, scene_b: SyntheticScene, points) -> np.ndarray:
    """Map (row, col) points of ``scene_a`` into ``scene_b``; NaN where there is no correspondence."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.full_like(pts, np.nan)
    owners = scene_a.owner(pts)
    by_id_b = {inst.shape_id: inst for inst in scene_b.instances}
    for inst in scene_a.instances:
        m = owners == inst.shape_id
        if not m.any() or inst.shape_id not in by_id_b:
            continue
        out[m] = by_id_b[inst.shape_id].to_world(inst.to_local(pts[m]))
    return out


def _background(canvas, rng: np.random.Generator) -> np.ndarray:
    H, W = canvas
    rr, cc = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    img = np.full((H, W, 3), rng.uniform(0.3, 0.6)) + rng.uniform(-0.05, 0.05, size=3)
    for _ in range(3):
        f = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.07, size=3)
        img += amp * np.sin(2 * np.pi * (f[0] * rr + f[1] * cc) + phase)[..., None]
    return img


def render_scene(spec: SceneSpec, instances: list[Instance], background_seed: int) -> torch.Tensor:
    H, W = spec.canvas
    img = _background(spec.canvas, np.random.default_rng(background_seed)).reshape(-1, 3)
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    for inst in instances:
        s = spec.shapes[inst.shape_id]
        local = inst.to_local(pts)
        m = inside(s.kind, s.size, local)
        img[m] = shape_texture(s.color, local[m], s.size)
    img = np.clip(img, 0, 1).reshape(H, W, 3).astype(np.float32)
    return torch.from_numpy(img).permute(2, 0, 1).contiguous()


def generate_synthetic_scene(
    spec: SceneSpec, rng_seed: int, present=None, max_tries: int = 100, max_rotation_deg: float = MAX_ROTATION_DEG
) -> SyntheticScene:
    """Place every shape (or the ids in ``present``) at a random, non-overlapping rigid pose.

    Instance angles are uniform in +-``max_rotation_deg``.
    """
    rng = np.random.default_rng(rng_seed)
    H, W = spec.canvas
    ids = list(range(len(spec.shapes))) if present is None else list(present)
    for _ in range(max_tries):
        placed = _place(spec, ids, rng, max_tries, math.radians(max_rotation_deg))
        if placed is not None:
            break
    else:
        raise SceneError(f"could not place {len(ids)} shapes without overlap in {max_tries} tries")
    bg_seed = int(rng.integers(2**31))
    return SyntheticScene(spec, placed, render_scene(spec, placed, bg_seed), bg_seed)


def _place(spec: SceneSpec, ids, rng, tries: int, max_angle: float):
    H, W = spec.canvas
    placed: list[Instance] = []
    for k in ids:
        size = spec.shapes[k].size
        lo, hi_r, hi_c = size + 1, H - size - 2, W - size - 2
        if hi_r < lo or hi_c < lo:
            raise SceneError(f"shape {k} of size {size} does not fit the canvas")
        for _ in range(tries):
            inst = Instance(k, rng.uniform(lo, hi_r), rng.uniform(lo, hi_c), rng.uniform(-max_angle, max_angle))
            if all(
                math.hypot(inst.row - o.row, inst.col - o.col) >= spec.shapes[o.shape_id].size + size + 1
                for o in placed
            ):
                placed.append(inst)
                break
        else:
            return None
    return placed


def generate_scenes(
    spec: SceneSpec, n: int, rng_seed: int, p_absent: float = 0.0, max_rotation_deg: float = MAX_ROTATION_DEG
) -> list[SyntheticScene]:
    """``n`` independent arrangements of the same instances.

    With ``p_absent`` each instance is independently left out (at least one stays).
    """
    seeds = np.random.SeedSequence(rng_seed).generate_state(n)
    scenes = []
    for s in seeds:
        rng = np.random.default_rng(int(s))
        present = [k for k in range(len(spec.shapes)) if rng.random() >= p_absent]
        if not present:
            present = [int(rng.integers(len(spec.shapes)))]
        scenes.append(
            generate_synthetic_scene(spec, int(rng.integers(2**31)), present, max_rotation_deg=max_rotation_deg)
        )
    return scenes


def save_image(image: torch.Tensor, path) -> None:
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_scenes(scenes: list[SyntheticScene], out_dir, prefix: str = "scene") -> Path:
    """Write PNGs plus ``oracle.json`` describing every instance pose."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sc in enumerate(scenes):
        name = f"{prefix}_{i:05d}.png"
        save_image(sc.image, out_dir / name)
        entries.append({"file": name, **sc.to_json()})
    doc = {"version": ORACLE_VERSION, "spec": scenes[0].spec.to_json() if scenes else None, "scenes": entries}
    path = out_dir / "oracle.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def read_scenes(oracle_path, render: bool = True) -> dict[str, SyntheticScene]:
    doc = json.loads(Path(oracle_path).read_text())
    spec = SceneSpec.from_json(doc["spec"])
    out = {}
    for e in doc["scenes"]:
        insts = [Instance(**d) for d in e["instances"]]
        img = render_scene(spec, insts, e["background_seed"]) if render else None
        out[e["file"]] = SyntheticScene(spec, insts, img, e["background_seed"])
    return out
