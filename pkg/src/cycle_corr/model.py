"""Dense descriptor networks, upsampling and the checkpoint container."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CHECKPOINT_MAGIC = b"CCLCKPT1"


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    descriptor_dim: int = 64
    stride: int = 8
    backbone_id: str = "tiny"
    normalize_descriptors: bool = True
    backbone_weights: str | None = None  # torchvision weight id, e.g. "IMAGENET1K_V2"; resnet50 only

    def __post_init__(self):
        if self.descriptor_dim < 2:
            raise ValueError(f"descriptor_dim must be >= 2, got {self.descriptor_dim}")
        if self.stride not in (1, 2, 4, 8):
            raise ValueError(f"stride must be one of 1, 2, 4, 8, got {self.stride}")
        if self.backbone_id not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone_id!r}; known: {sorted(BACKBONES)}")
        if self.backbone_weights is not None and self.backbone_id != "resnet50":
            raise ValueError("backbone_weights is only available for the resnet50 backbone")


def normalize_image(image: torch.Tensor) -> torch.Tensor:
    """ImageNet-normalize a (3, H, W) or (B, 3, H, W) image with values in [0, 1]."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=image.dtype, device=image.device).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return (image - mean) / std


def denormalize_image(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=image.dtype, device=image.device).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return image * std + mean


def check_image(image: torch.Tensor) -> None:
    if image.dim() not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
    if image.shape[-2] < 32 or image.shape[-1] < 32:
        raise ShapeError(f"image must be at least 32x32, got {tuple(image.shape[-2:])}")


# --- backbones ---------------------------------------------------------------


class TinyBackbone(nn.Module):
    """Three conv blocks (strided 3x3 then 3x3), output stride 8."""

    def __init__(self, out_dim: int, weights=None, widths=(32, 64, 96)):
        super().__init__()
        layers = []
        c_in = 3
        for w in widths:
            layers += [
                nn.Conv2d(c_in, w, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(w, w, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            c_in = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, out_dim, 1)

    def forward(self, x):
        return self.head(self.features(x))


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 with dilated last stages (output stride 8).

    ``weights`` names torchvision weights (downloaded on first use); None
    gives a random initialization.
    """

    def __init__(self, out_dim: int, weights=None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=weights, replace_stride_with_dilation=[False, True, True])
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        self.head = nn.Conv2d(2048, out_dim, 1)

    def forward(self, x):
        return self.head(self.body(x))


BACKBONES: dict[str, tuple[Callable[..., nn.Module], int]] = {
    # id -> (factory(descriptor_dim, weights), native output stride)
    "tiny": (TinyBackbone, 8),
    "resnet50": (ResNet50Backbone, 8),
}


class DescriptorNet(nn.Module):
    """Maps a normalized RGB image to a D x H/s x W/s descriptor field."""

    def __init__(self, config: ModelConfig, fetch_weights: bool = True):
        super().__init__()
        self.config = config
        factory, native_stride = BACKBONES[config.backbone_id]
        self.backbone = factory(config.descriptor_dim, config.backbone_weights if fetch_weights else None)
        self.native_stride = native_stride

    @property
    def stride(self) -> int:
        return self.config.stride

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        check_image(image)
        H, W = image.shape[-2:]
        s = self.config.stride
        if H % s or W % s:
            raise ShapeError(f"image size {H}x{W} not divisible by stride {s}")
        field = self.backbone(image)
        if field.shape[-2:] != (H // s, W // s):
            # native stride differs from the configured one
            field = F.interpolate(field, size=(H // s, W // s), mode="bilinear", align_corners=False)
        if self.config.normalize_descriptors:
            field = F.normalize(field, dim=1)
        return field[0] if single else field


def upsample(field: torch.Tensor, target_h: int, target_w: int, renormalize: bool = True) -> torch.Tensor:
    """Bilinear (half-pixel aligned) upsampling of a (D, h, w) or (B, D, h, w) field.

    Low-res cell ``c`` lands on full-res coordinate ``c * s + (s - 1) / 2``.
    """
    single = field.dim() == 3
    if single:
        field = field.unsqueeze(0)
    if field.dim() != 4:
        raise ShapeError(f"expected a (D, h, w) field, got shape {tuple(field.shape)}")
    out = F.interpolate(field, size=(target_h, target_w), mode="bilinear", align_corners=False)
    if renormalize:
        out = F.normalize(out, dim=1)
    return out[0] if single else out


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: DescriptorNet, extra: dict | None = None) -> None:
    """Write ``CCLCKPT1 | u32 header length | JSON header | torch payload``.

    The payload holds the model state dict and anything in ``extra``
    (optimizer state, training state).
    """
    header = json.dumps({"model": asdict(model.config), "extra_keys": sorted(extra or {})}).encode()
    buf = io.BytesIO()
    torch.save({"model": model.state_dict(), **(extra or {})}, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelConfig, dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        off = len(CHECKPOINT_MAGIC)
        (n,) = struct.unpack("<I", blob[off:off + 4])
        header = json.loads(blob[off + 4:off + 4 + n])
        payload = torch.load(io.BytesIO(blob[off + 4 + n:]), map_location="cpu", weights_only=False)
        config = ModelConfig(**header["model"])
    except Exception as e:  # corrupt file of any kind
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    return config, payload


def load_checkpoint(path) -> tuple[DescriptorNet, dict]:
    config, payload = read_checkpoint(path)
    # the state dict overwrites every parameter, so skip fetching backbone weights
    model = DescriptorNet(config, fetch_weights=False)
    model.load_state_dict(payload.pop("model"))
    model.eval()
    return model, payload
