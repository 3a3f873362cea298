"""Dual-path segmentation model.

A CNN encoder and a transformer encoder each produce five feature maps at
strides {2, 4, 8, 16, 32}; per-stage fusion blocks concatenate and project the
pairs, and a small decoder upsamples, concatenates and reduces them to a
single-channel probability map at input resolution.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .transformer import AttentionConfig, PatchEmbedConfig, StageConfig, TransformerStage

STRIDES = (2, 4, 8, 16, 32)
MODES = ("fused", "cnn_only", "transformer_only")
RESNET50_CHANNELS = (64, 256, 512, 1024, 2048)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    cnn_arch: str = "resnet50"  # "resnet50" or "mini" (width-configurable, desk scale)
    cnn_widths: Tuple[int, ...] = (16, 32, 64, 128, 256)  # mini arch only
    cnn_weights: Optional[str] = None  # path to a backbone state dict (pretrained)
    embed_dims: Tuple[int, ...] = (32, 64, 128, 256, 512)
    depths: Tuple[int, ...] = (1, 2, 2, 2, 2)
    num_heads: Tuple[int, ...] = (1, 2, 4, 8, 8)
    reductions: Tuple[int, ...] = (16, 8, 4, 2, 1)
    mlp_expansion: int = 4
    fusion_channels: int = 64
    decoder_channels: int = 64
    mode: str = "fused"
    norm_mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.input_size < STRIDES[-1] or self.input_size % STRIDES[-1]:
            raise ValueError(
                f"input_size must be a positive multiple of {STRIDES[-1]}, got {self.input_size}"
            )
        if self.cnn_arch not in ("resnet50", "mini"):
            raise ValueError(f"unknown cnn_arch {self.cnn_arch!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("cnn_widths", "embed_dims", "depths", "num_heads", "reductions"):
            if len(getattr(self, name)) != 5:
                raise ValueError(f"{name} must list 5 stages")
        if self.fusion_channels < 1 or self.decoder_channels < 1:
            raise ValueError("fusion_channels and decoder_channels must be positive")

    @property
    def cnn_channels(self) -> Tuple[int, ...]:
        return RESNET50_CHANNELS if self.cnn_arch == "resnet50" else tuple(self.cnn_widths)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "cnn_arch": self.cnn_arch,
            "cnn_widths": list(self.cnn_widths),
            "cnn_weights": self.cnn_weights,
            "embed_dims": list(self.embed_dims),
            "depths": list(self.depths),
            "num_heads": list(self.num_heads),
            "reductions": list(self.reductions),
            "mlp_expansion": self.mlp_expansion,
            "fusion_channels": self.fusion_channels,
            "decoder_channels": self.decoder_channels,
            "mode": self.mode,
            "norm_mean": list(self.norm_mean),
            "norm_std": list(self.norm_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for name in ("cnn_widths", "embed_dims", "depths", "num_heads", "reductions",
                     "norm_mean", "norm_std"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)

    @classmethod
    def tiny(cls, input_size: int = 32, mode: str = "fused") -> "ModelConfig":
        """Reduced-size configuration (widths <= 16) for desk-scale runs."""
        return cls(
            input_size=input_size,
            cnn_arch="mini",
            cnn_widths=(4, 8, 8, 16, 16),
            embed_dims=(4, 4, 8, 8, 16),
            depths=(1, 1, 1, 1, 1),
            num_heads=(1, 1, 2, 2, 4),
            reductions=(4, 2, 2, 1, 1),
            mlp_expansion=2,
            fusion_channels=8,
            decoder_channels=8,
            mode=mode,
        )


@dataclass
class FeaturePyramid:
    """Five multi-scale maps from one encoder path, ordered by stride."""

    maps: List[torch.Tensor]
    strides: Tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.maps) != 5 or len(self.strides) != 5:
            raise ValueError("a feature pyramid holds exactly 5 maps and 5 strides")
        if any(s2 <= s1 for s1, s2 in zip(self.strides, self.strides[1:])):
            raise ValueError("strides must be strictly increasing")
        for m, stride in zip(self.maps, self.strides):
            if m.dim() != 4:
                raise ValueError("pyramid maps must be 4D tensors")
            if m.shape[-1] * stride != self.maps[0].shape[-1] * self.strides[0]:
                raise ValueError("map sizes are inconsistent with their strides")


class ResNet50Encoder(nn.Module):
    """ResNet-50 backbone exposing the stem and the four residual stages."""

    channels = RESNET50_CHANNELS

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        net = torchvision.models.resnet50(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        c1 = self.stem(x)  # stride 2
        c2 = self.layer1(self.pool(c1))  # stride 4
        c3 = self.layer2(c2)  # stride 8
        c4 = self.layer3(c3)  # stride 16
        c5 = self.layer4(c4)  # stride 32
        return [c1, c2, c3, c4, c5]


class _ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(out + self.shortcut(x))


class MiniCNNEncoder(nn.Module):
    """Width-configurable residual encoder with the same 5-stride layout."""

    def __init__(self, widths: Tuple[int, ...]):
        super().__init__()
        self.channels = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.stages = nn.ModuleList(
            _ResidualBlock(widths[i], widths[i + 1], stride=2) for i in range(4)
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = [self.stem(x)]
        for stage in self.stages:
            maps.append(stage(maps[-1]))
        return maps


class TransformerEncoder(nn.Module):
    """Five hierarchical transformer stages at strides {2, 4, 8, 16, 32}."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.channels = tuple(cfg.embed_dims)
        stage_cfgs = []
        in_channels = 3
        for i in range(5):
            patch = PatchEmbedConfig(
                kernel_size=7 if i == 0 else 3,
                stride=2,
                padding=3 if i == 0 else 1,
                in_channels=in_channels,
                embed_dim=cfg.embed_dims[i],
            )
            attention = AttentionConfig(
                embed_dim=cfg.embed_dims[i],
                num_heads=cfg.num_heads[i],
                reduction=cfg.reductions[i],
            )
            stage_cfgs.append(
                StageConfig(patch, attention, depth=cfg.depths[i], mlp_expansion=cfg.mlp_expansion)
            )
            in_channels = cfg.embed_dims[i]
        self.stages = nn.ModuleList(TransformerStage(sc) for sc in stage_cfgs)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


class ProjectionBlock(nn.Module):
    """1x1 conv + batch norm + ReLU channel projection."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.proj(x)))


class FusionBlock(nn.Module):
    """Concatenate a CNN map with a transformer map and project the channels."""

    def __init__(self, cnn_channels: int, transformer_channels: int, out_channels: int):
        super().__init__()
        self.project = ProjectionBlock(cnn_channels + transformer_channels, out_channels)

    def forward(self, cnn_map: torch.Tensor, transformer_map: torch.Tensor) -> torch.Tensor:
        if cnn_map.shape[-2:] != transformer_map.shape[-2:]:
            raise ValueError(
                f"spatial mismatch: {tuple(cnn_map.shape[-2:])} vs {tuple(transformer_map.shape[-2:])}"
            )
        return self.project(torch.cat([cnn_map, transformer_map], dim=1))


class Decoder(nn.Module):
    """Upsample the five fused maps to input size, concatenate, reduce to one channel."""

    def __init__(self, in_channels: int, mid_channels: int, out_size: int, num_maps: int = 5):
        super().__init__()
        self.out_size = out_size
        self.num_maps = num_maps
        self.conv = nn.Conv2d(in_channels * num_maps, mid_channels, 3, padding=1)
        self.head = nn.Conv2d(mid_channels, 1, 1)

    def forward(self, fused: List[torch.Tensor]) -> torch.Tensor:
        if len(fused) != self.num_maps:
            raise ValueError(f"decoder expects {self.num_maps} maps, got {len(fused)}")
        size = (self.out_size, self.out_size)
        ups = [
            F.interpolate(m, size=size, mode="bilinear", align_corners=False) for m in fused
        ]
        x = F.relu(self.conv(torch.cat(ups, dim=1)))
        return torch.sigmoid(self.head(x))


class DualPathNet(nn.Module):
    """CNN path and transformer path, fused per stage, decoded to probabilities.

    Ablation modes keep the decoder and replace each fusion block with a 1x1
    projection of the surviving path.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("input_mean", torch.tensor(cfg.norm_mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(cfg.norm_std).view(1, 3, 1, 1))

        self.cnn = None
        self.transformer = None
        if cfg.mode != "transformer_only":
            if cfg.cnn_arch == "resnet50":
                self.cnn = ResNet50Encoder(cfg.cnn_weights)
            else:
                self.cnn = MiniCNNEncoder(cfg.cnn_widths)
        if cfg.mode != "cnn_only":
            self.transformer = TransformerEncoder(cfg)

        if cfg.mode == "fused":
            self.fuse = nn.ModuleList(
                FusionBlock(self.cnn.channels[i], self.transformer.channels[i], cfg.fusion_channels)
                for i in range(5)
            )
        else:
            path = self.cnn if cfg.mode == "cnn_only" else self.transformer
            self.fuse = nn.ModuleList(
                ProjectionBlock(path.channels[i], cfg.fusion_channels) for i in range(5)
            )
        self.decoder = Decoder(cfg.fusion_channels, cfg.decoder_channels, cfg.input_size)

    def _normalize(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected a Bx3xHxW tensor, got {tuple(image.shape)}")
        size = self.cfg.input_size
        if image.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} input, got {tuple(image.shape[-2:])}")
        return (image - self.input_mean) / self.input_std

    def cnn_pyramid(self, image: torch.Tensor) -> FeaturePyramid:
        if self.cnn is None:
            raise ValueError("this configuration has no CNN path")
        return FeaturePyramid(self.cnn(self._normalize(image)))

    def transformer_pyramid(self, image: torch.Tensor) -> FeaturePyramid:
        if self.transformer is None:
            raise ValueError("this configuration has no transformer path")
        return FeaturePyramid(self.transformer(self._normalize(image)))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self._normalize(image)
        if self.cfg.mode == "fused":
            cnn_maps = self.cnn(x)
            tr_maps = self.transformer(x)
            fused = [blend(c, t) for blend, c, t in zip(self.fuse, cnn_maps, tr_maps)]
        else:
            path = self.cnn if self.cfg.mode == "cnn_only" else self.transformer
            fused = [project(m) for project, m in zip(self.fuse, path(x))]
        return self.decoder(fused)


def save_checkpoint(
    path,
    model: DualPathNet,
    epoch: int = 0,
    best_val_loss: Optional[float] = None,
    extra: Optional[dict] = None,
) -> Path:
    """Persist parameters, the model configuration and training metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "best_val_loss": None if best_val_loss is None else float(best_val_loss),
    }
    if extra:
        payload["extra"] = dict(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location: str = "cpu"):
    """Rebuild the model from a checkpoint; returns (model, metadata dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location=map_location, weights_only=True)
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = DualPathNet(cfg)
    model.load_state_dict(payload["state_dict"])
    meta = {
        "epoch": payload.get("epoch", 0),
        "best_val_loss": payload.get("best_val_loss"),
        "extra": payload.get("extra", {}),
    }
    return model, meta
