"""Encoder, projection head, classifier head and the patch-transformer baseline.

Checkpoints are safetensors files whose ``__metadata__`` header carries a
``graspcount`` JSON blob: the format version, the model kind and the configs
needed to rebuild the modules.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import nn

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    preset: str = "desk"  # "desk" | "paper"
    feature_dim: int = 256
    input_size: int = 128
    width: int = 24
    # desk preset only: "group" (no running statistics) or "batch"
    norm: str = "group"

    def __post_init__(self):
        if self.preset not in ("desk", "paper"):
            raise ValueError(f"unknown encoder preset {self.preset!r}")
        if self.norm not in ("group", "batch"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.preset == "paper" and self.feature_dim != 2048:
            raise ValueError("the paper preset produces 2048-dimensional features")

    @classmethod
    def paper(cls, input_size: int = 224) -> "EncoderConfig":
        return cls(preset="paper", feature_dim=2048, input_size=input_size)


@dataclass
class HeadConfig:
    projection_dim: int = 128
    hidden: List[int] = field(default_factory=lambda: [512])
    dropout: float = 0.5
    num_classes: int = 5
    normalize: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class TransformerConfig:
    patch_size: int = 12
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    dropout: float = 0.1
    input_size: int = 128
    num_classes: int = 5


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    groups = math.gcd(8, channels)
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1, norm: str = "group"):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = norm_layer(norm, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = norm_layer(norm, c_out)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), norm_layer(norm, c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    """Residual convolutional encoder mapping B x 3 x S x S images to B x feature_dim."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        if cfg.preset == "paper":
            from torchvision.models import resnet50

            net = resnet50(weights=None)
            net.fc = nn.Identity()
            self.body = net
        else:
            w, n = cfg.width, cfg.norm
            # resnet-style stem (/4) then six residual blocks
            self.body = nn.Sequential(
                nn.Conv2d(3, w, 5, 2, 2, bias=False),
                norm_layer(n, w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
                ResidualBlock(w, w, norm=n),
                ResidualBlock(w, 2 * w, stride=2, norm=n),
                ResidualBlock(2 * w, 2 * w, norm=n),
                ResidualBlock(2 * w, 4 * w, stride=2, norm=n),
                ResidualBlock(4 * w, 4 * w, norm=n),
                ResidualBlock(4 * w, cfg.feature_dim, stride=2, norm=n),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W images, got {tuple(x.shape)}")
        if x.shape[-1] != self.cfg.input_size or x.shape[-2] != self.cfg.input_size:
            raise ValueError(f"expected {self.cfg.input_size}px inputs, got {tuple(x.shape[-2:])}")
        return self.body(x)


class ProjectionHead(nn.Module):
    """Two-layer MLP ``feature_dim -> feature_dim -> projection_dim``."""

    def __init__(self, feature_dim: int, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        if feature_dim < cfg.projection_dim:
            raise ValueError("feature_dim must be >= projection_dim")
        self.normalize = cfg.normalize
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.ReLU(inplace=True), nn.Linear(feature_dim, cfg.projection_dim)
        )

    def forward(self, features):
        z = self.net(features)
        return F.normalize(z, dim=1) if self.normalize else z


class ClassifierHead(nn.Module):
    """Dense layers with dropout; returns logits (softmax is applied by :func:`classify`)."""

    def __init__(self, feature_dim: int, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        layers: List[nn.Module] = []
        d = feature_dim
        for h in cfg.hidden:
            layers += [nn.Linear(d, h), nn.ReLU(inplace=True), nn.Dropout(cfg.dropout)]
            d = h
        layers.append(nn.Linear(d, cfg.num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, features):
        return self.net(features)


class ContrastiveModel(nn.Module):
    """Encoder plus both heads; the projection head is only used in stage 1."""

    def __init__(self, enc_cfg: EncoderConfig = EncoderConfig(), head_cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.enc_cfg, self.head_cfg = enc_cfg, head_cfg
        self.encoder = Encoder(enc_cfg)
        self.projection = ProjectionHead(enc_cfg.feature_dim, head_cfg)
        self.classifier = ClassifierHead(enc_cfg.feature_dim, head_cfg)

    @property
    def input_size(self) -> int:
        return self.enc_cfg.input_size

    def encode(self, images):
        return self.encoder(images)

    def project(self, features):
        return self.projection(features)

    def logits(self, images):
        return self.classifier(self.encoder(images))

    def forward(self, images):
        return torch.softmax(self.logits(images), dim=1)


class PatchTransformer(nn.Module):
    """Patch-embedding transformer classifier over composite images.

    Inputs whose side is not a multiple of ``patch_size`` are zero-padded on
    the bottom/right up to the next multiple.
    """

    def __init__(self, cfg: TransformerConfig = TransformerConfig()):
        super().__init__()
        self.cfg = cfg
        side = padded_side(cfg.input_size, cfg.patch_size)
        self.n_patches = (side // cfg.patch_size) ** 2
        self.patch = nn.Linear(3 * cfg.patch_size**2, cfg.embed_dim)
        self.pos = nn.Parameter(torch.randn(1, self.n_patches, cfg.embed_dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            cfg.embed_dim,
            cfg.heads,
            int(cfg.embed_dim * cfg.mlp_ratio),
            cfg.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)

    @property
    def input_size(self) -> int:
        return self.cfg.input_size

    def patchify(self, images):
        p = self.cfg.patch_size
        side = padded_side(images.shape[-1], p)
        pad = side - images.shape[-1]
        if pad or side - images.shape[-2]:
            images = F.pad(images, (0, pad, 0, side - images.shape[-2]))
        b, c = images.shape[:2]
        x = images.unfold(2, p, p).unfold(3, p, p)  # B, C, n, n, p, p
        return x.permute(0, 2, 3, 1, 4, 5).reshape(b, -1, c * p * p)

    def logits(self, images):
        x = self.patch(self.patchify(images)) + self.pos
        x = self.norm(self.blocks(x))
        return self.head(x.mean(dim=1))

    def forward(self, images):
        return torch.softmax(self.logits(images), dim=1)


def padded_side(side: int, patch: int) -> int:
    return int(math.ceil(side / patch) * patch)


def num_patches(side: int, patch: int) -> int:
    return (padded_side(side, patch) // patch) ** 2


# functional surface -------------------------------------------------------


def encode(model: ContrastiveModel, images) -> torch.Tensor:
    return model.encode(images)


def project(model: ContrastiveModel, features) -> torch.Tensor:
    return model.project(features)


def classify(model: ContrastiveModel, features) -> torch.Tensor:
    """Class probabilities from encoder features."""
    return torch.softmax(model.classifier(features), dim=1)


def transformer_classify(model: PatchTransformer, images) -> torch.Tensor:
    return model(images)


# checkpoints ---------------------------------------------------------------


def save_checkpoint(model: nn.Module, path, kind: str, extra: Optional[Dict] = None) -> None:
    """Write ``model``'s state dict with an embedded JSON config header."""
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "config": _model_config(model), "extra": extra or {}}
    state = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(state, str(path), metadata={"graspcount": json.dumps(header, sort_keys=True)})


def read_checkpoint_header(path) -> Dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if "graspcount" not in meta:
        raise ValueError(f"{path} is not a graspcount checkpoint")
    header = json.loads(meta["graspcount"])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path) -> Tuple[nn.Module, Dict]:
    """Rebuild the model described by a checkpoint header and load its weights."""
    header = read_checkpoint_header(path)
    model = build_model(header["config"])
    model.load_state_dict(load_file(str(path)))
    model.eval()
    return model, header


def _model_config(model: nn.Module) -> Dict:
    if isinstance(model, ContrastiveModel):
        return {"type": "contrastive", "encoder": asdict(model.enc_cfg), "head": asdict(model.head_cfg)}
    if isinstance(model, PatchTransformer):
        return {"type": "transformer", "transformer": asdict(model.cfg)}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def build_model(config: Dict) -> nn.Module:
    if config["type"] == "contrastive":
        return ContrastiveModel(EncoderConfig(**config["encoder"]), HeadConfig(**config["head"]))
    if config["type"] == "transformer":
        return PatchTransformer(TransformerConfig(**config["transformer"]))
    raise ValueError(f"unknown model type {config['type']!r}")
