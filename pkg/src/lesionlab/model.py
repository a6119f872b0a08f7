"""Classifier assembly: pluggable backbone, dual-pooled channel attention, dense head.

The desk-scale backbone is four stride-2 conv blocks (16-32-64-64 channels,
reflection padding so attention cannot latch onto border artifacts). The
large backbone wraps torchvision's EfficientNetV2-L and is loaded lazily;
nothing in the test suite requires it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classes import NUM_CLASSES
from .errors import DataError

REFERENCE_TOTAL_PARAMS = 120_420_327     # full-scale reference parameter count
REFERENCE_STAGE1_TRAINABLE_PCT = 12.9    # full-scale stage-1 trainable share


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "toy_cnn"            # "toy_cnn" or "large_pretrained"
    feature_channels: int = 64
    layer_count: int = 4
    pretrained: bool = False
    weights_path: str | None = None  # state-dict file for the large backbone

    def __post_init__(self):
        if self.kind not in ("toy_cnn", "large_pretrained"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "toy_cnn" and self.pretrained:
            raise ValueError("the toy backbone has no pretrained weights")


@dataclass(frozen=True)
class HeadConfig:
    dropout: float = 0.5
    hidden_sizes: tuple[int, int] = (1024, 512)
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0,1), got {self.dropout}")


class ChannelAttention(nn.Module):
    """Per-channel gate from pooled statistics: sigmoid(MLP(avg) + MLP(max)).

    The two-layer MLP (C -> C/r -> C, ReLU between) is shared by both pooled
    vectors; gates lie strictly in (0,1) so the block only attenuates.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels <= 0:
            raise ValueError(f"channel count must be positive, got {channels}")
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def _mlp(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(v)))

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self._mlp(avg) + self._mlp(mx))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected BxCxHxW features, got shape {tuple(x.shape)}")
        return x * self.gate(x)[:, :, None, None]


class ToyBackbone(nn.Module):
    """Stack of stride-2 conv blocks sized to train on CPU in seconds."""

    def __init__(self, layer_count: int = 4, feature_channels: int = 64):
        super().__init__()
        ramp = [16, 32, 64]
        chans = [min(ramp[i], feature_channels) if i < len(ramp) else feature_channels
                 for i in range(layer_count - 1)] + [feature_channels]
        blocks = []
        c_in = 3
        for i, c_out in enumerate(chans):
            stride = 2 if i < 4 else 1  # deeper stacks stop shrinking at 1/16
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride, 1, padding_mode="reflect"),
                    nn.BatchNorm2d(c_out),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class LargeBackbone(nn.Module):
    """EfficientNetV2-L feature extractor; block granularity = its feature stages."""

    def __init__(self, pretrained: bool = False, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import efficientnet_v2_l

        net = efficientnet_v2_l(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu")
            net.load_state_dict(state)
        elif pretrained:
            from torchvision.models import EfficientNet_V2_L_Weights

            net = efficientnet_v2_l(weights=EfficientNet_V2_L_Weights.IMAGENET1K_V1)
        self.blocks = nn.ModuleList(list(net.features.children()))
        self.out_channels = 1280

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class LesionClassifier(nn.Module):
    """backbone -> channel attention -> GAP -> BN -> dropout -> 1024 -> 512 -> 7."""

    def __init__(self, backbone: nn.Module, attention: ChannelAttention, head_cfg: HeadConfig):
        super().__init__()
        self.backbone = backbone
        self.attention = attention
        c = backbone.out_channels
        h1, h2 = head_cfg.hidden_sizes
        self.head_bn = nn.BatchNorm1d(c)
        self.head_dropout = nn.Dropout(head_cfg.dropout)
        self.head_fc1 = nn.Linear(c, h1)
        self.head_fc2 = nn.Linear(h1, h2)
        self.head_out = nn.Linear(h2, head_cfg.num_classes)

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        maps = {}
        for i, b in enumerate(self.backbone.blocks):
            x = b(x)
            maps[f"backbone.block{i}"] = x
        maps["attention"] = self.attention(x)
        return maps

    def head_logits(self, attended: torch.Tensor) -> torch.Tensor:
        g = attended.mean(dim=(2, 3))
        g = self.head_dropout(self.head_bn(g))
        g = F.relu(self.head_fc1(g))
        g = F.relu(self.head_fc2(g))
        return self.head_out(g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected Bx3xHxW input, got shape {tuple(x.shape)}")
        return self.head_logits(self.features(x)["attention"])


@dataclass
class ModelHandle:
    """A built classifier plus its freeze state and construction recipe."""

    module: LesionClassifier
    backbone_spec: BackboneSpec
    head_cfg: HeadConfig
    attention_reduction: int
    seed: int
    freeze_stage: int = 0                      # 0 = nothing frozen yet
    freeze_mask: list[bool] = field(default_factory=list)  # True = frozen, per backbone block

    @property
    def layer_count(self) -> int:
        return len(self.module.backbone.blocks)

    def parameter_counts(self) -> tuple[int, int]:
        total = sum(p.numel() for p in self.module.parameters())
        trainable = sum(p.numel() for p in self.module.parameters() if p.requires_grad)
        return total, trainable

    def trainable_parameters(self):
        return [p for p in self.module.parameters() if p.requires_grad]

    def set_train_mode(self) -> None:
        """Training mode, except frozen blocks keep their BN statistics fixed."""
        self.module.train()
        for blk, frozen in zip(self.module.backbone.blocks, self.freeze_mask):
            if frozen:
                blk.eval()

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        self.module.eval()
        with torch.no_grad():
            return torch.softmax(self.module(x), dim=1)


def build_classifier(
    spec: BackboneSpec,
    head: HeadConfig | None = None,
    attention_reduction: int = 16,
    seed: int = 42,
) -> ModelHandle:
    """Assemble the classifier with seed-deterministic initialization."""
    head = head or HeadConfig()
    torch.manual_seed(seed)
    if spec.kind == "toy_cnn":
        backbone: nn.Module = ToyBackbone(spec.layer_count, spec.feature_channels)
    else:
        backbone = LargeBackbone(spec.pretrained, spec.weights_path)
    if backbone.out_channels != spec.feature_channels:
        raise ValueError(
            f"backbone emits {backbone.out_channels} channels but the backbone spec "
            f"asks the attention block to consume {spec.feature_channels}"
        )
    attention = ChannelAttention(backbone.out_channels, attention_reduction)
    module = LesionClassifier(backbone, attention, head)
    handle = ModelHandle(
        module=module,
        backbone_spec=spec,
        head_cfg=head,
        attention_reduction=attention_reduction,
        seed=seed,
        freeze_mask=[False] * len(backbone.blocks),
    )
    return handle


def set_freeze_stage(handle: ModelHandle, stage: int) -> ModelHandle:
    """Stage 1: backbone frozen. Stage 2: last ceil(0.4 L) blocks thaw. Stage 3: all."""
    if stage not in (1, 2, 3):
        raise ValueError(f"unknown training stage {stage!r}; expected 1, 2 or 3")
    n_blocks = handle.layer_count
    if stage == 1:
        frozen = [True] * n_blocks
    elif stage == 2:
        n_open = math.ceil(0.4 * n_blocks)
        frozen = [True] * (n_blocks - n_open) + [False] * n_open
    else:
        frozen = [False] * n_blocks
    for p in handle.module.parameters():
        p.requires_grad_(True)
    for blk, fz in zip(handle.module.backbone.blocks, frozen):
        if fz:
            for p in blk.parameters():
                p.requires_grad_(False)
    handle.freeze_stage = stage
    handle.freeze_mask = frozen
    return handle


def forward(
    handle: ModelHandle, batch: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Inference pass returning (row-stochastic probs, attention feature maps)."""
    handle.module.eval()
    with torch.no_grad():
        maps = handle.module.features(batch)
        logits = handle.module.head_logits(maps["attention"])
        return torch.softmax(logits, dim=1), maps["attention"]


# ---------------------------------------------------------------------------
# checkpoints: weights.pt + meta.json sidecar in one directory

def save_checkpoint(
    handle: ModelHandle,
    directory: Path | str,
    epoch: int | None = None,
    history: list[dict] | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(handle.module.state_dict(), directory / "weights.pt")
    meta = {
        "backbone": {
            "kind": handle.backbone_spec.kind,
            "feature_channels": handle.backbone_spec.feature_channels,
            "layer_count": handle.backbone_spec.layer_count,
            "pretrained": handle.backbone_spec.pretrained,
            "weights_path": handle.backbone_spec.weights_path,
        },
        "head": {
            "dropout": handle.head_cfg.dropout,
            "hidden_sizes": list(handle.head_cfg.hidden_sizes),
            "num_classes": handle.head_cfg.num_classes,
        },
        "attention_reduction": handle.attention_reduction,
        "seed": handle.seed,
        "freeze_stage": handle.freeze_stage,
        "epoch": epoch,
        "history": history or [],
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory: Path | str) -> ModelHandle:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    weights_path = directory / "weights.pt"
    if not meta_path.is_file() or not weights_path.is_file():
        raise DataError(f"checkpoint directory {directory} is missing weights.pt/meta.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    spec = BackboneSpec(
        kind=meta["backbone"]["kind"],
        feature_channels=meta["backbone"]["feature_channels"],
        layer_count=meta["backbone"]["layer_count"],
        pretrained=False,
        weights_path=None,
    )
    head = HeadConfig(
        dropout=meta["head"]["dropout"],
        hidden_sizes=tuple(meta["head"]["hidden_sizes"]),
        num_classes=meta["head"]["num_classes"],
    )
    handle = build_classifier(spec, head, meta["attention_reduction"], meta["seed"])
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    handle.module.load_state_dict(state)
    if meta["freeze_stage"]:
        set_freeze_stage(handle, meta["freeze_stage"])
    return handle


def numpy_batch_to_tensor(batch: np.ndarray) -> torch.Tensor:
    """B x H x W x 3 float array (imagenet stage) -> B x 3 x H x W float32 tensor."""
    arr = np.ascontiguousarray(np.asarray(batch, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr)
