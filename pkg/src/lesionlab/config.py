"""Run configuration: nested dataclasses, YAML round-trip, presets, strict keys.

Unknown keys anywhere in a config file are rejected with the offending path.
Defaults mirror the full-scale reference setup (seed 42, batch 32, balancing fraction
0.6, focal gamma 2 / alpha 0.25 / smoothing 0.1, stages 25/20/15 at
1e-3/1e-4/1e-5); the `desk` preset swaps in the CPU-scale backbone and a
5/4/3-epoch schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig, MixUpConfig
from .model import BackboneSpec, HeadConfig
from .train import FocalLossConfig, StageConfig


@dataclass
class DataConfig:
    metadata_csv: str = "data/metadata.csv"
    image_dir: str = "data/images"
    split_csv: str = "split.csv"      # relative to out_dir unless absolute
    image_size: tuple[int, int] = (384, 384)
    batch_size: int = 32
    cache_images: bool = False


@dataclass
class SplitConfig:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


@dataclass
class BalanceConfig:
    enabled: bool = True
    fraction: float = 0.6


@dataclass
class BackboneConfig:
    kind: str = "large_pretrained"
    feature_channels: int = 1280
    layer_count: int = 9
    pretrained: bool = True
    weights_path: str | None = None

    def to_spec(self) -> BackboneSpec:
        return BackboneSpec(
            kind=self.kind,
            feature_channels=self.feature_channels,
            layer_count=self.layer_count,
            pretrained=self.pretrained,
            weights_path=self.weights_path,
        )


@dataclass
class AttentionConfig:
    reduction: int = 16


@dataclass
class HeadConfigC:
    dropout: float = 0.5
    hidden_sizes: tuple[int, int] = (1024, 512)

    def to_head(self) -> HeadConfig:
        return HeadConfig(dropout=self.dropout, hidden_sizes=tuple(self.hidden_sizes))


@dataclass
class StageConfigC:
    stage_id: int
    epochs: int
    base_lr: float
    weight_decay: float = 1e-4
    early_stop_patience: int | None = None
    lr_floor_fraction: float = 0.01

    def to_stage(self) -> StageConfig:
        return StageConfig(
            stage_id=self.stage_id,
            epochs=self.epochs,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            early_stop_patience=self.early_stop_patience,
            lr_floor_fraction=self.lr_floor_fraction,
        )


@dataclass
class LossConfigC:
    gamma: float = 2.0
    alpha: float = 0.25
    smoothing: float = 0.1
    use_class_weights: bool = True

    def to_loss(self) -> FocalLossConfig:
        return FocalLossConfig(
            gamma=self.gamma,
            alpha=self.alpha,
            smoothing=self.smoothing,
            use_class_weights=self.use_class_weights,
        )


@dataclass
class AugmentConfigC:
    flip_prob: float = 0.5
    rotation_deg: float = 30.0
    rotation_prob: float = 0.5
    brightness_contrast: float = 0.20
    brightness_contrast_prob: float = 0.5
    hsv_shift: tuple[float, float, float] = (10.0, 0.15, 0.15)
    hsv_prob: float = 0.5
    noise_std: float = 0.02
    noise_prob: float = 0.3
    blur_sigma_max: float = 1.0
    blur_prob: float = 0.3
    coarse_dropout: tuple[int, float] = (4, 0.10)
    coarse_dropout_prob: float = 0.3

    def to_augment(self) -> AugmentConfig:
        return AugmentConfig(
            flip_prob=self.flip_prob,
            rotation_deg=self.rotation_deg,
            rotation_prob=self.rotation_prob,
            brightness_contrast=self.brightness_contrast,
            brightness_contrast_prob=self.brightness_contrast_prob,
            hsv_shift=tuple(self.hsv_shift),
            hsv_prob=self.hsv_prob,
            noise_std=self.noise_std,
            noise_prob=self.noise_prob,
            blur_sigma_max=self.blur_sigma_max,
            blur_prob=self.blur_prob,
            coarse_dropout=tuple(self.coarse_dropout),
            coarse_dropout_prob=self.coarse_dropout_prob,
        )


@dataclass
class MixupConfigC:
    alpha: float = 0.2
    enabled: bool = True
    prob: float = 0.5

    def to_mixup(self) -> MixUpConfig:
        return MixUpConfig(alpha=self.alpha, enabled=self.enabled, prob=self.prob)


@dataclass
class RunConfig:
    seed: int = 42
    deterministic: bool = True
    mixed_precision: bool = False     # accepted for parity; no numerical contract
    out_dir: str = "outputs"
    explain_layer: str = "attention"
    save_epoch_checkpoints: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    augment: AugmentConfigC = field(default_factory=AugmentConfigC)
    mixup: MixupConfigC = field(default_factory=MixupConfigC)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    head: HeadConfigC = field(default_factory=HeadConfigC)
    stages: list[StageConfigC] = field(default_factory=lambda: _full_scale_stages())
    loss: LossConfigC = field(default_factory=LossConfigC)

    def split_csv_path(self) -> Path:
        p = Path(self.data.split_csv)
        return p if p.is_absolute() else Path(self.out_dir) / p


def _full_scale_stages() -> list[StageConfigC]:
    return [
        StageConfigC(stage_id=1, epochs=25, base_lr=1e-3, weight_decay=1e-4),
        StageConfigC(stage_id=2, epochs=20, base_lr=1e-4, weight_decay=1e-4,
                     early_stop_patience=10),
        StageConfigC(stage_id=3, epochs=15, base_lr=1e-5, weight_decay=1e-5),
    ]


def _desk_stages() -> list[StageConfigC]:
    return [
        StageConfigC(stage_id=1, epochs=5, base_lr=1e-3, weight_decay=1e-4),
        StageConfigC(stage_id=2, epochs=4, base_lr=1e-4, weight_decay=1e-4),
        StageConfigC(stage_id=3, epochs=3, base_lr=1e-5, weight_decay=1e-5),
    ]


def preset(name: str) -> RunConfig:
    """`paper` is the full-scale reference configuration; `desk` trains on CPU in seconds."""
    if name == "paper":
        return RunConfig()
    if name == "desk":
        return RunConfig(
            data=DataConfig(image_size=(64, 64), batch_size=32, cache_images=True),
            backbone=BackboneConfig(
                kind="toy_cnn", feature_channels=64, layer_count=4, pretrained=False
            ),
            stages=_desk_stages(),
            # 12 total epochs leave little room to train through heavy
            # photometric noise, so the desk preset dials the pipeline down
            augment=AugmentConfigC(
                brightness_contrast_prob=0.3,
                hsv_prob=0.3,
                noise_prob=0.15,
                blur_prob=0.15,
                coarse_dropout_prob=0.15,
            ),
        )
    raise ValueError(f"unknown preset {name!r}; expected 'desk' or 'paper'")


# ---------------------------------------------------------------------------
# dict/YAML conversion with strict keys

def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = path or "<root>"
        raise ValueError(f"unknown config key(s) {sorted(unknown)} under {where}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _convert(f.type, value, sub)
    return cls(**kwargs)


_SECTION_TYPES = {
    "DataConfig": DataConfig,
    "SplitConfig": SplitConfig,
    "BalanceConfig": BalanceConfig,
    "AugmentConfigC": AugmentConfigC,
    "MixupConfigC": MixupConfigC,
    "BackboneConfig": BackboneConfig,
    "AttentionConfig": AttentionConfig,
    "HeadConfigC": HeadConfigC,
    "LossConfigC": LossConfigC,
    "StageConfigC": StageConfigC,
}


def _convert(ftype: str, value, path: str):
    ftype = str(ftype)
    for name, cls in _SECTION_TYPES.items():
        if name in ftype and "list" not in ftype:
            return _build(cls, value, path)
    if "list[StageConfigC]" in ftype:
        if not isinstance(value, list):
            raise ValueError(f"{path} must be a list of stage mappings")
        return [_build(StageConfigC, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if "tuple" in ftype and isinstance(value, list):
        return tuple(value)
    return value


def merge_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply a (possibly partial) nested dict of overrides onto an existing config."""
    base = to_dict(cfg)
    merged = _deep_merge(base, overrides)
    return _build(RunConfig, merged, "")


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key == "stages":
            out[key] = value  # stage lists replace wholesale
        elif isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def to_dict(cfg: RunConfig) -> dict:
    def _clean(obj):
        if isinstance(obj, tuple):
            return [_clean(v) for v in obj]
        if isinstance(obj, list):
            return [_clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: _clean(v) for k, v in obj.items()}
        return obj

    return _clean(dataclasses.asdict(cfg))


def load_config(path: Path | str, base: RunConfig | None = None) -> RunConfig:
    """Parse a YAML config file, layered over `base` (defaults to the full-scale preset)."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return merge_overrides(base or RunConfig(), data)


def save_config(cfg: RunConfig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
    return path
