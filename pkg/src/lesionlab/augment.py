"""Class balancing by augmented upsampling, the stochastic training pipeline, and MixUp.

Balancing copies draw only from {rotation, flips, HSV shift}; the richer
pipeline (noise, blur, coarse dropout) runs online at training time. All
randomness flows through an explicit numpy Generator so (seed, config)
fully determines every sampled parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .classes import NUM_CLASSES, LesionClass
from .dataset import DatasetManifest, NormalizedImage, SampleRecord
from .errors import DataError


@dataclass(frozen=True)
class BalancingPlan:
    fraction: float
    targets: dict[LesionClass, int]
    to_generate: dict[LesionClass, int]

    @property
    def total_target(self) -> int:
        return sum(self.targets.values())


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_deg: float = 30.0
    rotation_prob: float = 0.5
    brightness_contrast: float = 0.20
    brightness_contrast_prob: float = 0.5
    hsv_shift: tuple[float, float, float] = (10.0, 0.15, 0.15)  # hue degrees, sat, val
    hsv_prob: float = 0.5
    noise_std: float = 0.02
    noise_prob: float = 0.3
    blur_sigma_max: float = 1.0
    blur_prob: float = 0.3
    coarse_dropout: tuple[int, float] = (4, 0.10)  # max holes, max side fraction
    coarse_dropout_prob: float = 0.3

    def __post_init__(self):
        probs = (
            self.flip_prob,
            self.rotation_prob,
            self.brightness_contrast_prob,
            self.hsv_prob,
            self.noise_prob,
            self.blur_prob,
            self.coarse_dropout_prob,
        )
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"augmentation probabilities must lie in [0,1], got {probs}")
        if self.rotation_deg < 0:
            raise ValueError(f"rotation_deg must be >= 0, got {self.rotation_deg}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            flip_prob=0.0,
            rotation_prob=0.0,
            brightness_contrast_prob=0.0,
            hsv_prob=0.0,
            noise_prob=0.0,
            blur_prob=0.0,
            coarse_dropout_prob=0.0,
        )


@dataclass(frozen=True)
class MixUpConfig:
    alpha: float = 0.2
    enabled: bool = True
    prob: float = 0.5  # chance a given batch is mixed at all

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")


@dataclass
class MixedBatch:
    images: np.ndarray        # B x H x W x 3
    soft_labels: np.ndarray   # B x 7, rows sum to 1
    lambdas: np.ndarray       # B
    permutation: np.ndarray   # B partner indices


# ---------------------------------------------------------------------------
# balancing plan

def balancing_plan(class_counts: dict[LesionClass, int], fraction: float) -> BalancingPlan:
    """Targets: every class raised to round(fraction * majority), never shrunk."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"balancing fraction must lie in (0,1], got {fraction}")
    if not any(n > 0 for n in class_counts.values()):
        raise ValueError("balancing needs at least one non-empty class")
    n_max = max(class_counts.values())
    # exact half-even rounding of fraction * n_max, immune to float artifacts
    floor_frac = Fraction(str(fraction)) * n_max
    q, rem = divmod(floor_frac.numerator, floor_frac.denominator)
    den = floor_frac.denominator
    if 2 * rem > den or (2 * rem == den and q % 2 == 1):
        floor_count = q + 1
    else:
        floor_count = q
    targets = {}
    to_generate = {}
    for cls, n in class_counts.items():
        if n == 0:
            targets[cls] = 0
            to_generate[cls] = 0
            continue
        targets[cls] = max(n, floor_count)
        to_generate[cls] = targets[cls] - n
    return BalancingPlan(fraction=fraction, targets=targets, to_generate=to_generate)


# ---------------------------------------------------------------------------
# geometric / photometric primitives (raw01 domain)

def rotate_bilinear(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling and reflection padding."""
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = cy + (yy - cy) * np.cos(th) - (xx - cx) * np.sin(th)
    xs = cx + (yy - cy) * np.sin(th) + (xx - cx) * np.cos(th)
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(
            pixels[:, :, c], [ys, xs], order=1, mode="reflect"
        )
    return out


def shift_hsv(pixels: np.ndarray, dh_deg: float, ds: float, dv: float) -> np.ndarray:
    """Hue rotation (wrapping) plus additive saturation/value shifts, clipped."""
    hsv = rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
    hsv[:, :, 0] = (hsv[:, :, 0] + dh_deg / 360.0) % 1.0
    hsv[:, :, 1] = np.clip(hsv[:, :, 1] + ds, 0.0, 1.0)
    hsv[:, :, 2] = np.clip(hsv[:, :, 2] + dv, 0.0, 1.0)
    return hsv_to_rgb(hsv).astype(pixels.dtype)


def _apply_descriptor(pixels: np.ndarray, transform: dict) -> np.ndarray:
    """Replay a provenance descriptor produced by the balancing materializer."""
    out = pixels
    if transform.get("hflip"):
        out = out[:, ::-1]
    if transform.get("vflip"):
        out = out[::-1, :]
    if transform.get("rotate"):
        out = rotate_bilinear(np.ascontiguousarray(out, dtype=np.float32), transform["rotate"])
    if "hsv" in transform:
        out = shift_hsv(np.ascontiguousarray(out, dtype=np.float32), *transform["hsv"])
    return np.ascontiguousarray(out, dtype=np.float32)


def sample_balance_transform(cfg: AugmentConfig, rng: np.random.Generator) -> dict:
    """Draw a random composition from the balancing pool: rotation, flips, HSV."""
    transform: dict = {}
    if rng.random() < 0.5:
        transform["hflip"] = True
    if rng.random() < 0.5:
        transform["vflip"] = True
    if rng.random() < 0.8:
        transform["rotate"] = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    if rng.random() < 0.5:
        h_max, s_max, v_max = cfg.hsv_shift
        transform["hsv"] = [
            float(rng.uniform(-h_max, h_max)),
            float(rng.uniform(-s_max, s_max)),
            float(rng.uniform(-v_max, v_max)),
        ]
    if not transform:
        transform["hflip"] = True  # copies must differ from their source
    return transform


def materialize_balanced(
    manifest: DatasetManifest,
    plan: BalancingPlan,
    cfg: AugmentConfig,
    seed: int,
) -> DatasetManifest:
    """Append synthetic train records carrying (source id, transform) provenance.

    Pixels are regenerated on the fly from provenance when batches are built,
    so no image files are written here. Original records are never touched.
    """
    train_counts = manifest.split_counts("train")
    by_class: dict[LesionClass, list[SampleRecord]] = {c: [] for c in LesionClass}
    for r in manifest.records:
        if r.split == "train":
            by_class[r.label].append(r)

    new_records = list(manifest.records)
    for cls in LesionClass:
        need = plan.to_generate.get(cls, 0)
        if need == 0:
            continue
        sources = by_class[cls]
        if not sources:
            raise DataError(
                f"balancing plan requires {need} copies of class {cls.code!r} "
                f"but the train split has no source images"
            )
        if plan.targets[cls] != train_counts[cls] + need:
            raise ValueError(
                f"plan inconsistent for class {cls.code!r}: target "
                f"{plan.targets[cls]} != {train_counts[cls]} existing + {need} new"
            )
        rng = np.random.default_rng([seed, cls.index])
        for k in range(need):
            src = sources[int(rng.integers(len(sources)))]
            transform = sample_balance_transform(cfg, rng)
            new_records.append(
                replace(
                    src,
                    image_id=f"{src.image_id}-bal{k:05d}",
                    source_image_id=src.image_id,
                    transform=transform,
                )
            )
    return DatasetManifest(new_records)


def regenerate_pixels(record: SampleRecord, base_raw01: np.ndarray) -> np.ndarray:
    """Reapply a synthetic record's provenance transform to its source pixels."""
    if record.transform is None:
        return base_raw01
    return np.clip(_apply_descriptor(base_raw01, record.transform), 0.0, 1.0)


# ---------------------------------------------------------------------------
# online augmentation

def apply_augmentation(
    image: NormalizedImage, cfg: AugmentConfig, rng: np.random.Generator
) -> NormalizedImage:
    """Stochastic training-time pipeline on a raw01 image; output stays in [0,1]."""
    if image.stage != "raw01":
        raise ValueError(
            f"augmentation runs before ImageNet standardization; got stage {image.stage!r}"
        )
    px = image.pixels
    if rng.random() < cfg.flip_prob:
        px = px[:, ::-1]
    if rng.random() < cfg.flip_prob:
        px = px[::-1, :]
    if rng.random() < cfg.rotation_prob:
        angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        px = rotate_bilinear(np.ascontiguousarray(px, dtype=np.float32), angle)
    if rng.random() < cfg.brightness_contrast_prob:
        b = 1.0 + float(rng.uniform(-cfg.brightness_contrast, cfg.brightness_contrast))
        c = 1.0 + float(rng.uniform(-cfg.brightness_contrast, cfg.brightness_contrast))
        mean = px.mean()
        px = (px - mean) * c + mean
        px = px * b
    if rng.random() < cfg.hsv_prob:
        h_max, s_max, v_max = cfg.hsv_shift
        px = shift_hsv(
            np.ascontiguousarray(np.clip(px, 0.0, 1.0), dtype=np.float32),
            float(rng.uniform(-h_max, h_max)),
            float(rng.uniform(-s_max, s_max)),
            float(rng.uniform(-v_max, v_max)),
        )
    if rng.random() < cfg.noise_prob:
        px = px + rng.normal(0.0, cfg.noise_std, size=px.shape)
    if rng.random() < cfg.blur_prob:
        sigma = float(rng.uniform(0.1, cfg.blur_sigma_max))
        px = ndimage.gaussian_filter(px, sigma=(sigma, sigma, 0.0))
    if rng.random() < cfg.coarse_dropout_prob:
        px = _coarse_dropout(np.array(px, dtype=np.float32), cfg, rng)
    return NormalizedImage(
        pixels=np.clip(px, 0.0, 1.0).astype(np.float32), stage="raw01"
    )


def _coarse_dropout(px: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    max_holes, max_frac = cfg.coarse_dropout
    h, w = px.shape[:2]
    fill = px.mean(axis=(0, 1))
    n_holes = int(rng.integers(1, max_holes + 1))
    for _ in range(n_holes):
        hh = max(1, int(rng.integers(1, max(2, int(h * max_frac) + 1))))
        ww = max(1, int(rng.integers(1, max(2, int(w * max_frac) + 1))))
        y = int(rng.integers(0, h - hh + 1))
        x = int(rng.integers(0, w - ww + 1))
        px[y : y + hh, x : x + ww] = fill
    return px


# ---------------------------------------------------------------------------
# mixup

def mixup_batch(
    images: np.ndarray,
    onehot: np.ndarray,
    cfg: MixUpConfig,
    rng: np.random.Generator,
    lam_override: float | None = None,
) -> MixedBatch:
    """Convexly combine each sample with a random partner, lambda ~ Beta(alpha, alpha).

    `lam_override` pins lambda for every element (test hook for the endpoints
    lambda=1 -> identity and lambda=0 -> permuted batch).
    """
    images = np.asarray(images)
    onehot = np.asarray(onehot, dtype=np.float64)
    b = images.shape[0]
    if b < 2:
        raise ValueError(f"mixup needs a batch of at least 2, got {b}")
    if onehot.shape != (b, NUM_CLASSES):
        raise ValueError(f"label matrix must be {b}x{NUM_CLASSES}, got {onehot.shape}")
    if lam_override is not None:
        lam = np.full(b, float(lam_override))
    else:
        lam = rng.beta(cfg.alpha, cfg.alpha, size=b)
    perm = rng.permutation(b)
    lam_img = lam.reshape((b,) + (1,) * (images.ndim - 1))
    mixed_images = lam_img * images + (1.0 - lam_img) * images[perm]
    mixed_labels = lam[:, None] * onehot + (1.0 - lam[:, None]) * onehot[perm]
    return MixedBatch(
        images=mixed_images.astype(images.dtype),
        soft_labels=mixed_labels,
        lambdas=lam,
        permutation=perm,
    )
