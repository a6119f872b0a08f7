"""Manifest ingestion, stratified splitting, class weights, and image preprocessing.

The split uses round-half-even on the train and val fractions (remainder to
test), computed in exact rational arithmetic so results do not depend on
floating-point rounding of e.g. 0.70 * 6705.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .classes import CLASS_CODES, LesionClass
from .errors import DataError

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    path: Path
    label: LesionClass
    split: str = "unassigned"
    source_image_id: str | None = None   # set for synthesized balancing copies
    transform: dict | None = None        # provenance for regenerating the copy
    metadata: dict = field(default_factory=dict, compare=False)


@dataclass
class DatasetManifest:
    records: list[SampleRecord]

    @property
    def class_counts(self) -> dict[LesionClass, int]:
        counts = {c: 0 for c in LesionClass}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def split_counts(self, split: str) -> dict[LesionClass, int]:
        counts = {c: 0 for c in LesionClass}
        for r in self.records:
            if r.split == split:
                counts[r.label] += 1
        return counts

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split])

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 42

    def __post_init__(self):
        if not all(0.0 < r < 1.0 for r in self.ratios):
            raise ValueError(f"split ratios must each lie in (0,1), got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")


@dataclass(frozen=True)
class ClassWeights:
    weights: dict[LesionClass, float]

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.weights.get(c, 1.0) for c in LesionClass], dtype=np.float64
        )


@dataclass
class NormalizedImage:
    pixels: np.ndarray         # H x W x 3 float32
    stage: str                 # "raw01" or "imagenet"


# ---------------------------------------------------------------------------
# manifest loading / persistence

def load_manifest(csv_path: Path | str, image_dir: Path | str) -> DatasetManifest:
    """Read a metadata CSV (columns image_id, dx, extras preserved) into a manifest."""
    csv_path = Path(csv_path)
    image_dir = Path(image_dir)
    if not csv_path.is_file():
        raise DataError(f"metadata CSV not found: {csv_path}")

    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "dx"} <= set(reader.fieldnames):
            raise DataError(
                f"{csv_path}: expected at least columns 'image_id' and 'dx', "
                f"got {reader.fieldnames}"
            )
        extra_cols = [c for c in reader.fieldnames if c not in ("image_id", "dx")]
        for lineno, row in enumerate(reader, start=2):
            image_id = row["image_id"].strip()
            dx = row["dx"].strip()
            if dx not in CLASS_CODES:
                raise DataError(
                    f"{csv_path}:{lineno}: unknown dx code {dx!r} for image "
                    f"{image_id!r}; expected one of {CLASS_CODES}"
                )
            if image_id in seen:
                raise DataError(f"{csv_path}:{lineno}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            records.append(
                SampleRecord(
                    image_id=image_id,
                    path=_resolve_image_path(image_dir, image_id),
                    label=LesionClass(dx),
                    metadata={c: row[c] for c in extra_cols},
                )
            )
    return DatasetManifest(records)


def _resolve_image_path(image_dir: Path, image_id: str) -> Path:
    for ext in ("jpg", "jpeg", "png"):
        p = image_dir / f"{image_id}.{ext}"
        if p.is_file():
            return p
    # default name; existence only matters once pixels are needed
    return image_dir / f"{image_id}.jpg"


def save_split_csv(manifest: DatasetManifest, path: Path | str) -> None:
    """Persist (image_id, label, split); provenance columns appear only for
    manifests that contain synthesized balancing copies."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_provenance = any(r.source_image_id or r.transform for r in manifest.records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["image_id", "label", "split"]
        if with_provenance:
            header += ["source_image_id", "transform_json"]
        writer.writerow(header)
        for r in manifest.records:
            row = [r.image_id, r.label.code, r.split]
            if with_provenance:
                row += [
                    r.source_image_id or "",
                    json.dumps(r.transform, sort_keys=True) if r.transform else "",
                ]
            writer.writerow(row)


def load_split_csv(path: Path | str, image_dir: Path | str) -> DatasetManifest:
    path = Path(path)
    image_dir = Path(image_dir)
    if not path.is_file():
        raise DataError(f"split CSV not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            src = row.get("source_image_id") or None
            transform = json.loads(row["transform_json"]) if row.get("transform_json") else None
            base_id = src or row["image_id"]
            records.append(
                SampleRecord(
                    image_id=row["image_id"],
                    path=_resolve_image_path(image_dir, base_id),
                    label=LesionClass(row["label"]),
                    split=row["split"],
                    source_image_id=src,
                    transform=transform,
                )
            )
    return DatasetManifest(records)


# ---------------------------------------------------------------------------
# stratified split

def _round_half_even(x: Fraction) -> int:
    floor = x.numerator // x.denominator
    rem = x - floor
    if rem > Fraction(1, 2):
        return floor + 1
    if rem < Fraction(1, 2):
        return floor
    return floor if floor % 2 == 0 else floor + 1


def _exact_fraction(ratio: float) -> Fraction:
    # str() keeps 0.7 as 7/10 instead of its binary float neighbour
    return Fraction(str(ratio))


def stratified_split(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Assign every record to train/val/test, stratified per class.

    Per class of size n: train gets round-half-even(r_train * n), val gets
    round-half-even(r_val * n), test the remainder. Shuffling within a class
    is driven only by (seed, class code), so reruns are byte-identical.
    """
    if any(r.split != "unassigned" for r in manifest.records):
        raise ValueError("manifest already carries split assignments")

    by_class: dict[LesionClass, list[int]] = {c: [] for c in LesionClass}
    for i, r in enumerate(manifest.records):
        by_class[r.label].append(i)

    r_train, r_val = _exact_fraction(spec.ratios[0]), _exact_fraction(spec.ratios[1])
    assignment: dict[int, str] = {}
    for cls in LesionClass:
        idxs = by_class[cls]
        n = len(idxs)
        if n == 0:
            continue
        if n < 3:
            raise DataError(
                f"class {cls.code!r} has only {n} sample(s); need at least 3 "
                f"to populate train/val/test"
            )
        n_train = _round_half_even(r_train * n)
        n_val = _round_half_even(r_val * n)
        n_test = n - n_train - n_val
        if n_val < 1 or n_test < 1:
            # tiny classes: rounding can starve val or test; rebalance from train
            n_val = max(n_val, 1)
            n_test = max(n_test, 1)
            n_train = n - n_val - n_test
        shuffled = list(idxs)
        random.Random(f"{spec.seed}:{cls.code}").shuffle(shuffled)
        for j, idx in enumerate(shuffled):
            if j < n_train:
                assignment[idx] = "train"
            elif j < n_train + n_val:
                assignment[idx] = "val"
            else:
                assignment[idx] = "test"

    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    return DatasetManifest(records)


# ---------------------------------------------------------------------------
# class weights

def compute_class_weights(manifest: DatasetManifest, split: str = "train") -> ClassWeights:
    """Inverse-frequency weights w_c = N / (K * n_c) over the classes present.

    Balanced data yields all-ones; sum_c n_c * w_c == N exactly.
    """
    present = {c for c, n in manifest.class_counts.items() if n > 0}
    counts = manifest.split_counts(split)
    missing = [c.code for c in sorted(present, key=lambda c: c.index) if counts[c] == 0]
    if missing:
        raise DataError(
            f"classes {missing} have no samples in split {split!r}; "
            f"cannot compute inverse-frequency weights"
        )
    n_total = sum(counts[c] for c in present)
    k = len(present)
    weights = {c: n_total / (k * counts[c]) for c in present}
    return ClassWeights(weights)


# ---------------------------------------------------------------------------
# image decoding and preprocessing

def decode_image(path: Path | str) -> np.ndarray:
    """Decode a JPEG/PNG into uint8 RGB, stripping alpha with a warning."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA", "PA"):
            log.warning("stripping alpha channel from %s", path)
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8)


def resize_lanczos(pixels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Lanczos-resample an HxWxC float array to (H, W) = target.

    Uses Pillow's float-precision resampler per channel; same-size inputs
    pass through untouched.
    """
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.shape[:2] == (th, tw):
        return pixels.copy()
    channels = []
    for c in range(pixels.shape[2]):
        im = Image.fromarray(pixels[:, :, c], mode="F")
        channels.append(np.asarray(im.resize((tw, th), Image.LANCZOS), dtype=np.float32))
    return np.stack(channels, axis=2)


def to_raw01(raw: np.ndarray, target: tuple[int, int]) -> NormalizedImage:
    """Resize uint8 RGB with Lanczos, scale into [0,1], clip resampling overshoot."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB input, got shape {raw.shape}")
    if raw.size == 0:
        raise ValueError("input image has no pixels")
    resized = resize_lanczos(raw.astype(np.float32), target)
    pixels = np.clip(resized / 255.0, 0.0, 1.0).astype(np.float32)
    return NormalizedImage(pixels=pixels, stage="raw01")


def standardize(image: NormalizedImage) -> NormalizedImage:
    """Apply ImageNet channel statistics to a raw01 image; refuses double application."""
    if image.stage != "raw01":
        raise ValueError(
            f"standardize expects a raw01 image, got stage {image.stage!r}; "
            f"re-normalizing is not allowed"
        )
    pixels = (image.pixels - IMAGENET_MEAN) / IMAGENET_STD
    return NormalizedImage(pixels=pixels.astype(np.float32), stage="imagenet")


def preprocess_image(raw: np.ndarray, target: tuple[int, int] = (384, 384)) -> NormalizedImage:
    """Full preprocessing: Lanczos resize, [0,1] scaling, ImageNet standardization."""
    return standardize(to_raw01(raw, target))
