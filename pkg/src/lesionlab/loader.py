"""Seed-deterministic batch production: decode, balance-replay, augment, standardize.

Batch order and every augmentation draw are functions of (seed, stage, epoch)
only, which is what makes two runs of the same config byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .augment import AugmentConfig, apply_augmentation, regenerate_pixels
from .dataset import (
    DatasetManifest,
    NormalizedImage,
    SampleRecord,
    decode_image,
    standardize,
    to_raw01,
)


@dataclass
class BatchLoader:
    manifest: DatasetManifest
    image_size: tuple[int, int]
    batch_size: int
    augment_cfg: AugmentConfig
    seed: int
    cache_images: bool = True
    augment_train: bool = True

    def __post_init__(self):
        self._cache: dict[str, np.ndarray] = {}
        self._eval_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._train_records = [r for r in self.manifest.records if r.split == "train"]

    # -- pixel plumbing ------------------------------------------------------

    def _base_raw01(self, path: Path) -> np.ndarray:
        key = str(path)
        if key in self._cache:
            return self._cache[key]
        pixels = to_raw01(decode_image(path), self.image_size).pixels
        if self.cache_images:
            self._cache[key] = pixels
        return pixels

    def record_raw01(self, record: SampleRecord) -> np.ndarray:
        """raw01 pixels for a record, replaying balancing provenance if present."""
        base = self._base_raw01(record.path)
        if record.transform is not None:
            return regenerate_pixels(record, base)
        return base

    # -- training batches ----------------------------------------------------

    def iter_epoch(
        self, stage_id: int, epoch: int
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (standardized B x H x W x 3, integer labels B) for one epoch."""
        rng = np.random.default_rng([self.seed, stage_id, epoch])
        order = rng.permutation(len(self._train_records))
        for start in range(0, len(order), self.batch_size):
            idxs = order[start : start + self.batch_size]
            images, labels = [], []
            for i in idxs:
                rec = self._train_records[int(i)]
                raw = NormalizedImage(self.record_raw01(rec), "raw01")
                if self.augment_train:
                    raw = apply_augmentation(raw, self.augment_cfg, rng)
                images.append(standardize(raw).pixels)
                labels.append(rec.label.index)
            yield np.stack(images), np.array(labels, dtype=np.int64)

    def batches_per_epoch(self) -> int:
        n = len(self._train_records)
        return (n + self.batch_size - 1) // self.batch_size

    # -- evaluation arrays ---------------------------------------------------

    def eval_split(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Un-augmented standardized pixels and labels for val/test, cached."""
        if split in self._eval_cache:
            return self._eval_cache[split]
        records = [r for r in self.manifest.records if r.split == split]
        if not records:
            raise ValueError(f"split {split!r} has no records")
        images = np.stack(
            [standardize(NormalizedImage(self.record_raw01(r), "raw01")).pixels for r in records]
        )
        labels = np.array([r.label.index for r in records], dtype=np.int64)
        self._eval_cache[split] = (images, labels)
        return images, labels

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.manifest.records if r.split == split]
