"""Synthetic 7-class blob dataset for desk-scale end-to-end runs.

Each class is a distinct saturated colour whose blob always sits in a fixed
home quadrant (class index mod 4), so a trained model should both classify
near-perfectly and localize its Grad-CAM evidence inside that quadrant.
Neutral grey distractor blobs appear anywhere in every image, which forces
the classifier to learn positive colour evidence instead of treating one
class as "nothing else matched".
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .classes import CLASS_CODES

# one saturated colour per class, far apart in RGB
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],  # akiec: red
        [0.10, 0.90, 0.10],  # bcc: green
        [0.15, 0.25, 0.95],  # bkl: blue
        [0.95, 0.90, 0.10],  # df: yellow
        [0.90, 0.15, 0.90],  # mel: magenta
        [0.10, 0.90, 0.90],  # nv: cyan
        [0.95, 0.55, 0.10],  # vasc: orange
    ]
)

DISTRACTOR_COLOR = np.array([0.75, 0.75, 0.75])

# severe 10:1 imbalance over 700 images, nv as the big class
DESK_COUNTS: dict[str, int] = {
    "akiec": 30,
    "bcc": 40,
    "bkl": 50,
    "df": 60,
    "mel": 80,
    "nv": 300,
    "vasc": 140,
}


def class_quadrant(class_index: int) -> int:
    """Home quadrant of a class: 0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right."""
    return class_index % 4


def quadrant_of_position(y: int, x: int, size: int) -> int:
    half = size // 2
    return (0 if y < half else 2) + (0 if x < half else 1)


def make_blob_image(
    class_index: int,
    rng: np.random.Generator,
    size: int = 64,
    radius_range: tuple[int, int] | None = None,
    background_noise: float = 0.02,
) -> np.ndarray:
    """One float [0,1] HxWx3 image: grey distractors plus the class blob in its quadrant."""
    if radius_range is None:
        radius_range = (max(3, size // 8), max(4, size // 5 + 1))
    img = np.full((size, size, 3), 0.45) + rng.normal(0.0, background_noise, (size, size, 3))

    def put_blob(cy: int, cx: int, r: int, color: np.ndarray) -> None:
        yy, xx = np.ogrid[:size, :size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        img[mask] = color + rng.normal(0.0, 0.02, 3)

    rmin, rmax = radius_range
    for _ in range(int(rng.integers(1, 3))):
        rd = int(rng.integers(max(2, rmin // 2), rmin))
        put_blob(
            int(rng.integers(rd, size - rd)),
            int(rng.integers(rd, size - rd)),
            rd,
            DISTRACTOR_COLOR,
        )

    q = class_quadrant(class_index)
    half = size // 2
    y0 = 0 if q in (0, 1) else half
    x0 = 0 if q in (0, 2) else half
    r = int(rng.integers(rmin, rmax + 1))
    margin = r + 1
    cy = y0 + int(rng.integers(margin, half - margin + 1))
    cx = x0 + int(rng.integers(margin, half - margin + 1))
    put_blob(cy, cx, r, PALETTE[class_index])
    return np.clip(img, 0.0, 1.0)


def generate_blob_dataset(
    out_dir: Path | str,
    counts: dict[str, int] | None = None,
    size: int = 64,
    seed: int = 42,
) -> tuple[Path, Path]:
    """Write PNGs plus a metadata CSV; returns (csv_path, image_dir)."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    counts = counts or DESK_COUNTS
    rng = np.random.default_rng(seed)
    csv_path = out_dir / "metadata.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "dx"])
        for class_index, code in enumerate(CLASS_CODES):
            for i in range(counts.get(code, 0)):
                image_id = f"blob_{code}_{i:04d}"
                pixels = make_blob_image(class_index, rng, size=size)
                Image.fromarray((pixels * 255).round().astype(np.uint8)).save(
                    image_dir / f"{image_id}.png"
                )
                writer.writerow([image_id, code])
    return csv_path, image_dir
