"""Grad-CAM heatmaps, vanilla-gradient saliency maps, and overlay rendering.

Grad-CAM targets the pre-softmax logit of the requested class: channel
weights are the spatially averaged gradients of that logit with respect to
a named feature map, the map is the ReLU of the weighted channel sum,
bilinearly upsampled to input resolution and max-normalized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .classes import NUM_CLASSES
from .dataset import NormalizedImage
from .model import ModelHandle, numpy_batch_to_tensor

DEFAULT_LAYER = "attention"


@dataclass
class Heatmap:
    grid: np.ndarray          # H x W floats in [0,1] once normalized
    kind: str                 # "gradcam" or "saliency"
    class_index: int
    normalized: bool = True


def cam_from_activations(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Raw class-activation map: ReLU of the gradient-weighted channel sum.

    activations, gradients: C x h x w arrays for one sample. The channel
    weights are the mean gradient over the h*w spatial positions.
    """
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ValueError(
            f"need matching Cxhxw activation/gradient tensors, got "
            f"{activations.shape} vs {gradients.shape}"
        )
    alpha = gradients.mean(axis=(1, 2))
    raw = np.tensordot(alpha, activations, axes=(0, 0))
    return np.maximum(raw, 0.0)


def _normalize(grid: np.ndarray) -> np.ndarray:
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return grid.astype(np.float64)


def _upsample_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.asarray(grid, dtype=np.float32))[None, None]
    up = torch.nn.functional.interpolate(
        t, size=size, mode="bilinear", align_corners=False
    )
    return up[0, 0].numpy().astype(np.float64)


def grad_cam(
    handle: ModelHandle,
    image: NormalizedImage,
    class_index: int,
    layer: str = DEFAULT_LAYER,
) -> Heatmap:
    """Grad-CAM heatmap for one image at input resolution, max-normalized to [0,1]."""
    if image.stage != "imagenet":
        raise ValueError("grad_cam expects a standardized (imagenet-stage) image")
    if not 0 <= class_index < NUM_CLASSES:
        raise ValueError(f"class index {class_index} outside [0,{NUM_CLASSES})")
    handle.module.eval()
    x = numpy_batch_to_tensor(image.pixels[None])
    x = x.to(next(handle.module.parameters()).dtype)
    maps = handle.module.features(x)
    if layer not in maps:
        raise ValueError(f"unknown layer {layer!r}; available: {sorted(maps)}")
    target = maps[layer]
    if target.ndim != 4 or target.shape[2] < 1 or target.shape[3] < 1:
        raise ValueError(f"layer {layer!r} has no spatial extent: {tuple(target.shape)}")
    target.retain_grad()
    # every captured map feeds the same graph, so one backward reaches any layer
    logits = handle.module.head_logits(maps["attention"])
    handle.module.zero_grad(set_to_none=True)
    logits[0, class_index].backward()
    grads = target.grad[0].detach().numpy()
    acts = target[0].detach().numpy()
    raw = cam_from_activations(acts, grads)
    h, w = image.pixels.shape[:2]
    grid = _normalize(_upsample_bilinear(raw, (h, w)))
    return Heatmap(grid=grid, kind="gradcam", class_index=class_index)


def saliency_map(
    handle: ModelHandle,
    image: NormalizedImage,
    class_index: int,
    normalize: bool = True,
) -> Heatmap:
    """Channel-max of |d logit_c / d pixel|, max-normalized to [0,1] by default.

    `normalize=False` keeps raw gradient magnitudes (used by the
    finite-difference oracle tests).
    """
    if image.stage != "imagenet":
        raise ValueError("saliency_map expects a standardized (imagenet-stage) image")
    if not 0 <= class_index < NUM_CLASSES:
        raise ValueError(f"class index {class_index} outside [0,{NUM_CLASSES})")
    handle.module.eval()
    x = numpy_batch_to_tensor(image.pixels[None])
    x = x.to(next(handle.module.parameters()).dtype)
    x.requires_grad_(True)
    logits = handle.module(x)
    handle.module.zero_grad(set_to_none=True)
    logits[0, class_index].backward()
    grad = x.grad[0].detach().numpy()          # 3 x H x W
    grid = np.abs(grad).max(axis=0)
    if normalize:
        grid = _normalize(grid)
    return Heatmap(
        grid=grid.astype(np.float64), kind="saliency",
        class_index=class_index, normalized=normalize,
    )


def overlay(
    image: NormalizedImage, heatmap: Heatmap, opacity: float = 0.5
) -> np.ndarray:
    """Alpha-blend the colormapped heatmap over a raw01 image; returns HxWx3 in [0,1]."""
    if image.stage != "raw01":
        raise ValueError("overlay expects the raw01 image, not the standardized one")
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0,1], got {opacity}")
    if heatmap.grid.shape != image.pixels.shape[:2]:
        raise ValueError(
            f"heatmap {heatmap.grid.shape} does not match image "
            f"{image.pixels.shape[:2]}; upsample the heatmap first"
        )
    from matplotlib import colormaps

    colored = colormaps["inferno"](np.clip(heatmap.grid, 0.0, 1.0))[:, :, :3]
    blended = (1.0 - opacity) * image.pixels + opacity * colored
    return np.clip(blended, 0.0, 1.0)


def save_heatmap(
    heatmap: Heatmap,
    image: NormalizedImage,
    out_dir: Path | str,
    image_id: str,
    class_code: str,
    opacity: float = 0.5,
) -> tuple[Path, Path]:
    """Write `<id>_<class>_<kind>.png` overlay and the raw grid as CSV."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{image_id}_{class_code}_{heatmap.kind}"
    png_path = out_dir / f"{stem}.png"
    csv_path = out_dir / f"{stem}.csv"
    blended = overlay(image, heatmap, opacity)
    Image.fromarray((blended * 255).round().astype(np.uint8)).save(png_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in heatmap.grid:
            writer.writerow([f"{v:.8f}" for v in row])
    return png_path, csv_path
