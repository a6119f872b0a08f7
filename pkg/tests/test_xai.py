import types

import numpy as np
import pytest
import torch
import torch.nn as nn

from lesionlab.dataset import NormalizedImage
from lesionlab.model import BackboneSpec, HeadConfig, build_classifier
from lesionlab.xai import (
    Heatmap,
    _upsample_bilinear,
    cam_from_activations,
    grad_cam,
    overlay,
    saliency_map,
    save_heatmap,
)


def _handle(seed=0):
    return build_classifier(
        BackboneSpec(kind="toy_cnn", feature_channels=64, layer_count=4),
        HeadConfig(hidden_sizes=(64, 32)),
        seed=seed,
    )


def _std_image(seed=0, hw=32):
    rng = np.random.default_rng(seed)
    return NormalizedImage(rng.normal(0, 1, (hw, hw, 3)).astype(np.float32), "imagenet")


# ---------------------------------------------------------------------------
# core cam arithmetic

def test_cam_constant_activation_uniform_gradient():
    acts = np.ones((1, 4, 4))
    grads = np.ones((1, 4, 4))
    cam = cam_from_activations(acts, grads)
    assert np.allclose(cam, 1.0)


def test_cam_negative_gradients_relu_to_zero():
    rng = np.random.default_rng(0)
    acts = rng.random((5, 3, 3))          # positive activations
    grads = -rng.random((5, 3, 3)) - 0.1  # strictly negative gradients
    cam = cam_from_activations(acts, grads)
    assert np.all(cam == 0.0)


def _cam_oracle(acts, grads):
    """Nested-loop transcription: alpha_k = mean_ij grad, map = ReLU(sum_k alpha_k A_k)."""
    c, h, w = acts.shape
    z = h * w
    alphas = np.zeros(c)
    for k in range(c):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += grads[k, i, j]
        alphas[k] = total / z
    cam = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for k in range(c):
                s += alphas[k] * acts[k, i, j]
            cam[i, j] = s if s > 0 else 0.0
    return cam


def test_cam_matches_nested_loop_oracle():
    rng = np.random.default_rng(42)
    for _ in range(50):
        c = int(rng.integers(1, 6))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        acts = rng.normal(0, 1, (c, h, w))
        grads = rng.normal(0, 1, (c, h, w))
        fast = cam_from_activations(acts, grads)
        oracle = _cam_oracle(acts, grads)
        assert np.abs(fast - oracle).max() < 1e-6
        assert fast.min() >= 0.0


def test_cam_shape_validation():
    with pytest.raises(ValueError):
        cam_from_activations(np.ones((2, 3, 3)), np.ones((2, 3, 4)))
    with pytest.raises(ValueError):
        cam_from_activations(np.ones((3, 3)), np.ones((3, 3)))


# ---------------------------------------------------------------------------
# grad_cam end to end

def test_grad_cam_normalized_output():
    handle = _handle()
    hm = grad_cam(handle, _std_image(), 2)
    assert hm.kind == "gradcam"
    assert hm.grid.shape == (32, 32)
    assert hm.grid.min() >= 0.0
    if hm.grid.max() > 0:
        assert hm.grid.max() == pytest.approx(1.0)


def test_grad_cam_unknown_layer():
    handle = _handle()
    with pytest.raises(ValueError, match="unknown layer"):
        grad_cam(handle, _std_image(), 0, layer="nowhere")


def test_grad_cam_named_backbone_layer():
    handle = _handle()
    hm = grad_cam(handle, _std_image(), 1, layer="backbone.block2")
    assert hm.grid.shape == (32, 32)
    assert hm.grid.min() >= 0.0


def test_grad_cam_requires_standardized_image():
    handle = _handle()
    raw = NormalizedImage(np.zeros((32, 32, 3), np.float32), "raw01")
    with pytest.raises(ValueError, match="imagenet"):
        grad_cam(handle, raw, 0)


def test_grad_cam_deterministic():
    handle = _handle()
    img = _std_image(3)
    a = grad_cam(handle, img, 4).grid
    b = grad_cam(handle, img, 4).grid
    assert np.array_equal(a, b)


def test_upsample_preserves_argmax_cell():
    rng = np.random.default_rng(1)
    for _ in range(10):
        coarse = rng.random((4, 4))
        coarse[rng.integers(4), rng.integers(4)] += 2.0  # unique dominant cell
        cy, cx = np.unravel_index(coarse.argmax(), coarse.shape)
        up = _upsample_bilinear(coarse, (64, 64))
        uy, ux = np.unravel_index(up.argmax(), up.shape)
        assert abs(uy / 16 - cy) <= 1.0
        assert abs(ux / 16 - cx) <= 1.0


# ---------------------------------------------------------------------------
# saliency

class _LinearPixelModel(nn.Module):
    """Logits are plain inner products with per-class pixel weights."""

    def __init__(self, weight):
        super().__init__()
        self.weight = nn.Parameter(weight)  # 7 x 3 x H x W

    def forward(self, x):
        return (x[:, None] * self.weight[None]).sum(dim=(2, 3, 4))


def test_saliency_linear_model_equals_weight_magnitude():
    torch.manual_seed(0)
    weight = torch.randn(7, 3, 8, 8, dtype=torch.float64)
    handle = types.SimpleNamespace(module=_LinearPixelModel(weight))
    img = _std_image(2, hw=8)
    hm = saliency_map(handle, img, 3, normalize=False)
    expected = weight[3].abs().amax(dim=0).numpy()
    assert np.allclose(hm.grid, expected, atol=1e-12)


def test_saliency_matches_finite_differences():
    handle = _handle()
    handle.module.double()
    img = _std_image(5, hw=16)
    class_index = 2
    hm = saliency_map(handle, img, class_index, normalize=False)

    def logit(pixels):
        x = torch.from_numpy(pixels.transpose(2, 0, 1)[None]).double()
        handle.module.eval()
        with torch.no_grad():
            return float(handle.module(x)[0, class_index])

    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(20):
        y, x = int(rng.integers(16)), int(rng.integers(16))
        grads = []
        for ch in range(3):
            up = img.pixels.astype(np.float64).copy()
            up[y, x, ch] += eps
            down = img.pixels.astype(np.float64).copy()
            down[y, x, ch] -= eps
            grads.append(abs(logit(up) - logit(down)) / (2 * eps))
        fd = max(grads)
        rel = abs(fd - hm.grid[y, x]) / max(fd, hm.grid[y, x], 1e-12)
        assert rel < 1e-3


def test_saliency_deterministic():
    handle = _handle()
    img = _std_image(7)
    a = saliency_map(handle, img, 1).grid
    b = saliency_map(handle, img, 1).grid
    assert np.array_equal(a, b)


def test_saliency_normalized_by_default():
    handle = _handle()
    hm = saliency_map(handle, _std_image(4), 0)
    assert hm.grid.max() == pytest.approx(1.0)
    assert hm.grid.min() >= 0.0


# ---------------------------------------------------------------------------
# overlay

def _raw_image(hw=16, value=0.5):
    return NormalizedImage(np.full((hw, hw, 3), value, np.float32), "raw01")


def _flat_heatmap(hw=16, value=0.0):
    return Heatmap(grid=np.full((hw, hw), value), kind="gradcam", class_index=0)


def test_overlay_opacity_zero_is_image():
    img = _raw_image()
    out = overlay(img, _flat_heatmap(value=0.7), opacity=0.0)
    assert np.allclose(out, img.pixels)


def test_overlay_opacity_one_is_colormap():
    from matplotlib import colormaps

    out = overlay(_raw_image(), _flat_heatmap(value=0.25), opacity=1.0)
    expected = colormaps["inferno"](0.25)[:3]
    assert np.allclose(out[0, 0], expected, atol=1e-7)


def test_overlay_zero_map_uniform_blend():
    from matplotlib import colormaps

    out = overlay(_raw_image(value=0.4), _flat_heatmap(value=0.0), opacity=0.5)
    expected = 0.5 * 0.4 + 0.5 * np.array(colormaps["inferno"](0.0)[:3])
    assert np.allclose(out, expected[None, None, :], atol=1e-6)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_overlay_validation():
    with pytest.raises(ValueError, match="match"):
        overlay(_raw_image(16), _flat_heatmap(8), 0.5)
    with pytest.raises(ValueError, match="opacity"):
        overlay(_raw_image(), _flat_heatmap(), 1.5)
    std = NormalizedImage(np.zeros((16, 16, 3), np.float32), "imagenet")
    with pytest.raises(ValueError, match="raw01"):
        overlay(std, _flat_heatmap(), 0.5)


def test_save_heatmap_files(tmp_path):
    rng = np.random.default_rng(0)
    hm = Heatmap(grid=rng.random((16, 16)), kind="saliency", class_index=5)
    png, csv_path = save_heatmap(hm, _raw_image(), tmp_path, "img_x", "nv")
    assert png.name == "img_x_nv_saliency.png"
    assert csv_path.name == "img_x_nv_saliency.csv"
    grid = np.loadtxt(csv_path, delimiter=",")
    assert np.allclose(grid, hm.grid, atol=1e-7)
