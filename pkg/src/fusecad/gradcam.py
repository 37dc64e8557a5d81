"""Grad-CAM heatmaps and colour overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .layers import Tap
from .tensor import Tensor
from .train import no_grad


def bilinear_resize(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping (align_corners=False)."""
    ih, iw = a.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(ih, h)
    c0, c1, fc = axis(iw, w)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _as_chw(x) -> np.ndarray:
    if hasattr(x, "data") and not isinstance(x, np.ndarray):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise T.ShapeError(f"gradcam expects one (c, h, w) or (h, w, 3) input, got {x.shape}")
    if x.shape[-1] == 3 and x.shape[0] != 3:
        x = x.transpose(2, 0, 1)
    return x


def default_layer(model) -> str:
    student = getattr(model, "student", None)
    if student is not None:
        return "student." + student.default_cam_layer()
    return model.default_cam_layer()


def gradcam(model, x, target_class: int | None = None, layer: str | None = None) -> np.ndarray:
    """Heatmap in [0, 1] at the input's spatial size.

    Channel weights are the spatial mean of d(target logit)/d(activation);
    the map is ReLU of the weighted channel sum, bilinearly upsampled and
    divided by its maximum (an all-zero map stays zero).
    """
    x = _as_chw(x)
    layer = layer or default_layer(model)
    tap = Tap(layer)
    with no_grad(model):
        logits = model.forward(Tensor(x[None]), tap=tap)
    if tap.tensor is None:
        raise ValueError(f"layer {layer!r} not found in model")
    act = tap.tensor
    if act.data.ndim != 4:
        raise ValueError(f"layer {layer!r} is not spatial (output shape {act.shape})")
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if logits.requires_grad:
        seed = np.zeros(logits.shape)
        seed[0, target_class] = 1.0
        T.backward(logits, seed)
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    a, g = act.data[0], grad[0]
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    cam = bilinear_resize(cam, x.shape[1], x.shape[2])
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def box_mass(heat: np.ndarray, box: tuple[int, int, int, int]) -> tuple[float, float]:
    """(share of heatmap mass inside the box, box area fraction)."""
    r0, c0, r1, c1 = box
    total = heat.sum()
    inside = heat[r0:r1, c0:c1].sum()
    area = (r1 - r0) * (c1 - c0) / heat.size
    return (float(inside / total) if total > 0 else 0.0), float(area)


def colormap(v: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) through green, as float RGB in [0, 255]."""
    v = np.clip(v, 0, 1)
    r = np.clip(2 * v - 1, 0, 1)
    g = 1 - np.abs(2 * v - 1)
    b = np.clip(1 - 2 * v, 0, 1)
    return np.stack([r, g, b], axis=-1) * 255.0


def overlay(img: np.ndarray, heat: np.ndarray, alpha: float = 0.5, path: str | Path | None = None) -> np.ndarray:
    """Blend a heatmap over a grayscale image; writes a binary PPM when ``path`` is given."""
    img = np.asarray(img)
    if img.shape != heat.shape:
        raise ValueError(f"overlay: dimension mismatch image {img.shape} vs heatmap {heat.shape}")
    gray = np.repeat(img.astype(np.float64)[..., None], 3, axis=-1)
    out = np.round((1 - alpha) * gray + alpha * colormap(heat)).astype(np.uint8)
    if path is not None:
        Image.fromarray(out, mode="RGB").save(path, format="PPM")
    return out
