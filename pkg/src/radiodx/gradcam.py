"""Grad-CAM heatmaps over a convolutional layer and colormap overlays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import Raster, resize_bilinear, to_uint8
from .network import Conv2D, Model

# Anchors: low importance purple, mid green, high yellow (viridis end/mid points).
PURPLE = (68, 1, 84)
GREEN = (33, 145, 140)
YELLOW = (253, 231, 37)


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] float64 in [0, 1]
    all_zero: bool


@dataclass(frozen=True)
class OverlayParams:
    alpha: float = 0.4
    anchors: tuple = (PURPLE, GREEN, YELLOW)

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


def resolve_target(model: Model, selector: str | None = None) -> int:
    """Index of the target layer; defaults to the last backbone convolution."""
    if selector is None:
        convs = [i for i, layer in enumerate(model.layers) if isinstance(layer, Conv2D)]
        backbone = [i for i in convs if model.layers[i].name.startswith("backbone.")]
        if not convs:
            raise ValueError("model has no convolutional layer")
        return (backbone or convs)[-1]
    matches = model.select(selector)
    if len(matches) != 1:
        raise ValueError(f"layer selector {selector!r} must match exactly one layer, matched {len(matches)}")
    if not isinstance(matches[0], Conv2D):
        raise ValueError(f"layer {matches[0].name!r} is not convolutional")
    return model.layer_index(matches[0].name)


def compute_gradcam(model: Model, image: np.ndarray, target_layer: str | None = None) -> Heatmap:
    """Heatmap for one ``[C, H, W]`` input, from gradients of the pre-sigmoid logit."""
    t = resolve_target(model, target_layer)
    trace = model.forward_trace(image, keep_outputs=True)
    acts = trace.outputs[t].astype(np.float64)[0]            # K, h, w
    grad = model.backward(trace, np.ones(1, np.float32), wrt="logit", stop_at=t + 1, accumulate=False)
    grad = np.asarray(grad, dtype=np.float64)[0]
    weights = grad.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, acts, axes=1), 0)
    h, w = model.input_shape[1:]
    if not raw.max() > 0:
        return Heatmap(np.zeros((h, w)), True)
    up = resize_bilinear(raw[None], w, h)[0]
    return Heatmap(up / up.max(), False)


def colormap(values: np.ndarray, anchors=(PURPLE, GREEN, YELLOW)) -> np.ndarray:
    """Piecewise-linear three-anchor map of ``[0, 1]`` values to float RGB in ``[0, 255]``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)[..., None]
    lo, mid, hi = (np.asarray(a, dtype=np.float64) for a in anchors)
    first = lo + (mid - lo) * (v / 0.5)
    second = mid + (hi - mid) * ((v - 0.5) / 0.5)
    return np.where(v <= 0.5, first, second)


def colorize_overlay(heatmap: Heatmap | np.ndarray, base: Raster, params: OverlayParams | None = None) -> Raster:
    """Blend ``(1 - alpha) * base + alpha * colormap(heatmap)``, rounded half-to-even."""
    params = params or OverlayParams()
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if values.shape != (base.height, base.width):
        values = resize_bilinear(values[None], base.width, base.height)[0]
    rgb = base.samples.astype(np.float64)
    if base.channels == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    out = (1 - params.alpha) * rgb + params.alpha * colormap(values, params.anchors)
    return Raster.from_array(to_uint8(out))


def heatmap_raster(heatmap: Heatmap) -> Raster:
    return Raster.from_array(to_uint8(heatmap.values * 255))
