"""Grad-CAM heatmaps and their rendering.

The detector collapses the five frames into one map in its first layer, so a
clip gets a single heatmap which is then overlaid on every frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import bilinear_resize
from .errors import ArgumentError, ValidationError
from .model import ModelGraph

DEFAULT_LAYER = "conv1"


@dataclass
class Heatmap:
    values: np.ndarray  # [Hc, Wc] in [0, 1], at the source layer's resolution
    layer: str
    target_class: int
    upsampled: np.ndarray  # [H, W] at frame resolution


def gradcam_map(activations: np.ndarray, gradients: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Combine ``[H, W, K]`` activations with their score gradients into a 2-D map."""
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ArgumentError(f"activations {activations.shape} and gradients {gradients.shape} must be [H,W,K]")
    weights = gradients.mean(axis=(0, 1))
    cam = np.maximum(activations @ weights, 0.0)
    if not normalize:
        return cam
    lo, hi = cam.min(), cam.max()
    if hi <= lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def spatial_layer_names(model: ModelGraph) -> list[str]:
    return [layer.name for layer, shape in zip(model.layers, model.shapes) if layer.spatial and len(shape) == 3]


def gradcam(model: ModelGraph, clip: np.ndarray, target_class: int, layer_name: str = DEFAULT_LAYER) -> Heatmap:
    """Grad-CAM of the target class's pre-softmax score at ``layer_name``."""
    names = [layer.name for layer in model.layers]
    if layer_name not in names:
        raise ArgumentError(f"unknown layer {layer_name!r}; spatial layers: {', '.join(spatial_layer_names(model))}")
    if layer_name not in spatial_layer_names(model):
        raise ArgumentError(f"layer {layer_name!r} has no spatial output; choose from "
                            f"{', '.join(spatial_layer_names(model))}")
    if not 0 <= target_class < model.head.dout:
        raise ArgumentError(f"target class {target_class} out of range")
    x = clip[None]
    model._check_batch(x)
    acts = None
    for layer in model.layers[:-1]:
        x = layer.forward(x)
        if layer.name == layer_name:
            acts = x[0]
    model.head.pre_activation(x)
    model.head._cache = (x, None)
    seed = np.zeros((1, model.head.dout), dtype=x.dtype)
    seed[0, target_class] = 1.0
    grads = model.backward_from_logits(seed, stop_at=layer_name)[0]
    model.zero_grad()
    values = gradcam_map(acts.astype(np.float64), grads.astype(np.float64))
    up = np.clip(bilinear_resize(values, clip.shape[1:3]), 0.0, 1.0)
    return Heatmap(values, layer_name, target_class, up)


def jet(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear ramp: 0 blue, 0.5 green, 1 red. Returns ``[..., 3]`` in [0, 1]."""
    t = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(2 * t - 1, 0, 1)
    g = np.where(t < 0.5, 2 * t, 2 - 2 * t)
    b = np.clip(1 - 2 * t, 0, 1)
    return np.stack([r, g, b], axis=-1)


def render_overlay(heatmap, frame: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Alpha-blend the colour-ramped heatmap over an RGB frame in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    values = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if values.shape != frame.shape[:2]:
        raise ArgumentError(f"heatmap {values.shape} does not match frame {frame.shape[:2]}")
    return ((1.0 - alpha) * frame + alpha * jet(values)).astype(frame.dtype)


def write_image(rgb: np.ndarray, path) -> None:
    """Write RGB values in [0, 1] as an 8-bit PPM, rounding half up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected [H, W, 3], got {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValidationError("pixel values must lie in [0, 1]")
    data = np.floor(rgb * 255.0 + 0.5).astype(np.uint8)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def clip_overlay_strip(heatmap: Heatmap, clip: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Overlay the clip heatmap on each frame and tile the frames left to right."""
    return np.concatenate([render_overlay(heatmap, frame.astype(np.float64), alpha) for frame in clip], axis=1)


def heatmap_filename(clip_id: str, target_class: int) -> str:
    return f"{clip_id}_cls{target_class}_gradcam.ppm"
