"""Grad-CAM heatmaps for a trained model."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import layers as L
from .errors import InvalidLabel
from .imaging import resize_bilinear
from .model import Model, backward_logits, forward_logits, resolve_layer


def grad_cam(m: Model, x: np.ndarray, class_index: int, target_layer: Optional[str] = None) -> np.ndarray:
    """Class activation heatmap for one image, shape (H, W), values in [0, 1].

    Channel weights are the spatial means of d(class logit)/d(activation) at
    ``target_layer`` (default: the last encoder sepconv). The weighted sum of
    activation maps is rectified, bilinearly upsampled to the input size and
    min-max normalized. A map with no positive evidence comes back all zeros.
    """
    name = resolve_layer(m, target_layer)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"grad_cam takes a single image, got batch of {x.shape[0]}")
    k = m.config.num_classes
    if not 0 <= class_index < k:
        raise InvalidLabel(f"class index {class_index} outside [0, {k})")
    logits, cache = forward_logits(m, x, L.INFER)
    dlogits = np.zeros_like(logits)
    dlogits[0, class_index] = 1
    _, _, act_grads = backward_logits(m, cache, dlogits)
    acts = (cache.dec.activations if name.startswith("dec") else cache.enc.activations)[name][0]
    grads = act_grads[name][0]
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=1), 0).astype(np.float64)
    h, w = m.config.input_size[:2]
    cam = resize_bilinear(cam, h, w)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return (cam - lo) / (hi - lo)


def heatmap_argmax(heatmap: np.ndarray) -> tuple:
    return np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red-to-yellow heat colouring over a (3, H, W) image."""
    heat = np.stack([np.ones_like(heatmap), heatmap, np.zeros_like(heatmap)]) * heatmap[None]
    return np.clip((1 - alpha) * image + alpha * heat, 0, 1)
