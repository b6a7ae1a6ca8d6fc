"""Grad-CAM saliency and overlay rendering.

The saliency of class ``c`` is ``ReLU(sum_k w_k A_k)`` where ``A_k`` are the
final-conv activation maps and ``w_k`` is the spatial mean of
``d score_c / d A_k``.  Scores are pre-softmax logits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbones import Network
from .data import write_image, to_uint8
from .hierarchy import HierarchicalClassifier, Prediction
from .tensor import GradientTape, Tensor, backward

ZERO_MAX = 1e-12
DEFAULT_ALPHA = 0.5
DEFAULT_FLOOR = 0.15


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyMap:
    raw: np.ndarray  # h x w, >= 0, final-conv resolution
    upsampled: np.ndarray  # H x W
    normalized: np.ndarray  # H x W in [0, 1]
    weights: np.ndarray  # per-map importance w_k
    class_index: int

    @property
    def is_zero(self) -> bool:
        return not np.any(self.normalized)


def cam_from_activations(activations: np.ndarray, gradients: np.ndarray, height: int, width: int, class_index: int = 0) -> SaliencyMap:
    """Combine ``K x h x w`` activations with their gradients into a saliency map."""
    A = np.asarray(activations)
    G = np.asarray(gradients)
    if A.ndim != 3 or A.shape != G.shape:
        raise ExplainError(f"activations {list(A.shape)} and gradients {list(G.shape)} must both be K x h x w")
    weights = G.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, A, axes=1), 0)
    up = T.bilinear_upsample(Tensor(raw, dtype=raw.dtype), height, width).data
    up = np.maximum(up, 0)  # guards -0.0 and rounding
    peak = float(up.max()) if up.size else 0.0
    norm = up / peak if peak >= ZERO_MAX else np.zeros_like(up)
    return SaliencyMap(raw, up, norm, weights, class_index)


def grad_cam(net: Network, image: Tensor, class_index: int) -> SaliencyMap:
    """Grad-CAM of ``net``'s logit ``class_index`` for a single ``3 x r x r`` image."""
    if image.data.ndim != 3:
        raise ExplainError(f"grad_cam explains one 3 x r x r image, got shape {list(image.shape)}")
    net.check_input(image)
    if not 0 <= int(class_index) < net.num_outputs:
        raise ExplainError(f"class index {class_index} out of range for a {net.num_outputs}-output head")
    capture: dict[str, Tensor] = {}
    with GradientTape() as tape:
        logits = net.forward(image, training=False, capture=capture)
        score = T.take(logits, int(class_index))
    acts = capture[net.final_conv]
    grads = backward(tape, score).array(acts)
    return cam_from_activations(acts.data, grads, image.shape[-2], image.shape[-1], int(class_index))


def explainer_class(prediction: Prediction) -> int:
    """Class index at the explaining stage: 1 if that stage decided positive."""
    return 1 if prediction.stage2.positive else 0


def explain_prediction(hc: HierarchicalClassifier, image: Tensor, prediction: Prediction) -> SaliencyMap:
    """Grad-CAM on the second-stage model that produced ``prediction``."""
    net = hc.stage(prediction.explainer_role).network
    return grad_cam(net, image, explainer_class(prediction))


# --------------------------------------------------------------------------
# overlays


def colormap(m: np.ndarray) -> np.ndarray:
    """Blue (0) -> green (0.5) -> red (1); returns ``... x 3``."""
    m = np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0)
    r = np.clip(2 * m - 1, 0, 1)
    g = 1 - np.abs(2 * m - 1)
    b = np.clip(1 - 2 * m, 0, 1)
    return np.stack([r, g, b], axis=-1)


@dataclass(frozen=True)
class OverlayImage:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    kind: str  # "heat" | "transparency"

    def to_uint8(self) -> np.ndarray:
        return to_uint8(self.rgb)

    def save(self, path: str | os.PathLike, comment: str | None = None) -> None:
        write_image(path, self.to_uint8(), comment)


def _as_unit_rgb(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ExplainError(f"expected an H x W x 3 image, got {list(img.shape)}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    img = img.astype(np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ExplainError("float images must have values in [0, 1]")
    return img


def _check_dims(img: np.ndarray, smap: SaliencyMap) -> None:
    if img.shape[:2] != smap.normalized.shape:
        raise ExplainError(f"image is {img.shape[0]}x{img.shape[1]} but the map is {smap.normalized.shape[0]}x{smap.normalized.shape[1]}")


def render_heatmap(image, smap: SaliencyMap, alpha: float = DEFAULT_ALPHA) -> OverlayImage:
    """``(1 - alpha) * image + alpha * colormap(normalized)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ExplainError("alpha must lie in [0, 1]")
    img = _as_unit_rgb(image)
    _check_dims(img, smap)
    out = (1.0 - alpha) * img + alpha * colormap(smap.normalized)
    return OverlayImage(np.clip(out, 0.0, 1.0), "heat")


def render_transparency(image, smap: SaliencyMap, floor: float = DEFAULT_FLOOR) -> OverlayImage:
    """``image * (floor + (1 - floor) * normalized)``: relevant regions stay visible."""
    if not 0.0 <= floor < 1.0:
        raise ExplainError("floor must lie in [0, 1)")
    img = _as_unit_rgb(image)
    _check_dims(img, smap)
    vis = floor + (1.0 - floor) * np.clip(smap.normalized, 0.0, 1.0)
    return OverlayImage(np.clip(img * vis[..., None], 0.0, 1.0), "transparency")


def saliency_image(smap: SaliencyMap) -> np.ndarray:
    """The normalized map as a grayscale RGB array in [0, 1]."""
    return np.repeat(smap.normalized[..., None], 3, axis=-1)
