"""Full-reference image metrics and the directional embedding score.

All metrics are pure functions over float images in [0, 1] and are safe to
evaluate concurrently across pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .backend.contracts import PerceptualFeatureProvider, TextImageEmbedder
from .errors import ValidationError
from .validation import as_float_image, check_same_shape

PSNR_CAP_DB = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass
class MetricsReport:
    """Aggregated scores for one dataset or one category."""

    psnr_db: float
    ssim: float
    lpips: float
    clip_direction: float
    counts: int

    def as_dict(self) -> dict:
        return asdict(self)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; identical images cap at 99.0."""
    a = as_float_image(a, "a")
    b = as_float_image(b, "b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, 'valid' region only."""
    size = len(kernel)
    h, w = img.shape
    rows = np.zeros((h, w - size + 1))
    for j in range(size):
        rows += kernel[j] * img[:, j : j + w - size + 1]
    out = np.zeros((h - size + 1, w - size + 1))
    for i in range(size):
        out += kernel[i] * rows[i : i + h - size + 1]
    return out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma conversion with BT.601 weights."""
    return img @ _LUMA


def ssim(a, b) -> float:
    """Mean local structural similarity over an 11x11 Gaussian window."""
    a = as_float_image(a, "a")
    b = as_float_image(b, "b")
    check_same_shape(a, b)
    x = to_grayscale(a)
    y = to_grayscale(b)
    if min(x.shape) < _SSIM_WINDOW:
        raise ValidationError(
            f"image {x.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    var_x = _filter_valid(x * x, kernel) - mu_x**2
    var_y = _filter_valid(y * y, kernel) - mu_y**2
    cov = _filter_valid(x * y, kernel) - mu_x * mu_y
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def lpips(a, b, feature_provider: PerceptualFeatureProvider) -> float:
    """Perceptual distance: per-stage unit-normalized feature MSE, summed.

    Each stage's features are normalized along the channel axis per
    position; the stage score is the spatial mean of the squared channel
    distance, and stages combine with uniform weights.
    """
    a = as_float_image(a, "a")
    b = as_float_image(b, "b")
    check_same_shape(a, b)
    total = 0.0
    stages_a = feature_provider.features(a)
    stages_b = feature_provider.features(b)
    if len(stages_a) != len(stages_b):
        raise ValidationError("feature provider returned mismatched stage counts")
    for fa, fb in zip(stages_a, stages_b):
        if fa.shape != fb.shape:
            raise ValidationError(
                f"feature stage shapes differ: {fa.shape} vs {fb.shape}"
            )
        ua = _unit_channels(fa)
        ub = _unit_channels(fb)
        total += float(((ua - ub) ** 2).sum(axis=-1).mean())
    return total


def _unit_channels(f: np.ndarray) -> np.ndarray:
    norm = np.sqrt((f**2).sum(axis=-1, keepdims=True))
    return f / np.maximum(norm, 1e-10)


def clip_directional(
    inputs: Sequence[np.ndarray],
    outputs: Sequence[np.ndarray],
    ref_before: Sequence[np.ndarray],
    ref_after: Sequence[np.ndarray],
    embedder: TextImageEmbedder,
) -> float:
    """1 - cos(mean generated edit direction, mean reference direction).

    Zero means the generated edits move embeddings exactly the way the
    reference pairs do; 2 means exactly opposite. Lower is better.
    """
    if not inputs or not ref_before:
        raise ValidationError("directional similarity needs nonempty pair lists")
    if len(inputs) != len(outputs) or len(ref_before) != len(ref_after):
        raise ValidationError("paired lists differ in length")

    def mean_direction(froms, tos, side: str) -> np.ndarray:
        deltas = [
            np.asarray(embedder.embed_image(t), dtype=np.float64)
            - np.asarray(embedder.embed_image(f), dtype=np.float64)
            for f, t in zip(froms, tos)
        ]
        direction = np.mean(deltas, axis=0)
        if np.linalg.norm(direction) == 0.0:
            raise ValidationError(f"zero-norm mean edit direction on the {side} side")
        return direction

    d_gen = mean_direction(inputs, outputs, "generated")
    d_ref = mean_direction(ref_before, ref_after, "reference")
    cos = float(
        np.dot(d_gen, d_ref) / (np.linalg.norm(d_gen) * np.linalg.norm(d_ref))
    )
    return 1.0 - cos
