"""Input validation helpers.

Images are float64 arrays shaped (H, W, 3) with values in [0, 1] everywhere
inside the package; these helpers coerce and check user-supplied data at the
API boundary (estimator, CLI, metrics).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_float_image(x, name: str = "image") -> np.ndarray:
    """Coerce an array-like to a float64 (H, W, 3) image in [0, 1].

    uint8 input is rescaled by 1/255; float input must already lie in [0, 1].
    """
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(
            f"{name}: expected (H, W, 3) array, got shape {arr.shape}"
        )
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValidationError(
            f"{name}: float images must lie in [0, 1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return np.clip(arr, 0.0, 1.0)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def as_image_list(X, name: str = "X") -> list[np.ndarray]:
    """Coerce a stacked array (n, H, W, 3) or a sequence of images to a list."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        items = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 3:
        items = [X]
    else:
        items = list(X)
    if not items:
        raise ValidationError(f"{name}: empty image collection")
    images = [as_float_image(img, f"{name}[{i}]") for i, img in enumerate(items)]
    first = images[0].shape
    for i, img in enumerate(images[1:], start=1):
        if img.shape != first:
            raise ValidationError(
                f"{name}[{i}] shape {img.shape} differs from {name}[0] shape {first}"
            )
    return images


def check_paired_images(X, y) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Validate a before/after pairing: equal counts, one shared resolution."""
    before = as_image_list(X, "X")
    after = as_image_list(y, "y")
    if len(before) != len(after):
        raise ValidationError(
            f"before/after counts differ: {len(before)} vs {len(after)}"
        )
    if before[0].shape != after[0].shape:
        raise ValidationError(
            f"before images {before[0].shape} and after images "
            f"{after[0].shape} differ in shape"
        )
    return before, after
