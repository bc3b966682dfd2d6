"""Input validation helpers shared by the core types and the estimators."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError

_RANGE_TOL = 1e-9


def as_float_array(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image_array(x, name: str = "image") -> np.ndarray:
    """Coerce to float64, squeeze trailing single channel, verify [0, 1]."""
    arr = as_float_array(x, name)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"{name} must be HxW or HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions")
    if arr.min() < -_RANGE_TOL or arr.max() > 1.0 + _RANGE_TOL:
        raise ValueError(
            f"{name} values must lie in [0, 1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    return np.clip(arr, 0.0, 1.0)


def check_mask_array(x, name: str = "mask") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.min() < -_RANGE_TOL or arr.max() > 1.0 + _RANGE_TOL:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def check_same_canvas(a, b, what: str = "operands") -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatchError(
            f"{what} differ in size: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def check_positive(value, name: str) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
