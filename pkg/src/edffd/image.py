"""Image containers, bilinear sampling, pyramids and masked quality metrics.

Images are immutable value objects holding float64 data in [0, 1]. All
sampling is bilinear; coordinates outside ``[0, W-1] x [0, H-1]`` yield a
zero value flagged invalid (callers that want clamp-to-edge semantics,
such as the feature extractor, pass ``clamp=True``).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as _PILImage

from .errors import DimensionMismatchError, EmptyMaskError, TooCoarseError
from .validation import check_image_array, check_mask_array

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

MIN_PYRAMID_SIDE = 8


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageBuffer:
    """Single- or three-channel image, row-major float64 values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(check_image_array(self.data)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def planes(self) -> np.ndarray:
        """Data viewed as (H, W, C), with C == 1 for grey images."""
        return self.data[:, :, None] if self.data.ndim == 2 else self.data


@dataclass(frozen=True)
class Mask:
    """Per-pixel weights in [0, 1] with the same canvas as the masked image."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(check_mask_array(self.data)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def full(cls, width: int, height: int) -> "Mask":
        return cls(np.ones((height, width)))


@dataclass(frozen=True)
class Pyramid:
    """Image pyramid; level 0 is full resolution, each level halves both axes."""

    levels: tuple

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i) -> ImageBuffer:
        return self.levels[i]


def luminance(img: ImageBuffer) -> ImageBuffer:
    """Rec.601 luminance; grey images pass through unchanged."""
    if img.channels == 1:
        return img
    w = np.asarray(LUMA_WEIGHTS)
    return ImageBuffer(np.clip(img.data @ w, 0.0, 1.0))


def _bilinear(data: np.ndarray, xs, ys, clamp: bool = False):
    """Core bilinear gather on a (H, W) or (H, W, C) array.

    Returns (values, valid). Values are zeroed where invalid unless
    ``clamp`` is set, in which case coordinates clamp to the edge and
    everything is valid.
    """
    h, w = data.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if data.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    vals = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    if not clamp:
        gate = valid[..., None] if data.ndim == 3 else valid
        vals = vals * gate
    return vals, valid


def sample_plane(plane: np.ndarray, xs, ys, clamp: bool = False):
    """Bilinear sample of a raw array; out-of-canvas gives (0, invalid)."""
    return _bilinear(plane, xs, ys, clamp=clamp)


def sample_plane_with_grad(plane: np.ndarray, xs, ys):
    """Bilinear sample of a 2-D plane plus its analytic coordinate derivatives.

    Derivatives are zero where the sample is invalid; the validity
    indicator itself is treated as locally constant.
    """
    h, w = plane.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    v00 = plane[y0, x0]
    v01 = plane[y0, x1]
    v10 = plane[y1, x0]
    v11 = plane[y1, x1]
    vals = ((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
            + fy * ((1.0 - fx) * v10 + fx * v11)) * valid
    dvx = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * valid
    dvy = ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)) * valid
    return vals, valid, dvx, dvy


def sample_bilinear(img: ImageBuffer, x: float, y: float):
    """Sample one point; returns (per-channel tuple, valid flag)."""
    vals, valid = _bilinear(img.planes, float(x), float(y))
    return tuple(np.atleast_1d(vals).tolist()), bool(valid)


def _halve(arr: np.ndarray) -> np.ndarray:
    h2 = arr.shape[0] // 2
    w2 = arr.shape[1] // 2
    t = arr[: 2 * h2, : 2 * w2]
    return 0.25 * (t[0::2, 0::2] + t[1::2, 0::2] + t[0::2, 1::2] + t[1::2, 1::2])


def build_pyramid(img: ImageBuffer, levels: int) -> Pyramid:
    """2x2 box-filtered, 2-subsampled pyramid; every level must stay >= 8x8."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    w, h = img.width, img.height
    if (w >> (levels - 1)) < MIN_PYRAMID_SIDE or (h >> (levels - 1)) < MIN_PYRAMID_SIDE:
        raise TooCoarseError(
            f"{w}x{h} image cannot support {levels} pyramid levels "
            f"(coarsest level must be >= {MIN_PYRAMID_SIDE}x{MIN_PYRAMID_SIDE})"
        )
    out = [img]
    arr = img.data
    for _ in range(levels - 1):
        arr = _halve(arr)
        out.append(ImageBuffer(arr))
    return Pyramid(tuple(out))


def psnr_masked(a: ImageBuffer, b: ImageBuffer, mask: Mask) -> float:
    """10*log10(1 / masked MSE) in dB; ``inf`` when the images agree exactly.

    The MSE is the mask-weighted mean squared difference, averaged over
    channels; peak signal is 1.0.
    """
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(
            f"image shapes differ: {a.data.shape} vs {b.data.shape}"
        )
    if (mask.height, mask.width) != (a.height, a.width):
        raise DimensionMismatchError("mask dimensions do not match the images")
    weight = float(mask.data.sum())
    if weight <= 0.0:
        raise EmptyMaskError("mask has zero total weight")
    diff = a.planes - b.planes
    num = float(np.einsum("hw,hwc->", mask.data, diff * diff))
    mse = num / (weight * a.channels)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# File I/O (PNG and binary PGM/PPM via Pillow, 8-bit)
# ---------------------------------------------------------------------------

_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}


def load_image(path) -> ImageBuffer:
    """Read an 8-bit PNG/PGM/PPM; values are divided by 255 into [0, 1]."""
    with _PILImage.open(path) as im:
        mode = im.mode
        if mode not in ("L", "RGB"):
            im = im.convert("L" if mode in ("1", "I", "I;16", "F", "P;1") else "RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return ImageBuffer(arr.astype(np.float64) / 255.0)


def save_image(img: ImageBuffer, path) -> None:
    """Write an 8-bit PNG/PGM/PPM; the write is atomic (temp file + rename)."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in _FORMATS:
        raise ValueError(f"unsupported image extension {ext!r}")
    if ext == ".pgm" and img.channels != 1:
        raise ValueError("PGM requires a single-channel image")
    if ext == ".ppm" and img.channels != 3:
        raise ValueError("PPM requires a three-channel image")
    arr = np.rint(img.data * 255.0).astype(np.uint8)
    pil = _PILImage.fromarray(arr, mode="L" if img.channels == 1 else "RGB")
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        pil.save(tmp, format=_FORMATS[ext])
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
