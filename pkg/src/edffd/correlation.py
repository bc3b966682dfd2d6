"""Deterministic feature extraction plus global and local correlation volumes.

Features are 27-channel patch descriptors sampled at the centres of a
downsampled cell lattice: 9 luminance samples on a 3x3 neighbourhood of
cell centres (zero-meaned) concatenated with the 18 matching gradient
samples, then L2-normalised per cell. Patch samples clamp to the canvas
edge so a constant image yields exactly zero features everywhere.

Global volumes hold patch-to-patch cosine sums over a K x K window
against every cell of the other map; local volumes hold raw dot products
inside a (2r+1)^2 window. Softmax-based conversion to flow follows, with
argmax flow for global volumes and soft-argmax flow for local ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, TooSmallError
from .image import ImageBuffer, luminance, sample_plane
from .validation import as_float_array

FEATURE_CHANNELS = 27
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """Per-cell feature vectors, shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_float_array(self.data, "features")
        if arr.ndim != 3 or arr.shape[2] < 1:
            raise ValueError("features must be (H, W, C) with C >= 1")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GlobalCorrelationVolume:
    """Scores (H, W, H*W): row-major target-cell score vector per cell."""

    scores: np.ndarray

    def __post_init__(self):
        s = as_float_array(self.scores, "scores")
        if s.ndim != 3 or s.shape[2] != s.shape[0] * s.shape[1]:
            raise ValueError("global volume must have shape (H, W, H*W)")
        s = np.ascontiguousarray(s)
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class LocalCorrelationVolume:
    """Scores (H, W, (2r+1)^2): window offsets row-major from (-r,-r)."""

    scores: np.ndarray
    radius: int

    def __post_init__(self):
        s = as_float_array(self.scores, "scores")
        side = 2 * self.radius + 1
        if self.radius < 1 or s.ndim != 3 or s.shape[2] != side * side:
            raise ValueError("local volume must have shape (H, W, (2r+1)^2)")
        s = np.ascontiguousarray(s)
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class Flow:
    """Per-cell displacement (in cells) with winning softmax probability."""

    dx: np.ndarray
    dy: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        for name in ("dx", "dy", "confidence"):
            arr = np.ascontiguousarray(as_float_array(getattr(self, name), name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.dx.shape != self.dy.shape or self.dx.shape != self.confidence.shape:
            raise ValueError("flow planes must share one shape")

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]


def extract_features(img: ImageBuffer, downsample: int) -> FeatureMap:
    """27-channel patch features on the cell lattice of the given downsample.

    downsample must be 4, 8 or 16 and no larger than either image side.
    """
    if downsample not in (4, 8, 16):
        raise ValueError("downsample must be 4, 8 or 16")
    if img.width < downsample or img.height < downsample:
        raise TooSmallError(
            f"image {img.width}x{img.height} smaller than downsample {downsample}"
        )
    luma = luminance(img).data
    gy, gx = np.gradient(luma)
    hc = img.height // downsample
    wc = img.width // downsample
    half = (downsample - 1) / 2.0
    cxs = np.arange(wc) * downsample + half
    cys = np.arange(hc) * downsample + half
    # 3x3 patch positions spaced one cell apart around each centre.
    offs = np.array([-downsample, 0.0, downsample])
    px = cxs[None, :, None, None] + offs[None, None, None, :]
    py = cys[:, None, None, None] + offs[None, None, :, None]
    px = np.broadcast_to(px, (hc, wc, 3, 3)).reshape(hc, wc, 9)
    py = np.broadcast_to(py, (hc, wc, 3, 3)).reshape(hc, wc, 9)
    lum, _ = sample_plane(luma, px, py, clamp=True)
    sgx, _ = sample_plane(gx, px, py, clamp=True)
    sgy, _ = sample_plane(gy, px, py, clamp=True)
    lum = lum - lum.mean(axis=2, keepdims=True)
    feats = np.concatenate([lum, sgx, sgy], axis=2)
    norm = np.sqrt(np.sum(feats * feats, axis=2, keepdims=True))
    feats = np.where(norm < _NORM_EPS, 0.0, feats / np.maximum(norm, _NORM_EPS))
    return FeatureMap(feats)


def _unit_cells(data: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(data * data, axis=2, keepdims=True))
    return np.where(norm < _NORM_EPS, 0.0, data / np.maximum(norm, _NORM_EPS))


def _shifted(data: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = data[y + dy, x + dx], zero outside the canvas."""
    h, w = data.shape[:2]
    out = np.zeros_like(data)
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    if ys0 < ys1 and xs0 < xs1:
        out[ys0:ys1, xs0:xs1] = data[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
    return out


def global_correlation(fr: FeatureMap, ft: FeatureMap, patch_size: int) -> GlobalCorrelationVolume:
    """Patch-to-patch cosine sums between every reference and target cell.

    Each of the K x K window offsets contributes the cosine of the two
    per-cell feature vectors at correspondingly offset positions;
    out-of-bounds offsets and near-zero-norm vectors contribute 0.
    """
    if (fr.height, fr.width, fr.channels) != (ft.height, ft.width, ft.channels):
        raise DimensionMismatchError("feature maps must share dimensions")
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError("patch size K must be odd and positive")
    h, w, c = fr.height, fr.width, fr.channels
    hw = h * w
    ur = _unit_cells(fr.data)
    ut = _unit_cells(ft.data)
    half = patch_size // 2
    acc = np.zeros((hw, hw))
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            ar = _shifted(ur, dy, dx).reshape(hw, c)
            at = _shifted(ut, dy, dx).reshape(hw, c)
            acc += ar @ at.T
    return GlobalCorrelationVolume(acc.reshape(h, w, hw))


def _softmax(scores: np.ndarray, axis: int) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def volume_to_flow(vol: GlobalCorrelationVolume, alpha: float) -> Flow:
    """Argmax flow under the alpha-scaled softmax over each score vector.

    Flow is the winning target cell minus the cell's own position, in
    cells; ties resolve to the smallest row-major target index.
    Confidence is the winning probability.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    h, w = vol.height, vol.width
    probs = _softmax(alpha * vol.scores.reshape(h * w, h * w), axis=1)
    idx = np.argmax(probs, axis=1)
    conf = probs[np.arange(h * w), idx]
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    fx = (idx % w).reshape(h, w) - xs
    fy = (idx // w).reshape(h, w) - ys
    return Flow(fx.astype(np.float64), fy.astype(np.float64), conf.reshape(h, w))


def local_correlation(fr: FeatureMap, ft_warped: FeatureMap, radius: int) -> LocalCorrelationVolume:
    """Raw dot products of each reference cell against its (2r+1)^2 window.

    The target map is expected to be extracted from the target image
    pre-warped by the current sampling map, so the window is searched
    around the cell's own position. Out-of-bounds samples contribute 0.
    """
    if (fr.height, fr.width, fr.channels) != (
        ft_warped.height,
        ft_warped.width,
        ft_warped.channels,
    ):
        raise DimensionMismatchError("feature maps must share dimensions")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    h, w = fr.height, fr.width
    side = 2 * radius + 1
    scores = np.empty((h, w, side * side))
    k = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            scores[:, :, k] = np.sum(fr.data * _shifted(ft_warped.data, dy, dx), axis=2)
            k += 1
    return LocalCorrelationVolume(scores, radius)


def local_volume_to_flow(vol: LocalCorrelationVolume, alpha: float) -> Flow:
    """Soft-argmax flow: probability-weighted mean window offset.

    Confidence is the maximum probability in the window.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    r = vol.radius
    side = 2 * r + 1
    offs = np.arange(-r, r + 1, dtype=np.float64)
    off_y = np.repeat(offs, side)
    off_x = np.tile(offs, side)
    probs = _softmax(alpha * vol.scores, axis=2)
    fx = probs @ off_x
    fy = probs @ off_y
    return Flow(fx, fy, probs.max(axis=2))


# ---------------------------------------------------------------------------
# Debug binary dump
# ---------------------------------------------------------------------------

_MAGIC = b"EDFFDCOR"
_KIND = {GlobalCorrelationVolume: 0, LocalCorrelationVolume: 1}


def save_volume_dump(path, vol) -> None:
    """Binary dump: magic, kind, width, height, depth, radius, float32 data."""
    kind = _KIND.get(type(vol))
    if kind is None:
        raise TypeError("expected a correlation volume")
    radius = vol.radius if kind == 1 else 0
    header = struct.pack(
        "<8sIIIII", _MAGIC, kind, vol.width, vol.height, vol.scores.shape[2], radius
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.scores.astype("<f4").tobytes())


def load_volume_dump(path):
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<8sIIIII"))
        magic, kind, w, h, depth, radius = struct.unpack("<8sIIIII", header)
        if magic != _MAGIC:
            raise ValueError("not a correlation volume dump")
        data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    scores = data.reshape(h, w, depth)
    if kind == 0:
        return GlobalCorrelationVolume(scores)
    return LocalCorrelationVolume(scores, radius)
