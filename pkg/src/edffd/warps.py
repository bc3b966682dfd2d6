"""Warp models: homography, B-spline FFD, exponential-decay FFD, and TPS.

Every deformation model here is linear in its parameters: a dense
displacement field is a basis matrix (pixels x control points) applied to
per-control displacement vectors. The default field evaluators run the
full basis-matrix sum over all control points, chunked over pixel rows so
large canvases never materialize the whole matrix at once; optional fast
paths (separable 4x4 support for the B-spline, weight cutoff for the
exponential kernel) are available behind flags and agree with the exact
path to well under 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import cubic_bspline
from .errors import (
    AtInfinityError,
    DegenerateCornersError,
    SingularMatrixError,
    SingularSystemError,
)
from .image import ImageBuffer, Mask, sample_plane
from .parallel import run_chunked
from .validation import as_float_array

_W_EPS = 1e-12
EDFFD_FAST_CUTOFF = 1e-6


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)  # always copies
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# Homography
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Homography:
    """3x3 projective matrix, scaled so h[2,2] == 1 whenever it is nonzero."""

    h: np.ndarray

    def __post_init__(self):
        m = as_float_array(self.h, "homography").reshape(3, 3)
        if abs(m[2, 2]) > _W_EPS:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) < _W_EPS:
            raise SingularMatrixError("homography matrix is singular")
        object.__setattr__(self, "h", _frozen(m))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = dx
        m[1, 2] = dy
        return cls(m)


@dataclass(frozen=True)
class FourPointMotion:
    """Canvas corner displacements (dx, dy), ordered TL, TR, BL, BR."""

    displacements: np.ndarray

    def __post_init__(self):
        d = as_float_array(self.displacements, "corner displacements").reshape(4, 2)
        object.__setattr__(self, "displacements", _frozen(d))

    @classmethod
    def zero(cls) -> "FourPointMotion":
        return cls(np.zeros((4, 2)))


def canvas_corners(width: int, height: int) -> np.ndarray:
    w1, h1 = float(width - 1), float(height - 1)
    return np.array([[0.0, 0.0], [w1, 0.0], [0.0, h1], [w1, h1]])


def _hartley_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    if rms < _W_EPS:
        raise DegenerateCornersError("point set collapses to a single point")
    s = np.sqrt(2.0) / rms
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_homography_dlt(src, dst, weights=None) -> Homography:
    """Normalized direct linear transform from >= 4 correspondences.

    Both point sets are Hartley-normalized (zero mean, RMS radius sqrt(2)),
    the stacked 2Nx9 system is solved by SVD nullspace, and optional
    nonnegative weights scale each correspondence's rows.
    """
    src = as_float_array(src, "src points").reshape(-1, 2)
    dst = as_float_array(dst, "dst points").reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise ValueError("need matching src/dst arrays with at least 4 points")
    t_src = _hartley_transform(src)
    t_dst = _hartley_transform(dst)
    sn = src * t_src[0, 0] + t_src[:2, 2]
    dn = dst * t_dst[0, 0] + t_dst[:2, 2]
    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    if weights is not None:
        w = np.clip(as_float_array(weights, "weights").reshape(-1), 0.0, None)
        if w.shape[0] != n:
            raise ValueError("one weight per correspondence required")
        a *= np.repeat(w, 2)[:, None]
    _, s, vt = np.linalg.svd(a)
    # A unique nullspace needs all but the solution direction to be
    # well-conditioned: with exactly 4 points s has 8 entries that must all
    # be nonzero; with more points the second-smallest of 9 must be.
    guard = s[-1] if len(s) < 9 else s[-2]
    if guard < 1e-9 * max(s[0], _W_EPS):
        raise DegenerateCornersError("correspondences are rank-deficient")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    try:
        return Homography(h)
    except SingularMatrixError as exc:
        raise DegenerateCornersError(str(exc)) from exc


def four_point_to_homography(motion: FourPointMotion, width: int, height: int) -> Homography:
    """Homography mapping each canvas corner exactly onto its displaced position."""
    src = canvas_corners(width, height)
    return estimate_homography_dlt(src, src + motion.displacements)


def apply_homography(hom: Homography, pts) -> np.ndarray:
    """Projective transform with perspective division; (N, 2) in and out."""
    pts = as_float_array(pts, "points").reshape(-1, 2)
    m = hom.h
    w = m[2, 0] * pts[:, 0] + m[2, 1] * pts[:, 1] + m[2, 2]
    if np.any(np.abs(w) < _W_EPS):
        raise AtInfinityError("a point maps to the line at infinity")
    x = (m[0, 0] * pts[:, 0] + m[0, 1] * pts[:, 1] + m[0, 2]) / w
    y = (m[1, 0] * pts[:, 0] + m[1, 1] * pts[:, 1] + m[1, 2]) / w
    return np.stack([x, y], axis=1)


def invert_homography(hom: Homography) -> Homography:
    try:
        inv = np.linalg.inv(hom.h)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("homography is not invertible") from exc
    return Homography(inv)


# ---------------------------------------------------------------------------
# Control grids and dense fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlGrid:
    """Uniform (m+1) x (n+1) control lattice over a W x H canvas.

    ``m`` counts row cells (vertical), ``n`` column cells (horizontal);
    anchors span the canvas border inclusive, so anchor (i, j) sits at
    (j * W / n, i * H / m). ``displacements`` holds per-control (dx, dy).
    """

    m: int
    n: int
    width: int
    height: int
    displacements: np.ndarray

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.width < 1 or self.height < 1:
            raise ValueError("grid cell counts and canvas size must be positive")
        d = as_float_array(self.displacements, "displacements")
        if d.shape != (self.m + 1, self.n + 1, 2):
            raise ValueError(
                f"displacements must have shape {(self.m + 1, self.n + 1, 2)}, "
                f"got {d.shape}"
            )
        object.__setattr__(self, "displacements", _frozen(d))

    @classmethod
    def zero(cls, m: int, n: int, width: int, height: int) -> "ControlGrid":
        return cls(m, n, width, height, np.zeros((m + 1, n + 1, 2)))

    def with_displacements(self, d) -> "ControlGrid":
        return ControlGrid(self.m, self.n, self.width, self.height, d)

    @property
    def spacing(self) -> tuple:
        return (self.width / self.n, self.height / self.m)

    @property
    def anchors(self) -> np.ndarray:
        ax = np.arange(self.n + 1) * (self.width / self.n)
        ay = np.arange(self.m + 1) * (self.height / self.m)
        out = np.empty((self.m + 1, self.n + 1, 2))
        out[:, :, 0] = ax[None, :]
        out[:, :, 1] = ay[:, None]
        return out

    @property
    def points(self) -> np.ndarray:
        """Deformed lattice: anchors + displacements."""
        return self.anchors + self.displacements

    def flat_anchors(self) -> np.ndarray:
        return self.anchors.reshape(-1, 2)

    def flat_displacements(self) -> np.ndarray:
        return self.displacements.reshape(-1, 2)


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement planes (dx, dy), both (H, W)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = as_float_array(self.dx, "dx")
        dy = as_float_array(self.dy, "dy")
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError("dx and dy must be matching 2-D planes")
        object.__setattr__(self, "dx", _frozen(dx))
        object.__setattr__(self, "dy", _frozen(dy))

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @classmethod
    def zero(cls, width: int, height: int) -> "DisplacementField":
        z = np.zeros((height, width))
        return cls(z, z.copy())


@dataclass(frozen=True)
class SamplingMap:
    """Per-output-pixel source coordinates (sx, sy), both (H, W)."""

    sx: np.ndarray
    sy: np.ndarray

    def __post_init__(self):
        sx = as_float_array(self.sx, "sx")
        sy = as_float_array(self.sy, "sy")
        if sx.ndim != 2 or sx.shape != sy.shape:
            raise ValueError("sx and sy must be matching 2-D planes")
        object.__setattr__(self, "sx", _frozen(sx))
        object.__setattr__(self, "sy", _frozen(sy))

    @property
    def height(self) -> int:
        return self.sx.shape[0]

    @property
    def width(self) -> int:
        return self.sx.shape[1]


def pixel_coords(width: int, height: int) -> np.ndarray:
    """Row-major (W*H, 2) array of pixel (x, y) coordinates."""
    xs, ys = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def bspline_basis_matrix(points, grid: ControlGrid) -> np.ndarray:
    """(P, (m+1)(n+1)) cubic B-spline weights with per-axis spacing.

    Column order is row-major over control points: c = i * (n+1) + j.
    """
    points = as_float_array(points, "points").reshape(-1, 2)
    sx, sy = grid.spacing
    cx = np.arange(grid.n + 1) * sx
    cy = np.arange(grid.m + 1) * sy
    bx = cubic_bspline((points[:, 0:1] - cx[None, :]) / sx)
    by = cubic_bspline((points[:, 1:2] - cy[None, :]) / sy)
    return (by[:, :, None] * bx[:, None, :]).reshape(points.shape[0], -1)


def edffd_basis_matrix(points, grid: ControlGrid, theta: float) -> np.ndarray:
    """(P, (m+1)(n+1)) exponential weights exp(-dist / (theta * eta)).

    eta is the smaller of the two axis spacings (the kernel is isotropic).
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    points = as_float_array(points, "points").reshape(-1, 2)
    anchors = grid.flat_anchors()
    scale = theta * min(grid.spacing)
    dx = points[:, 0:1] - anchors[None, :, 0]
    dy = points[:, 1:2] - anchors[None, :, 1]
    return np.exp(np.sqrt(dx * dx + dy * dy) * (-1.0 / scale))


def tps_system_matrix(anchors: np.ndarray) -> np.ndarray:
    a = anchors.shape[0]
    d = anchors[:, None, :] - anchors[None, :, :]
    r2 = np.sum(d * d, axis=2)
    k = _tps_u_from_r2(r2)
    p = np.concatenate([np.ones((a, 1)), anchors], axis=1)
    s = np.zeros((a + 3, a + 3))
    s[:a, :a] = k
    s[:a, a:] = p
    s[a:, :a] = p.T
    return s


def _tps_u_from_r2(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r = 0.5 * r^2 log r^2, with U(0) = 0.
    out = np.zeros_like(r2)
    nz = r2 > 0.0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


def _tps_solve(system: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("TPS system is singular") from exc
    resid = np.abs(system @ sol - rhs).max()
    scale = max(np.abs(rhs).max(), 1.0)
    if not np.isfinite(resid) or resid > 1e-6 * scale:
        raise SingularSystemError("TPS system is numerically singular")
    return sol


def tps_cardinal_basis(points, anchors) -> np.ndarray:
    """(P, A) matrix B with TPS-interpolated map value = B @ targets."""
    points = as_float_array(points, "points").reshape(-1, 2)
    anchors = as_float_array(anchors, "anchors").reshape(-1, 2)
    a = anchors.shape[0]
    system = tps_system_matrix(anchors)
    inv_cols = _tps_solve(system, np.eye(a + 3)[:, :a])
    d = points[:, None, :] - anchors[None, :, :]
    r2 = np.sum(d * d, axis=2)
    e = np.concatenate(
        [_tps_u_from_r2(r2), np.ones((points.shape[0], 1)), points], axis=1
    )
    return e @ inv_cols


def _field_from_basis(grid_or_anchors, width, height, basis_fn, disp) -> DisplacementField:
    total = width * height
    pts = pixel_coords(width, height)
    out = np.empty((total, 2))

    def work(start, stop):
        out[start:stop] = basis_fn(pts[start:stop]) @ disp

    run_chunked(total, work)
    return DisplacementField(out[:, 0].reshape(height, width),
                             out[:, 1].reshape(height, width))


def bspline_ffd_field(grid: ControlGrid, fast: bool = False) -> DisplacementField:
    """Dense B-spline FFD displacement field over the grid's canvas.

    The default path sums the full basis matrix over all control points.
    ``fast=True`` evaluates the same sum separably per axis (only the 4x4
    local support of each pixel carries nonzero weight), which is exact up
    to float rounding.
    """
    if fast:
        sx, sy = grid.spacing
        bx = cubic_bspline(
            (np.arange(grid.width)[:, None] - np.arange(grid.n + 1)[None, :] * sx) / sx
        )
        by = cubic_bspline(
            (np.arange(grid.height)[:, None] - np.arange(grid.m + 1)[None, :] * sy) / sy
        )
        dx = by @ grid.displacements[:, :, 0] @ bx.T
        dy = by @ grid.displacements[:, :, 1] @ bx.T
        return DisplacementField(dx, dy)
    return _field_from_basis(
        grid,
        grid.width,
        grid.height,
        lambda p: bspline_basis_matrix(p, grid),
        grid.flat_displacements(),
    )


def edffd_field(grid: ControlGrid, theta: float, fast: bool = False) -> DisplacementField:
    """Dense exponential-decay FFD field; full sum over all control points.

    ``fast=True`` skips control points whose weight falls below
    ``EDFFD_FAST_CUTOFF`` by restricting each control point to its cutoff
    radius; useful when theta * eta is small relative to the canvas.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    if fast:
        return _edffd_field_cutoff(grid, theta)
    return _field_from_basis(
        grid,
        grid.width,
        grid.height,
        lambda p: edffd_basis_matrix(p, grid, theta),
        grid.flat_displacements(),
    )


def _edffd_field_cutoff(grid: ControlGrid, theta: float) -> DisplacementField:
    scale = theta * min(grid.spacing)
    radius = -scale * np.log(EDFFD_FAST_CUTOFF)
    h, w = grid.height, grid.width
    dx = np.zeros((h, w))
    dy = np.zeros((h, w))
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    anchors = grid.flat_anchors()
    disp = grid.flat_displacements()
    for (ax, ay), (ux, uy) in zip(anchors, disp):
        x0 = max(int(np.ceil(ax - radius)), 0)
        x1 = min(int(np.floor(ax + radius)), w - 1)
        y0 = max(int(np.ceil(ay - radius)), 0)
        y1 = min(int(np.floor(ay + radius)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        ddx = xs[x0 : x1 + 1] - ax
        ddy = ys[y0 : y1 + 1] - ay
        r = np.sqrt(ddx[None, :] ** 2 + ddy[:, None] ** 2)
        wgt = np.exp(r * (-1.0 / scale))
        wgt[wgt < EDFFD_FAST_CUTOFF] = 0.0
        dx[y0 : y1 + 1, x0 : x1 + 1] += wgt * ux
        dy[y0 : y1 + 1, x0 : x1 + 1] += wgt * uy
    return DisplacementField(dx, dy)


def tps_field(anchors, targets, width: int, height: int) -> DisplacementField:
    """Interpolating thin plate spline displacement field.

    Maps every anchor exactly onto its target (r^2 log r radial part plus
    an affine term); the returned field holds target-minus-identity.
    """
    anchors = as_float_array(anchors, "anchors").reshape(-1, 2)
    targets = as_float_array(targets, "targets").reshape(-1, 2)
    if anchors.shape != targets.shape or anchors.shape[0] < 3:
        raise ValueError("need >= 3 matching anchor/target points")
    a = anchors.shape[0]
    system = tps_system_matrix(anchors)
    rhs = np.concatenate([targets, np.zeros((3, 2))], axis=0)
    sol = _tps_solve(system, rhs)
    wgt, aff = sol[:a], sol[a:]
    total = width * height
    pts = pixel_coords(width, height)
    out = np.empty((total, 2))

    def work(start, stop):
        p = pts[start:stop]
        d = p[:, None, :] - anchors[None, :, :]
        r2 = np.sum(d * d, axis=2)
        u = _tps_u_from_r2(r2)
        mapped = u @ wgt + aff[0] + p @ aff[1:]
        out[start:stop] = mapped - p

    run_chunked(total, work)
    return DisplacementField(out[:, 0].reshape(height, width),
                             out[:, 1].reshape(height, width))


# ---------------------------------------------------------------------------
# Composition and warping
# ---------------------------------------------------------------------------


def compose_sampling_map(hom: Homography, fields, width: int, height: int) -> SamplingMap:
    """Source coordinates H(x) plus the sum of all residual fields at x."""
    fields = list(fields)
    for f in fields:
        if (f.width, f.height) != (width, height):
            raise ValueError("all fields must share the output canvas size")
    xs, ys = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )
    m = hom.h
    w = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    if np.any(np.abs(w) < _W_EPS):
        raise AtInfinityError("homography sends canvas pixels to infinity")
    sx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / w
    sy = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / w
    for f in fields:
        sx = sx + f.dx
        sy = sy + f.dy
    return SamplingMap(sx, sy)


def identity_sampling_map(width: int, height: int) -> SamplingMap:
    xs, ys = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )
    return SamplingMap(xs, ys)


def warp_image(src: ImageBuffer, smap: SamplingMap):
    """Backward warp through bilinear sampling.

    Returns the warped image and a {0, 1} mask flagging pixels whose
    source coordinates fell inside the canvas.
    """
    vals, valid = sample_plane(src.planes, smap.sx, smap.sy)
    data = vals[:, :, 0] if src.channels == 1 else vals
    return ImageBuffer(np.clip(data, 0.0, 1.0)), Mask(valid.astype(np.float64))
