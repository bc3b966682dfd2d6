"""Content-alignment and shape-preservation losses with analytic gradients.

Reported loss values use true L1 means; gradients replace the kink with a
Charbonnier surrogate sqrt(d^2 + eps^2), eps = 1e-3. All photometric
terms evaluate on luminance, with means taken over every canvas pixel so
magnitudes are resolution independent. The warped-ones validity mask is
treated as locally constant when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCornersError, ZeroLengthEdgeError
from .image import ImageBuffer, Mask, luminance, sample_plane, sample_plane_with_grad
from .validation import as_float_array, check_same_canvas
from .warps import (
    ControlGrid,
    FourPointMotion,
    Homography,
    SamplingMap,
    bspline_basis_matrix,
    canvas_corners,
    compose_sampling_map,
    edffd_basis_matrix,
    four_point_to_homography,
    identity_sampling_map,
    invert_homography,
    pixel_coords,
    tps_cardinal_basis,
)

CHARBONNIER_EPS = 1e-3
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Content weights lambda0 / per-stage lambda_i and shape weight omega."""

    lambda0: float = 1.0
    lambda_i: tuple = (1.3, 1.7)
    omega: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "lambda_i", tuple(float(v) for v in self.lambda_i))
        values = (self.lambda0, *self.lambda_i, self.omega)
        if any((not np.isfinite(v)) or v < 0 for v in values):
            raise ValueError("loss weights must be finite and nonnegative")


@dataclass(frozen=True)
class GridEdges:
    """Deformed lattice edges plus consecutive-pair non-overlap flags.

    ``horizontal`` is (m+1, n, 2), ``vertical`` is (m, n+1, 2). ``q_h`` and
    ``q_v`` flag the consecutive same-direction pairs lying in the
    non-overlap region ((m+1, n-1) and (m-1, n+1)); they are all-ones when
    no overlap mask was supplied.
    """

    horizontal: np.ndarray
    vertical: np.ndarray
    q_h: np.ndarray
    q_v: np.ndarray

    @property
    def pair_count(self) -> int:
        return self.q_h.size + self.q_v.size


def dense_basis_matrix(points, grid: ControlGrid, model: str = "edffd",
                       theta: float = 0.75) -> np.ndarray:
    """Displacement basis (P, n_ctrl) for any of the linear warp models."""
    if model == "edffd":
        return edffd_basis_matrix(points, grid, theta)
    if model == "bspline":
        return bspline_basis_matrix(points, grid)
    if model == "tps":
        return tps_cardinal_basis(points, grid.flat_anchors())
    raise ValueError(f"unknown deformation model {model!r}")


def grid_edges(grid: ControlGrid, overlap: Mask | None = None) -> GridEdges:
    pts = grid.points
    e_h = pts[:, 1:, :] - pts[:, :-1, :]
    e_v = pts[1:, :, :] - pts[:-1, :, :]
    if overlap is None:
        q_h = np.ones((grid.m + 1, max(grid.n - 1, 0)))
        q_v = np.ones((max(grid.m - 1, 0), grid.n + 1))
    else:
        anchors = grid.anchors
        vals, _ = sample_plane(overlap.data, anchors[:, :, 0], anchors[:, :, 1])
        outside = vals < 0.5
        # A pair is flagged when all three lattice points defining it lie
        # outside the overlap region.
        q_h = (outside[:, :-2] & outside[:, 1:-1] & outside[:, 2:]).astype(np.float64)
        q_v = (outside[:-2, :] & outside[1:-1, :] & outside[2:, :]).astype(np.float64)
    return GridEdges(e_h, e_v, q_h, q_v)


def intra_grid_loss(grid: ControlGrid) -> float:
    """Rectified penalty on deformed edges stretched past twice their spacing."""
    edges = grid_edges(grid)
    thr_x = 2.0 * grid.width / grid.n
    thr_y = 2.0 * grid.height / grid.m
    lh = np.maximum(edges.horizontal[:, :, 0] - thr_x, 0.0).sum()
    lv = np.maximum(edges.vertical[:, :, 1] - thr_y, 0.0).sum()
    return float(lh / ((grid.m + 1) * grid.n) + lv / (grid.m * (grid.n + 1)))


def intra_grid_grad(grid: ControlGrid) -> np.ndarray:
    """Gradient of intra_grid_loss with respect to the displacements."""
    edges = grid_edges(grid)
    thr_x = 2.0 * grid.width / grid.n
    thr_y = 2.0 * grid.height / grid.m
    grad = np.zeros((grid.m + 1, grid.n + 1, 2))
    act_h = (edges.horizontal[:, :, 0] > thr_x) / ((grid.m + 1) * grid.n)
    act_v = (edges.vertical[:, :, 1] > thr_y) / (grid.m * (grid.n + 1))
    grad[:, 1:, 0] += act_h
    grad[:, :-1, 0] -= act_h
    grad[1:, :, 1] += act_v
    grad[:-1, :, 1] -= act_v
    return grad


def _pair_cosines(a: np.ndarray, b: np.ndarray, q: np.ndarray):
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    active = q > 0
    if np.any(active & ((na < _EDGE_EPS) | (nb < _EDGE_EPS))):
        raise ZeroLengthEdgeError("a flagged pair contains a near-zero-length edge")
    denom = np.maximum(na * nb, _EDGE_EPS)
    return np.sum(a * b, axis=-1) / denom, na, nb


def inter_grid_loss(grid: ControlGrid, overlap: Mask) -> float:
    """Mean collinearity penalty over flagged consecutive edge pairs."""
    edges = grid_edges(grid, overlap)
    if edges.pair_count == 0:
        raise ValueError("grid has no consecutive edge pairs")
    cos_h, _, _ = _pair_cosines(
        edges.horizontal[:, :-1, :], edges.horizontal[:, 1:, :], edges.q_h
    )
    cos_v, _, _ = _pair_cosines(
        edges.vertical[:-1, :, :], edges.vertical[1:, :, :], edges.q_v
    )
    total = float((edges.q_h * (1.0 - cos_h)).sum() + (edges.q_v * (1.0 - cos_v)).sum())
    return total / edges.pair_count


def inter_grid_grad(grid: ControlGrid, overlap: Mask) -> np.ndarray:
    """Gradient of inter_grid_loss with respect to the displacements."""
    edges = grid_edges(grid, overlap)
    if edges.pair_count == 0:
        raise ValueError("grid has no consecutive edge pairs")
    grad = np.zeros((grid.m + 1, grid.n + 1, 2))
    scale = 1.0 / edges.pair_count

    def accumulate(a, b, q, idx_a, idx_b, idx_c):
        # Pair loss q * (1 - <a,b>/(|a||b|)) over edges a = p_b - p_a,
        # b = p_c - p_b; gradients flow to the three lattice points.
        cos, na, nb = _pair_cosines(a, b, q)
        denom = np.maximum(na * nb, _EDGE_EPS)
        d_cos_da = b / denom[..., None] - (cos / np.maximum(na * na, _EDGE_EPS))[..., None] * a
        d_cos_db = a / denom[..., None] - (cos / np.maximum(nb * nb, _EDGE_EPS))[..., None] * b
        w = (q * scale)[..., None]
        ga = w * d_cos_da
        gb = w * d_cos_db
        # d loss / d p_a = +dcos/da * w ... signs: loss = -w*cos.
        np.add.at(grad, idx_a, ga)
        np.add.at(grad, idx_b, -ga + gb)
        np.add.at(grad, idx_c, -gb)

    m, n = grid.m, grid.n
    ii, jj = np.meshgrid(np.arange(m + 1), np.arange(max(n - 1, 0)), indexing="ij")
    accumulate(
        edges.horizontal[:, :-1, :],
        edges.horizontal[:, 1:, :],
        edges.q_h,
        (ii, jj),
        (ii, jj + 1),
        (ii, jj + 2),
    )
    ii, jj = np.meshgrid(np.arange(max(m - 1, 0)), np.arange(n + 1), indexing="ij")
    accumulate(
        edges.vertical[:-1, :, :],
        edges.vertical[1:, :, :],
        edges.q_v,
        (ii, jj),
        (ii + 1, jj),
        (ii + 2, jj),
    )
    return grad


# ---------------------------------------------------------------------------
# Photometric terms
# ---------------------------------------------------------------------------


def stage_photometric_loss(ref: ImageBuffer, target: ImageBuffer, smap: SamplingMap,
                           charbonnier: bool = False) -> float:
    """Mean |ref * warped-ones - warped target| on luminance.

    ``charbonnier=True`` swaps |d| for sqrt(d^2 + eps^2), the surrogate
    differentiated by the gradient routines.
    """
    check_same_canvas(ref, target, "images")
    rl = luminance(ref).data
    tl = luminance(target).data
    vals, valid = sample_plane(tl, smap.sx, smap.sy)
    d = rl * valid - vals
    if charbonnier:
        per = np.sqrt(d * d + CHARBONNIER_EPS * CHARBONNIER_EPS)
    else:
        per = np.abs(d)
    return float(per.mean())


def content_loss(ref: ImageBuffer, target: ImageBuffer, hom: Homography,
                 stage_maps, weights: LossWeights) -> float:
    """Bidirectional homography terms plus one forward term per stage map."""
    check_same_canvas(ref, target, "images")
    stage_maps = list(stage_maps)
    if len(stage_maps) > len(weights.lambda_i):
        raise ValueError("need one lambda_i per stage map")
    w, h = ref.width, ref.height
    fwd = compose_sampling_map(hom, [], w, h)
    bwd = compose_sampling_map(invert_homography(hom), [], w, h)
    loss = weights.lambda0 * stage_photometric_loss(ref, target, fwd)
    loss += weights.lambda0 * stage_photometric_loss(target, ref, bwd)
    for lam, smap in zip(weights.lambda_i, stage_maps):
        loss += lam * stage_photometric_loss(ref, target, smap)
    return float(loss)


def total_loss(content: float, shape: float, omega: float) -> float:
    return float(content + omega * shape)


def photometric_grad(ref: ImageBuffer, target: ImageBuffer, params,
                     prior: SamplingMap | None = None, theta: float = 0.75,
                     model: str = "edffd", basis: np.ndarray | None = None) -> np.ndarray:
    """Analytic gradient of the Charbonnier stage photometric term.

    For ``ControlGrid`` parameters the warp is prior + basis @ displacements
    (``basis`` may be precomputed and reused across descent iterations);
    for ``FourPointMotion`` it is the corner-interpolating homography.
    Output matches the parameter shape: (m+1, n+1, 2) or (4, 2).
    """
    if isinstance(params, ControlGrid):
        return _photometric_grad_grid(ref, target, params, prior, theta, model, basis)
    if isinstance(params, FourPointMotion):
        return _photometric_grad_motion(ref, target, params)
    raise TypeError("params must be a ControlGrid or FourPointMotion")


def _residual_weights(ref: ImageBuffer, target: ImageBuffer, sx, sy):
    rl = luminance(ref).data
    tl = luminance(target).data
    vals, valid, gx, gy = sample_plane_with_grad(tl, sx, sy)
    d = rl * valid - vals
    rho = d / np.sqrt(d * d + CHARBONNIER_EPS * CHARBONNIER_EPS)
    base = -1.0 / d.size
    return rho * gx * base, rho * gy * base


def _photometric_grad_grid(ref, target, grid, prior, theta, model, basis):
    check_same_canvas(ref, target, "images")
    w, h = ref.width, ref.height
    if basis is None:
        basis = dense_basis_matrix(pixel_coords(w, h), grid, model, theta)
    disp = basis @ grid.flat_displacements()
    if prior is None:
        prior = identity_sampling_map(w, h)
    sx = prior.sx + disp[:, 0].reshape(h, w)
    sy = prior.sy + disp[:, 1].reshape(h, w)
    jx, jy = _residual_weights(ref, target, sx, sy)
    return np.stack([basis.T @ jx.ravel(), basis.T @ jy.ravel()], axis=1).reshape(
        grid.m + 1, grid.n + 1, 2
    )


def _dlt_square_system(corners: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = np.zeros((8, 8))
    for k in range(4):
        x, y = corners[k]
        u, v = dst[k]
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
    return a


def _photometric_grad_motion(ref, target, motion):
    check_same_canvas(ref, target, "images")
    w, h = ref.width, ref.height
    corners = canvas_corners(w, h)
    dst = corners + motion.displacements
    hom = four_point_to_homography(motion, w, h)
    hm = hom.h
    try:
        minv = np.linalg.inv(_dlt_square_system(corners, dst))
    except np.linalg.LinAlgError as exc:
        raise DegenerateCornersError("corner system is singular") from exc
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    den = hm[2, 0] * xs + hm[2, 1] * ys + hm[2, 2]
    u = (hm[0, 0] * xs + hm[0, 1] * ys + hm[0, 2]) / den
    v = (hm[1, 0] * xs + hm[1, 1] * ys + hm[1, 2]) / den
    jx, jy = _residual_weights(ref, target, u, v)
    grad = np.zeros((4, 2))
    for k in range(4):
        scale = 1.0 + corners[k, 0] * hm[2, 0] + corners[k, 1] * hm[2, 1]
        for comp in range(2):
            dh = minv[:, 2 * k + comp] * scale
            du = (dh[0] * xs + dh[1] * ys + dh[2] - u * (dh[6] * xs + dh[7] * ys)) / den
            dv = (dh[3] * xs + dh[4] * ys + dh[5] - v * (dh[6] * xs + dh[7] * ys)) / den
            # jx/jy already carry the -rho'/(HW) factor.
            grad[k, comp] = float(np.sum(jx * du + jy * dv))
    return grad
