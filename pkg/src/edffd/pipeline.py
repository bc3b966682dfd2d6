"""Progressive global-to-local registration.

The coarse stage matches features through a global correlation volume and
fits a homography by confidence-weighted DLT (one trimming re-fit at 3 px
residual). Each refinement stage warps the target by the current map,
measures residual flow with local correlation and soft-argmax, fits
control-point displacements by ridge-regularized least squares through
the deformation kernel, then polishes them by backtracking gradient
descent on the Charbonnier photometric term plus the weighted shape
penalties. Feature scales come from an image pyramid: the homography uses
the coarsest level, refinements the finer ones; photometric polish always
runs at full resolution.

Everything here is deterministic: no RNG is consumed during registration
and all reductions run in fixed order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter, minimum_filter

from .correlation import (
    extract_features,
    global_correlation,
    local_correlation,
    local_volume_to_flow,
    volume_to_flow,
)
from .energies import (
    LossWeights,
    dense_basis_matrix,
    inter_grid_grad,
    inter_grid_loss,
    intra_grid_grad,
    intra_grid_loss,
    photometric_grad,
    stage_photometric_loss,
)
from .errors import InsufficientOverlapError, SingularSystemError
from .image import ImageBuffer, Mask, build_pyramid, luminance, psnr_masked, sample_plane
from .validation import check_same_canvas
from .warps import (
    ControlGrid,
    FourPointMotion,
    Homography,
    SamplingMap,
    apply_homography,
    bspline_ffd_field,
    compose_sampling_map,
    edffd_field,
    estimate_homography_dlt,
    four_point_to_homography,
    pixel_coords,
    tps_field,
    warp_image,
)

FEATURE_DOWNSAMPLE = 4
RESIDUAL_TRIM_PX = 3.0
MIN_CORRESPONDENCES = 8
MIN_REGISTER_SIDE = 64
_MIN_STEP = 1e-4

DEFAULT_WEIGHTS = LossWeights(1.0, (1.3, 1.7), 10.0)


@dataclass(frozen=True)
class RegistrationConfig:
    """Hyperparameters of the progressive pipeline (defaults follow the
    reference operating point: theta 0.75, K 3, alpha 10, r 4, grids 12x12
    then 18x18). Two pyramid levels put the homography stage at an
    effective 8 px cell size, small enough for the fixed 3 px DLT
    trimming; raise the level count for canvases much larger than 512."""

    n_stages: int = 1
    stage_grids: tuple = ((12, 12), (18, 18))
    theta: float = 0.75
    patch_size: int = 3
    softmax_scale: float = 10.0
    local_softmax_scale: float = 50.0
    search_radius: int = 4
    weights: LossWeights = DEFAULT_WEIGHTS
    pyramid_levels: int = 2
    max_descent_iter: int = 100
    descent_step: float = 0.5
    ridge: float = 1e-3
    model: str = "edffd"

    def __post_init__(self):
        if self.n_stages not in (1, 2):
            raise ValueError("n_stages must be 1 or 2")
        if len(self.stage_grids) < self.n_stages:
            raise ValueError("need one grid size per stage")
        if len(self.weights.lambda_i) < self.n_stages:
            raise ValueError("need one lambda_i per stage")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        for name in ("theta", "softmax_scale", "local_softmax_scale",
                     "descent_step", "ridge"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.search_radius < 1 or self.pyramid_levels < 1 or self.max_descent_iter < 0:
            raise ValueError("invalid search_radius/pyramid_levels/max_descent_iter")
        if self.model not in ("edffd", "bspline", "tps"):
            raise ValueError(f"unknown deformation model {self.model!r}")


@dataclass(frozen=True)
class RegistrationResult:
    """Fitted parameters, final map, warped target, and §-style timing split.

    ``inference_ms`` covers motion-parameter estimation, ``warp_ms`` the
    field evaluation plus sampling that turns parameters into the aligned
    image, and ``total_ms`` is their sum by definition.
    """

    homography: Homography
    grids: tuple
    sampling_map: SamplingMap
    warped: ImageBuffer
    overlap: Mask
    loss_trace: tuple
    psnr_db: float
    inference_ms: float
    warp_ms: float
    total_ms: float


def _level_scale(level: int) -> float:
    return float(2**level)


def _cell_centers_fullres(wc: int, hc: int, level: int) -> np.ndarray:
    """Full-resolution positions of feature-cell centres at a pyramid level.

    Box downsampling maps level-(L+1) coordinate x to 2x + 0.5 one level
    finer, so level-L coordinate x sits at 2^L x + (2^L - 1)/2 at level 0.
    """
    half = (FEATURE_DOWNSAMPLE - 1) / 2.0
    cx = np.arange(wc, dtype=np.float64) * FEATURE_DOWNSAMPLE + half
    cy = np.arange(hc, dtype=np.float64) * FEATURE_DOWNSAMPLE + half
    s = _level_scale(level)
    off = (s - 1.0) / 2.0
    gx, gy = np.meshgrid(s * cx + off, s * cy + off)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _level_image(img: ImageBuffer, level: int) -> ImageBuffer:
    if level == 0:
        return img
    return build_pyramid(img, level + 1)[level]


def _peak_deltas(scores, idx, px, py, width, height):
    """Per-axis parabolic offsets of correlation peaks.

    Integer argmax flow quantizes to whole cells, far above the accuracy
    the DLT trimming and the field fit need; a parabola per axis through
    the peak's neighbours recovers the fractional part. Peaks on the
    volume border or with a non-concave neighbourhood keep their integer
    position.
    """
    rows = np.arange(scores.shape[0])
    s0 = scores[rows, idx]

    def axis_delta(minus_ok, plus_ok, stride):
        sm = np.where(minus_ok, scores[rows, idx - stride * minus_ok], s0)
        sp = np.where(plus_ok, scores[rows, idx + stride * plus_ok], s0)
        denom = sm + sp - 2.0 * s0
        safe = minus_ok & plus_ok & (denom < -1e-12)
        delta = np.where(safe, (sm - sp) / (2.0 * np.where(safe, denom, -1.0)), 0.0)
        return np.clip(delta, -0.5, 0.5)

    return (
        axis_delta(px > 0, px < width - 1, 1),
        axis_delta(py > 0, py < height - 1, width),
    )


def _parabolic_subcell(vol, flow) -> np.ndarray:
    """Sub-cell argmax flow for a global volume, (H*W, 2)."""
    h, w = vol.height, vol.width
    hw = h * w
    scores = vol.scores.reshape(hw, hw)
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    idx = (
        (flow.dy + ys).astype(np.int64) * w + (flow.dx + xs).astype(np.int64)
    ).ravel()
    dx, dy = _peak_deltas(scores, idx, idx % w, idx // w, w, h)
    return np.stack([flow.dx.ravel() + dx, flow.dy.ravel() + dy], axis=1)


def _local_parabolic_flow(vol) -> np.ndarray:
    """Sub-cell argmax flow for a local volume, (H*W, 2) in cells."""
    r = vol.radius
    side = 2 * r + 1
    h, w = vol.height, vol.width
    scores = vol.scores.reshape(h * w, side * side)
    idx = np.argmax(scores, axis=1)
    ox = idx % side
    oy = idx // side
    dx, dy = _peak_deltas(scores, idx, ox, oy, side, side)
    return np.stack([ox - r + dx, oy - r + dy], axis=1)


def _median3(plane: np.ndarray) -> np.ndarray:
    """3x3 median; suppresses isolated correlation mismatches."""
    return median_filter(plane, size=3, mode="nearest")


def estimate_homography_stage(ref: ImageBuffer, target: ImageBuffer,
                              cfg: RegistrationConfig) -> Homography:
    """Global-correlation homography fit at the coarsest pyramid level.

    Argmax flow is conditioned before the fit: parabolic sub-cell peak
    refinement, a 3x3 median, and zeroed weights for cells whose flow
    deviates more than 2 cells from its 7x7 median (the least-squares DLT
    cannot absorb the clustered gross mismatches weak texture produces).
    All cell correspondences then enter a confidence-weighted DLT, and a
    single re-fit drops correspondences whose residual exceeds 3 px.
    """
    check_same_canvas(ref, target, "images")
    level = cfg.pyramid_levels - 1
    fr = extract_features(_level_image(luminance(ref), level), FEATURE_DOWNSAMPLE)
    ft = extract_features(_level_image(luminance(target), level), FEATURE_DOWNSAMPLE)
    vol = global_correlation(fr, ft, cfg.patch_size)
    flow = volume_to_flow(vol, cfg.softmax_scale)
    scale_px = FEATURE_DOWNSAMPLE * _level_scale(level)
    ref_pts = _cell_centers_fullres(fr.width, fr.height, level)
    sub = _parabolic_subcell(vol, flow)
    fx = _median3(sub[:, 0].reshape(fr.height, fr.width))
    fy = _median3(sub[:, 1].reshape(fr.height, fr.width))
    deviation = np.hypot(
        fx - median_filter(fx, size=7, mode="nearest"),
        fy - median_filter(fy, size=7, mode="nearest"),
    )
    consistent = (deviation <= 2.0).ravel()
    tgt_pts = ref_pts + scale_px * np.stack([fx.ravel(), fy.ravel()], axis=1)
    wts = flow.confidence.ravel() * consistent
    first = estimate_homography_dlt(ref_pts, tgt_pts, wts)
    resid = np.linalg.norm(apply_homography(first, ref_pts) - tgt_pts, axis=1)
    keep = resid <= RESIDUAL_TRIM_PX
    if int(keep.sum()) < MIN_CORRESPONDENCES:
        raise InsufficientOverlapError(
            f"only {int(keep.sum())} correspondences within "
            f"{RESIDUAL_TRIM_PX} px survive the re-fit"
        )
    return estimate_homography_dlt(ref_pts[keep], tgt_pts[keep], wts[keep])


def _fit_displacements(cells, flow_px, conf, grid: ControlGrid,
                       cfg: RegistrationConfig) -> np.ndarray:
    """Ridge least squares of kernel-weighted control displacements to flow."""
    n_ctrl = (grid.m + 1) * (grid.n + 1)
    if cells.shape[0] == 0:
        return np.zeros((grid.m + 1, grid.n + 1, 2))
    k = dense_basis_matrix(cells, grid, cfg.model, cfg.theta)
    kw = k * conf[:, None]
    gram = k.T @ kw + cfg.ridge * np.eye(n_ctrl)
    rhs = kw.T @ flow_px
    try:
        dp = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("ridge system for the flow fit is singular") from exc
    if not np.all(np.isfinite(dp)):
        raise SingularSystemError("ridge system produced non-finite displacements")
    return dp.reshape(grid.m + 1, grid.n + 1, 2)


def refine_stage(ref: ImageBuffer, target: ImageBuffer, prior: SamplingMap,
                 grid_size, cfg: RegistrationConfig, level: int = 0,
                 stage_weight: float | None = None):
    """One local refinement: robust flow fit then photometric polish.

    The residual flow comes from local correlation of the prior-warped
    target: soft-argmax confidences gate the cells, parabolic peak
    interpolation plus a 3x3 median recover sub-cell flow, and cells whose
    patch footprint touches the warp's invalid region are discarded (the
    content/zero boundary forms artificial edges that match anywhere).
    The ridge fit runs once, drops cells with residual above 3 px, and
    refits; gradient descent on the Charbonnier stage term plus the
    weighted shape penalties then polishes the displacements.

    Returns (ControlGrid, trace) where trace holds (loss, step) per
    accepted descent iteration; the loss sequence never increases.
    """
    check_same_canvas(ref, target, "images")
    m, n = grid_size
    w, h = ref.width, ref.height
    if stage_weight is None:
        stage_weight = cfg.weights.lambda_i[0]
    warped_target, wmask = warp_image(target, prior)
    fr = extract_features(_level_image(luminance(ref), level), FEATURE_DOWNSAMPLE)
    ftw = extract_features(
        _level_image(luminance(warped_target), level), FEATURE_DOWNSAMPLE
    )
    vol = local_correlation(fr, ftw, cfg.search_radius)
    flow = local_volume_to_flow(vol, cfg.local_softmax_scale)
    side = 2 * cfg.search_radius + 1
    conf = flow.confidence.ravel()
    cells = _cell_centers_fullres(fr.width, fr.height, level)
    scale_px = FEATURE_DOWNSAMPLE * _level_scale(level)
    sub = _local_parabolic_flow(vol)
    flow_px = scale_px * np.stack(
        [
            _median3(sub[:, 0].reshape(fr.height, fr.width)).ravel(),
            _median3(sub[:, 1].reshape(fr.height, fr.width)).ravel(),
        ],
        axis=1,
    )
    margin = int(np.ceil(1.5 * scale_px)) + 2
    eroded = minimum_filter(wmask.data, size=2 * margin + 1, mode="constant", cval=0.0)
    coverage, _ = sample_plane(eroded, cells[:, 0], cells[:, 1])
    keep = (conf >= 2.0 / (side * side)) & (coverage > 0.5)
    cells = cells[keep]
    flow_px = flow_px[keep]
    conf = conf[keep]

    grid = ControlGrid.zero(m, n, w, h)
    grid = grid.with_displacements(_fit_displacements(cells, flow_px, conf, grid, cfg))
    if cells.shape[0] >= 2 * MIN_CORRESPONDENCES:
        fitted = dense_basis_matrix(cells, grid, cfg.model, cfg.theta) @ grid.flat_displacements()
        good = np.linalg.norm(fitted - flow_px, axis=1) <= RESIDUAL_TRIM_PX
        if int(good.sum()) >= 2 * MIN_CORRESPONDENCES:
            grid = grid.with_displacements(
                _fit_displacements(cells[good], flow_px[good], conf[good], grid, cfg)
            )

    # Photometric polish at full resolution. The pixel basis is parameter
    # independent, so it is built once and reused every iteration.
    basis_px = dense_basis_matrix(pixel_coords(w, h), grid, cfg.model, cfg.theta)

    def stage_map(g: ControlGrid) -> SamplingMap:
        disp = basis_px @ g.flat_displacements()
        return SamplingMap(
            prior.sx + disp[:, 0].reshape(h, w), prior.sy + disp[:, 1].reshape(h, w)
        )

    _, overlap = warp_image(target, stage_map(grid))
    omega = cfg.weights.omega

    def objective(g: ControlGrid) -> float:
        photo = stage_photometric_loss(ref, target, stage_map(g), charbonnier=True)
        return stage_weight * photo + omega * (
            intra_grid_loss(g) + inter_grid_loss(g, overlap)
        )

    def gradient(g: ControlGrid) -> np.ndarray:
        gp = photometric_grad(ref, target, g, prior, cfg.theta, cfg.model, basis=basis_px)
        return stage_weight * gp + omega * (
            intra_grid_grad(g) + inter_grid_grad(g, overlap)
        )

    current = grid
    f_current = objective(current)
    trace = [(f_current, 0.0)]
    step = cfg.descent_step
    for _ in range(cfg.max_descent_iter):
        grad = gradient(current)
        gmax = float(np.abs(grad).max())
        if gmax < 1e-12:
            break
        direction = grad / (-gmax)
        accepted = False
        while step >= _MIN_STEP:
            candidate = current.with_displacements(
                current.displacements + step * direction
            )
            f_candidate = objective(candidate)
            if f_candidate <= f_current:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = f_current - f_candidate
        current, f_current = candidate, f_candidate
        trace.append((f_current, step))
        if improvement < 1e-10 * max(abs(f_current), 1.0):
            break
        step = min(step * 1.5, cfg.descent_step)
    return current, tuple(trace)


def _model_field(grid: ControlGrid, cfg: RegistrationConfig):
    if cfg.model == "edffd":
        return edffd_field(grid, cfg.theta)
    if cfg.model == "bspline":
        return bspline_ffd_field(grid)
    anchors = grid.flat_anchors()
    return tps_field(anchors, anchors + grid.flat_displacements(), grid.width, grid.height)


def register(ref: ImageBuffer, target: ImageBuffer,
             cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Full pipeline: homography stage, refinements, final warp and metrics."""
    cfg = cfg or RegistrationConfig()
    check_same_canvas(ref, target, "images")
    if ref.width < MIN_REGISTER_SIDE or ref.height < MIN_REGISTER_SIDE:
        raise ValueError(f"images must be at least {MIN_REGISTER_SIDE} px per side")
    w, h = ref.width, ref.height

    t0 = time.perf_counter()
    hom = estimate_homography_stage(ref, target, cfg)
    grids = []
    traces = []
    fields = []
    current = compose_sampling_map(hom, [], w, h)
    for i in range(1, cfg.n_stages + 1):
        level = cfg.n_stages - i
        grid, trace = refine_stage(
            ref,
            target,
            current,
            cfg.stage_grids[i - 1],
            cfg,
            level=level,
            stage_weight=cfg.weights.lambda_i[i - 1],
        )
        grids.append(grid)
        traces.append(trace)
        fields.append(_model_field(grid, cfg))
        current = compose_sampling_map(hom, fields, w, h)
    inference_ms = (time.perf_counter() - t0) * 1000.0

    # Warp phase: evaluate the fields from the fitted parameters alone,
    # compose, and sample; this is the deformation-model output step.
    t1 = time.perf_counter()
    warp_fields = [_model_field(g, cfg) for g in grids]
    final_map = compose_sampling_map(hom, warp_fields, w, h)
    warped, overlap = warp_image(target, final_map)
    warp_ms = (time.perf_counter() - t1) * 1000.0

    psnr = psnr_masked(warped, ref, overlap)
    return RegistrationResult(
        homography=hom,
        grids=tuple(grids),
        sampling_map=final_map,
        warped=warped,
        overlap=overlap,
        loss_trace=tuple(traces),
        psnr_db=psnr,
        inference_ms=inference_ms,
        warp_ms=warp_ms,
        total_ms=inference_ms + warp_ms,
    )


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticPair:
    """Image pair with its generating warp (reference = warped target)."""

    reference: ImageBuffer
    target: ImageBuffer
    homography: Homography
    grid: ControlGrid
    gt_map: SamplingMap
    motion: FourPointMotion


# Value-noise octaves with detail down to the feature scale plus sparse
# Gaussian blobs give photograph-like statistics: globally distinctive
# large-scale structure with locally matchable landmarks. The band-limited
# octave set (no blobs) keeps interpolation kinks small enough for
# central-difference gradient checks.
TEXTURE_OCTAVES = ((32, 1.0), (16, 0.55), (8, 0.3), (4, 0.15))
SMOOTH_OCTAVES = ((32, 1.0), (16, 0.5), (8, 0.22))
_SPOT_AREA = 600


def smooth_texture(rng: np.random.Generator, width: int, height: int,
                   channels: int = 1, octaves=TEXTURE_OCTAVES,
                   spots: bool = True) -> ImageBuffer:
    """Multi-octave value-noise texture with values in [0.05, 0.95]."""

    def octave_stack(r):
        acc = np.zeros((height, width))
        xs, ys = np.meshgrid(
            np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
        )
        for cell, amp in octaves:
            coarse = r.standard_normal((height // cell + 3, width // cell + 3))
            vals, _ = sample_plane(coarse, xs / cell, ys / cell, clamp=True)
            acc += amp * vals
        if spots:
            n_spots = (width * height) // _SPOT_AREA
            cx = r.uniform(0, width, n_spots)
            cy = r.uniform(0, height, n_spots)
            sig = r.uniform(1.5, 5.0, n_spots)
            amp = r.uniform(0.3, 0.8, n_spots) * r.choice([-1.0, 1.0], n_spots)
            for k in range(n_spots):
                x0 = max(int(cx[k] - 3 * sig[k]), 0)
                x1 = min(int(cx[k] + 3 * sig[k]) + 1, width)
                y0 = max(int(cy[k] - 3 * sig[k]), 0)
                y1 = min(int(cy[k] + 3 * sig[k]) + 1, height)
                if x0 >= x1 or y0 >= y1:
                    continue
                gx = xs[y0:y1, x0:x1] - cx[k]
                gy = ys[y0:y1, x0:x1] - cy[k]
                acc[y0:y1, x0:x1] += amp[k] * np.exp(
                    -(gx * gx + gy * gy) / (2.0 * sig[k] * sig[k])
                )
        lo, hi = acc.min(), acc.max()
        return 0.05 + 0.9 * (acc - lo) / max(hi - lo, 1e-12)

    if channels == 1:
        return ImageBuffer(octave_stack(rng))
    base = octave_stack(rng)
    planes = [np.clip(0.75 * base + 0.25 * octave_stack(rng), 0.0, 1.0)
              for _ in range(3)]
    return ImageBuffer(np.stack(planes, axis=2))


def make_synthetic_pair(seed: int, size: int = 256, corner_limit: float = 20.0,
                        dp_limit: float = 5.0, grid_size=(12, 12),
                        theta: float = 0.75, channels: int = 1) -> SyntheticPair:
    """Target texture plus a reference synthesized by a known homography
    composed with a known exponential-decay deformation field.

    The target is cropped from a larger texture so every ground-truth
    source coordinate stays on real content (no invalid border).
    """
    rng = np.random.default_rng(seed)
    margin = int(np.ceil(corner_limit + dp_limit)) + 8
    big = smooth_texture(rng, size + 2 * margin, size + 2 * margin, channels)
    crop = big.data[margin : margin + size, margin : margin + size]
    target = ImageBuffer(crop)
    motion = FourPointMotion(rng.uniform(-corner_limit, corner_limit, size=(4, 2)))
    hom = four_point_to_homography(motion, size, size)
    m, n = grid_size
    grid = ControlGrid(
        m, n, size, size, rng.uniform(-dp_limit, dp_limit, size=(m + 1, n + 1, 2))
    )
    gt_map = compose_sampling_map(hom, [edffd_field(grid, theta)], size, size)
    vals, valid = sample_plane(big.planes, gt_map.sx + margin, gt_map.sy + margin)
    if not valid.all():
        raise ValueError("synthetic warp escaped the texture margin")
    reference = ImageBuffer(np.clip(vals[:, :, 0] if channels == 1 else vals, 0.0, 1.0))
    return SyntheticPair(reference, target, hom, grid, gt_map, motion)


def mean_endpoint_error(est: SamplingMap, gt: SamplingMap, inset: int = 16) -> float:
    """Mean Euclidean gap between two maps over the inset interior."""
    sl = np.s_[inset:-inset, inset:-inset]
    dx = est.sx[sl] - gt.sx[sl]
    dy = est.sy[sl] - gt.sy[sl]
    return float(np.mean(np.sqrt(dx * dx + dy * dy)))


def make_toy_motion_dataset(n: int, seed: int = 0, size: int = 32,
                            downsample: int = 8, patch_size: int = 3,
                            max_motion: float = 3.0):
    """Flattened global correlation volumes paired with the generating
    4-point motion (normalized by ``max_motion``). Used by the toy
    aggregation-head regression harness."""
    rng = np.random.default_rng(seed)
    cells = size // downsample
    feat_dim = (cells * cells) ** 2
    xs = np.empty((n, feat_dim))
    ys = np.empty((n, 8))
    margin = int(np.ceil(max_motion)) + 4
    for i in range(n):
        big = smooth_texture(rng, size + 2 * margin, size + 2 * margin)
        target = ImageBuffer(big.data[margin : margin + size, margin : margin + size])
        motion = FourPointMotion(rng.uniform(-max_motion, max_motion, size=(4, 2)))
        hom = four_point_to_homography(motion, size, size)
        smap = compose_sampling_map(hom, [], size, size)
        vals, _ = sample_plane(big.data, smap.sx + margin, smap.sy + margin)
        reference = ImageBuffer(np.clip(vals, 0.0, 1.0))
        fr = extract_features(reference, downsample)
        ft = extract_features(target, downsample)
        vol = global_correlation(fr, ft, patch_size)
        xs[i] = vol.scores.ravel()
        ys[i] = motion.displacements.ravel() / max_motion
    return xs, ys
