"""Built-in property suite behind the ``selfcheck`` command.

Each check returns (name, ok, detail). The suite covers the module
invariants at reduced scale plus a synthetic-registration acceptance run,
so a packaged install can be validated without the test tree.

Test hook: setting ``EDFFD_SELFCHECK_MUTATE=beta3`` perturbs the basis
constant used by the partition-of-unity check, which must then fail; this
exists to prove the suite can detect a corrupted kernel.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import basis
from .aggregator import AsmaHead, MlpHead, asma_backward, asma_forward, param_count
from .correlation import (
    extract_features,
    global_correlation,
    local_correlation,
    local_volume_to_flow,
    volume_to_flow,
)
from .energies import (
    LossWeights,
    content_loss,
    inter_grid_loss,
    intra_grid_loss,
    photometric_grad,
    stage_photometric_loss,
    total_loss,
)
from .image import ImageBuffer, Mask, build_pyramid, psnr_masked, sample_bilinear
from .pipeline import (
    RegistrationConfig,
    make_synthetic_pair,
    mean_endpoint_error,
    register,
    smooth_texture,
)
from .serialize import params_to_dict, save_params
from .warps import (
    ControlGrid,
    FourPointMotion,
    Homography,
    SamplingMap,
    bspline_ffd_field,
    compose_sampling_map,
    edffd_basis_matrix,
    edffd_field,
    four_point_to_homography,
    identity_sampling_map,
    invert_homography,
    warp_image,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _beta3():
    if os.environ.get("EDFFD_SELFCHECK_MUTATE", "") == "beta3":
        return lambda u: basis.cubic_bspline(u) + 1e-3
    return basis.cubic_bspline


def _check_partition_of_unity():
    beta = _beta3()
    u = np.linspace(0.0, 1.0, 2001, endpoint=False)
    total = sum(beta(u - k) for k in (-1, 0, 1, 2))
    err = float(np.abs(total - 1.0).max())
    return err < 1e-12, f"max |sum-1| = {err:.3e}"


def _check_basis_values():
    beta = _beta3()
    pairs = [(0.0, 2.0 / 3.0), (1.0, 1.0 / 6.0), (0.5, 0.4791666666666667),
             (1.5, 0.020833333333333332), (2.0, 0.0), (-3.0, 0.0)]
    err = max(abs(beta(u) - v) for u, v in pairs)
    return err < 1e-15, f"max value error = {err:.3e}"


def _check_exp_kernel():
    cfg = basis.KernelConfig(0.75, 20.0)
    r = np.linspace(0.0, 200.0, 500)
    w = basis.exp_decay_weight(r, cfg)
    mono = bool(np.all(np.diff(w) < 0))
    closed = float(np.abs(w - np.exp(-r / cfg.scale)).max())
    ok = mono and closed == 0.0 and basis.exp_decay_weight(0.0, cfg) == 1.0
    return ok, f"monotone={mono}, closed-form gap={closed:.1e}"


def _check_bilinear():
    rng = np.random.default_rng(11)
    img = ImageBuffer(rng.uniform(size=(9, 7)))
    vals, ok1 = sample_bilinear(img, 3.0, 5.0)
    lattice = abs(vals[0] - img.data[5, 3]) < 1e-15 and ok1
    _, ok2 = sample_bilinear(img, -0.5, 2.0)
    return lattice and not ok2, "lattice exactness and out-of-canvas invalidation"


def _check_pyramid():
    img = ImageBuffer(np.full((64, 48), 0.625))
    pyr = build_pyramid(img, 3)
    err = max(float(np.abs(level.data - 0.625).max()) for level in pyr.levels)
    return err == 0.0, f"constant drift = {err:.1e}"


def _check_field_oracles():
    rng = np.random.default_rng(5)
    grid = ControlGrid(4, 4, 32, 32, rng.uniform(-2, 2, size=(5, 5, 2)))
    worst = 0.0
    for name, field, weight in (
        ("bspline", bspline_ffd_field(grid), "bspline"),
        ("edffd", edffd_field(grid, 0.75), "edffd"),
    ):
        ref = np.zeros((32, 32, 2))
        xs, ys = np.meshgrid(np.arange(32.0), np.arange(32.0))
        sx, sy = grid.spacing
        eta = 0.75 * min(sx, sy)
        for i in range(5):
            for j in range(5):
                ax, ay = j * sx, i * sy
                if weight == "bspline":
                    wgt = basis.cubic_bspline((xs - ax) / sx) * basis.cubic_bspline(
                        (ys - ay) / sy
                    )
                else:
                    wgt = np.exp(-np.hypot(xs - ax, ys - ay) / eta)
                ref[:, :, 0] += wgt * grid.displacements[i, j, 0]
                ref[:, :, 1] += wgt * grid.displacements[i, j, 1]
        gap = max(
            float(np.abs(field.dx - ref[:, :, 0]).max()),
            float(np.abs(field.dy - ref[:, :, 1]).max()),
        )
        worst = max(worst, gap)
    return worst < 1e-6, f"max |field - double sum| = {worst:.2e}"


def _check_constant_reproduction():
    grid = ControlGrid(6, 6, 48, 48, np.tile([1.5, -0.75], (7, 7, 1)))
    bs = bspline_ffd_field(grid)
    sl = np.s_[16:32, 16:32]
    bs_err = max(
        float(np.abs(bs.dx[sl] - 1.5).max()), float(np.abs(bs.dy[sl] + 0.75).max())
    )
    ed = edffd_field(grid, 0.75)
    ed_dev = float(np.abs(ed.dx - 1.5).max())
    return bs_err < 1e-12 and ed_dev > 0.0, (
        f"bspline interior error {bs_err:.1e}; edffd deviation {ed_dev:.3f} > 0"
    )


def _check_identity_warp():
    rng = np.random.default_rng(3)
    img = smooth_texture(rng, 96, 96)
    hom = four_point_to_homography(FourPointMotion.zero(), 96, 96)
    grid = ControlGrid.zero(5, 5, 96, 96)
    smap = compose_sampling_map(hom, [edffd_field(grid, 0.75)], 96, 96)
    warped, _ = warp_image(img, smap)
    interior = np.zeros((96, 96))
    interior[2:-2, 2:-2] = 1.0
    val = psnr_masked(warped, img, Mask(interior))
    return val > 50.0, f"interior PSNR = {val if val != math.inf else 'inf'}"


def _check_homography_roundtrip():
    rng = np.random.default_rng(7)
    motion = FourPointMotion(rng.uniform(-10, 10, size=(4, 2)))
    hom = four_point_to_homography(motion, 128, 128)
    prod = hom.h @ invert_homography(hom).h
    prod = prod / prod[2, 2]
    err = float(np.abs(prod - np.eye(3)).max())
    return err < 1e-9, f"|H Hinv - I| = {err:.2e}"


def _check_correlation_recovery():
    rng = np.random.default_rng(13)
    feats = rng.standard_normal((16, 16, 8))
    feats /= np.linalg.norm(feats, axis=2, keepdims=True)
    from .correlation import FeatureMap

    shift = 2
    shifted = np.zeros_like(feats)
    shifted[:, shift:, :] = feats[:, : 16 - shift, :]
    vol = global_correlation(FeatureMap(feats), FeatureMap(shifted), 3)
    flow = volume_to_flow(vol, 10.0)
    core = np.s_[4:12, 4:12]
    ok_g = bool(
        np.all(flow.dx[core] == shift) and np.all(flow.dy[core] == 0)
    )
    lvol = local_correlation(FeatureMap(feats), FeatureMap(shifted), 4)
    arg = np.argmax(lvol.scores, axis=2)
    off = arg[core] % 9 - 4
    ok_l = bool(np.all(off == shift))
    return ok_g and ok_l, f"global={ok_g}, local={ok_l} for +{shift} cell shift"


def _check_softmax_flow():
    rng = np.random.default_rng(17)
    feats = rng.standard_normal((8, 8, 6))
    from .correlation import FeatureMap, LocalCorrelationVolume

    fm = FeatureMap(feats / np.linalg.norm(feats, axis=2, keepdims=True))
    vol = global_correlation(fm, fm, 1)
    flow = volume_to_flow(vol, 10.0)
    zero = bool(np.all(flow.dx == 0) and np.all(flow.dy == 0))
    # Mirror-symmetric window scores must give exactly zero soft-argmax flow.
    sym = rng.uniform(size=(3, 3, 5, 5))
    sym = 0.5 * (sym + sym[:, :, ::-1, ::-1])
    lflow = local_volume_to_flow(LocalCorrelationVolume(sym.reshape(3, 3, 25), 2), 10.0)
    bias = max(float(np.abs(lflow.dx).max()), float(np.abs(lflow.dy).max()))
    return zero and bias < 1e-12, f"self-flow zero={zero}, symmetric bias {bias:.1e}"


def _check_losses():
    grid = ControlGrid.zero(4, 4, 64, 64)
    a = intra_grid_loss(grid)
    b = inter_grid_loss(grid, Mask(np.zeros((64, 64))))
    lin = abs(total_loss(3.0, 0.2, 10.0) - 5.0)
    rng = np.random.default_rng(23)
    ref = ImageBuffer(rng.uniform(size=(32, 32)))
    hom = Homography.identity()
    val = content_loss(ref, ref, hom, [identity_sampling_map(32, 32)],
                       LossWeights(1.0, (1.0,), 10.0))
    return a == 0.0 and b == 0.0 and lin == 0.0 and val < 1e-12, (
        f"undeformed intra={a}, inter={b}, self content={val:.1e}"
    )


def _check_photometric_grad():
    rng = np.random.default_rng(29)
    ref = smooth_texture(rng, 32, 32)
    target = smooth_texture(rng, 32, 32)
    shrink = FourPointMotion(np.array([[3.0, 3.0], [-3.0, 3.0], [3.0, -3.0], [-3.0, -3.0]]))
    prior_h = four_point_to_homography(shrink, 32, 32)
    prior = compose_sampling_map(prior_h, [], 32, 32)
    grid = ControlGrid(4, 4, 32, 32, rng.uniform(-1.5, 1.5, (5, 5, 2)))
    analytic = photometric_grad(ref, target, grid, prior, 0.75)
    step = 1e-3
    fd = np.zeros_like(analytic)
    from .energies import dense_basis_matrix
    from .warps import pixel_coords

    bas = dense_basis_matrix(pixel_coords(32, 32), grid, "edffd", 0.75)

    def loss_at(d):
        disp = bas @ d.reshape(-1, 2)
        smap = SamplingMap(prior.sx + disp[:, 0].reshape(32, 32),
                           prior.sy + disp[:, 1].reshape(32, 32))
        return stage_photometric_loss(ref, target, smap, charbonnier=True)

    for idx in np.ndindex(fd.shape):
        d = grid.displacements.copy()
        d[idx] += step
        hi = loss_at(d)
        d[idx] -= 2 * step
        lo = loss_at(d)
        fd[idx] = (hi - lo) / (2 * step)
    rel = float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-300))
    return rel < 1e-4, f"relative gradient error = {rel:.2e}"


def _check_asma():
    head = AsmaHead.init((32, 32, 16, 4), 4, seed=1)
    rng = np.random.default_rng(31)
    x = rng.standard_normal(32)
    up = rng.standard_normal(4)
    _, grads = asma_backward(x, head, up)
    step = 1e-6
    w = head.gll1.weight
    fd = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        w[idx] += step
        hi = float(asma_forward(x, head) @ up)
        w[idx] -= 2 * step
        lo = float(asma_forward(x, head) @ up)
        w[idx] += step
        fd[idx] = (hi - lo) / (2 * step)
    rel = float(np.linalg.norm(grads["gll1_weight"] - fd) / max(np.linalg.norm(fd), 1e-300))
    weights_a, _ = param_count(head)
    weights_m, _ = param_count(MlpHead.init((32, 32, 16, 4), seed=1))
    return rel < 1e-5 and weights_a < weights_m, (
        f"gll1 grad rel err {rel:.2e}; params {weights_a} < {weights_m}"
    )


def _check_registration(emit_dir=None):
    cfg = RegistrationConfig(n_stages=1, max_descent_iter=60)
    worst_epe = 0.0
    worst_gain = math.inf
    for seed in (101, 202):
        pair = make_synthetic_pair(seed, size=192, corner_limit=12.0, dp_limit=4.0)
        result = register(pair.reference, pair.target, cfg)
        epe = mean_endpoint_error(result.sampling_map, pair.gt_map)
        base = psnr_masked(pair.reference, pair.target, Mask.full(192, 192))
        gain = result.psnr_db - base
        worst_epe = max(worst_epe, epe)
        worst_gain = min(worst_gain, gain)
        if emit_dir is not None:
            _emit_fixture(emit_dir, seed, pair)
    ok = worst_epe < 1.0 and worst_gain >= 10.0
    return ok, f"worst mean EPE {worst_epe:.3f} px, worst PSNR gain {worst_gain:.1f} dB"


def _emit_fixture(emit_dir, seed, pair):
    from .image import save_image

    os.makedirs(emit_dir, exist_ok=True)
    save_image(pair.reference, os.path.join(emit_dir, f"ref_{seed}.png"))
    save_image(pair.target, os.path.join(emit_dir, f"tgt_{seed}.png"))
    doc = params_to_dict(
        "edffd",
        (pair.reference.width, pair.reference.height),
        pair.homography,
        [pair.grid],
        0.75,
    )
    save_params(os.path.join(emit_dir, f"gt_{seed}.json"), doc)


_CHECKS = (
    ("basis partition of unity", _check_partition_of_unity),
    ("basis knot values", _check_basis_values),
    ("exponential kernel decay", _check_exp_kernel),
    ("bilinear sampling", _check_bilinear),
    ("pyramid constant mean", _check_pyramid),
    ("field double-sum oracles", _check_field_oracles),
    ("constant-grid reproduction", _check_constant_reproduction),
    ("identity warp contract", _check_identity_warp),
    ("homography inverse", _check_homography_roundtrip),
    ("correlation shift recovery", _check_correlation_recovery),
    ("softmax flow sanity", _check_softmax_flow),
    ("loss zeros and linearity", _check_losses),
    ("photometric gradient", _check_photometric_grad),
    ("aggregation head", _check_asma),
)


def run_selfchecks(emit_dir=None, include_registration: bool = True):
    """Run every check; returns a list of CheckResult."""
    results = []
    for name, fn in _CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    if include_registration:
        try:
            ok, detail = _check_registration(emit_dir)
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult("synthetic registration", bool(ok), detail))
    return results
