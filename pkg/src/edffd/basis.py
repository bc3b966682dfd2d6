"""Scalar kernels underlying the two free-form deformation variants.

``cubic_bspline`` and ``bspline_basis_product`` form the classic cubic
B-spline basis; ``exp_decay_weight`` is the single-expression exponential
kernel that replaces it in the exponential-decay model. All three accept
scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveScaleError


@dataclass(frozen=True)
class KernelConfig:
    """Decay factor and control-grid spacing (pixels) of the exponential kernel."""

    theta: float
    eta: float

    def __post_init__(self):
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise NonPositiveScaleError(f"theta must be positive, got {self.theta!r}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise NonPositiveScaleError(f"eta must be positive, got {self.eta!r}")

    @property
    def scale(self) -> float:
        return self.theta * self.eta


def cubic_bspline(u):
    """Cubic B-spline: 2/3 - u^2 + |u|^3/2 on [0,1], (2-|u|)^3/6 on [1,2), else 0.

    Horner-form polynomials on |u|; symmetric, C2, zero outside |u| < 2.
    """
    a = np.abs(np.asarray(u, dtype=np.float64))
    inner = 2.0 / 3.0 + a * a * (0.5 * a - 1.0)
    t = 2.0 - a
    outer = t * t * t / 6.0
    out = np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))
    return float(out) if np.ndim(u) == 0 else out


def bspline_basis_product(u1, u2):
    """Separable 2-D weight: cubic_bspline(u1) * cubic_bspline(u2)."""
    return cubic_bspline(u1) * cubic_bspline(u2)


def exp_decay_weight(r, cfg: KernelConfig):
    """exp(-r / (theta * eta)); one closed form for every r >= 0, no branching."""
    scale = cfg.theta * cfg.eta
    if not scale > 0:
        raise NonPositiveScaleError(f"theta * eta must be positive, got {scale!r}")
    rr = np.asarray(r, dtype=np.float64)
    if np.any(rr < 0):
        raise ValueError("distance r must be nonnegative")
    out = np.exp(-rr / scale)
    return float(out) if np.ndim(r) == 0 else out
