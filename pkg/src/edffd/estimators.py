"""Scikit-learn style facade over the registration pipeline.

``ImageRegistration`` follows the estimator contract: hyperparameters are
stored verbatim in ``__init__`` (so ``get_params``/``set_params``/``clone``
work), validation happens in ``fit``, and fitted state lives in trailing
underscore attributes. ``transform`` warps an image through the fitted
sampling map, which makes registration usable inside standard pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .image import ImageBuffer, psnr_masked
from .pipeline import LossWeights, RegistrationConfig, register
from .warps import warp_image


def _as_image(x, name: str) -> ImageBuffer:
    if isinstance(x, ImageBuffer):
        return x
    return ImageBuffer(np.asarray(x, dtype=np.float64))


class ImageRegistration(BaseEstimator):
    """Homography plus free-form refinement alignment of a target onto a reference.

    Parameters mirror the pipeline configuration: ``n_stages`` refinement
    stages with ``stage_grids`` control lattices, exponential decay factor
    ``theta``, correlation patch size / softmax scale / search radius, loss
    weights, and the descent settings of the photometric polish.

    After ``fit(reference, target)`` the estimator exposes ``homography_``,
    ``grids_``, ``sampling_map_``, ``warped_``, ``overlap_`` and ``result_``.
    """

    def __init__(self, n_stages=1, stage_grids=((12, 12), (18, 18)), theta=0.75,
                 patch_size=3, softmax_scale=10.0, search_radius=4, lambda0=1.0,
                 stage_lambdas=(1.3, 1.7), shape_weight=10.0, pyramid_levels=3,
                 max_descent_iter=100, descent_step=0.5, ridge=1e-3, model="edffd"):
        self.n_stages = n_stages
        self.stage_grids = stage_grids
        self.theta = theta
        self.patch_size = patch_size
        self.softmax_scale = softmax_scale
        self.search_radius = search_radius
        self.lambda0 = lambda0
        self.stage_lambdas = stage_lambdas
        self.shape_weight = shape_weight
        self.pyramid_levels = pyramid_levels
        self.max_descent_iter = max_descent_iter
        self.descent_step = descent_step
        self.ridge = ridge
        self.model = model

    def _config(self) -> RegistrationConfig:
        return RegistrationConfig(
            n_stages=self.n_stages,
            stage_grids=tuple(tuple(g) for g in self.stage_grids),
            theta=self.theta,
            patch_size=self.patch_size,
            softmax_scale=self.softmax_scale,
            search_radius=self.search_radius,
            weights=LossWeights(self.lambda0, tuple(self.stage_lambdas), self.shape_weight),
            pyramid_levels=self.pyramid_levels,
            max_descent_iter=self.max_descent_iter,
            descent_step=self.descent_step,
            ridge=self.ridge,
            model=self.model,
        )

    def fit(self, reference, target):
        """Estimate the warp aligning ``target`` onto ``reference``."""
        ref = _as_image(reference, "reference")
        tgt = _as_image(target, "target")
        result = register(ref, tgt, self._config())
        self.reference_ = ref
        self.target_ = tgt
        self.result_ = result
        self.homography_ = result.homography
        self.grids_ = result.grids
        self.sampling_map_ = result.sampling_map
        self.warped_ = result.warped
        self.overlap_ = result.overlap
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit(reference, target) first")

    def transform(self, image=None):
        """Warp ``image`` (default: the fitted target) by the fitted map."""
        self._check_fitted()
        if image is None:
            return np.asarray(self.warped_.data)
        img = _as_image(image, "image")
        warped, _ = warp_image(img, self.sampling_map_)
        return np.asarray(warped.data)

    def fit_transform(self, reference, target):
        return self.fit(reference, target).transform()

    def score(self, reference=None, target=None):
        """Masked PSNR (dB) of the fitted alignment; refits when a new pair is given."""
        if reference is not None and target is not None:
            self.fit(reference, target)
        self._check_fitted()
        return psnr_masked(self.warped_, self.reference_, self.overlap_)
