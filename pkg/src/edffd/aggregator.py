"""Grouped-linear motion-aggregation heads with manual forward/backward.

The sparse head chains two group linear layers (independent affine maps on
contiguous feature groups, concatenated and rectified) into a dense fusion
layer that emits motion parameters. A width-matched dense MLP baseline and
a plain SGD toy trainer allow the parameter/accuracy trade-off to be
measured at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, NotDivisibleError, WidthMismatchError
from .validation import as_float_array


@dataclass
class GroupLinear:
    """Per-group weights (n_groups, out_per_group, in_per_group) and biases."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = as_float_array(self.weight, "weight")
        self.bias = as_float_array(self.bias, "bias")
        if self.weight.ndim != 3 or self.bias.shape != self.weight.shape[:2]:
            raise WidthMismatchError("weight must be (groups, out, in) with matching bias")

    @property
    def n_groups(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[0] * self.weight.shape[2]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0] * self.weight.shape[1]

    @classmethod
    def init(cls, in_features: int, out_features: int, n_groups: int,
             rng: np.random.Generator) -> "GroupLinear":
        if in_features % n_groups or out_features % n_groups:
            raise NotDivisibleError(
                f"widths {in_features}->{out_features} not divisible by {n_groups} groups"
            )
        c_in = in_features // n_groups
        c_out = out_features // n_groups
        limit = np.sqrt(6.0 / (c_in + c_out))
        weight = rng.uniform(-limit, limit, size=(n_groups, c_out, c_in))
        return cls(weight, np.zeros((n_groups, c_out)))


def _as_batch(x) -> tuple:
    arr = as_float_array(x, "input")
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError("input must be a vector or a (batch, features) matrix")


def _gll_preact(x: np.ndarray, layer: GroupLinear) -> np.ndarray:
    b, c = x.shape
    if c != layer.in_features:
        raise NotDivisibleError(
            f"input width {c} does not match layer width {layer.in_features}"
        )
    xg = x.reshape(b, layer.n_groups, -1)
    pre = np.einsum("goi,bgi->bgo", layer.weight, xg) + layer.bias[None]
    return pre.reshape(b, -1)


def gll_forward(x, layer: GroupLinear) -> np.ndarray:
    """Split into groups, apply each group's affine map, concatenate, rectify."""
    xb, squeeze = _as_batch(x)
    out = np.maximum(_gll_preact(xb, layer), 0.0)
    return out[0] if squeeze else out


@dataclass
class AsmaHead:
    """Two group linear layers followed by a dense fusion layer (no final ReLU)."""

    gll1: GroupLinear
    gll2: GroupLinear
    fusion_weight: np.ndarray
    fusion_bias: np.ndarray

    def __post_init__(self):
        self.fusion_weight = as_float_array(self.fusion_weight, "fusion weight")
        self.fusion_bias = as_float_array(self.fusion_bias, "fusion bias")
        if self.gll1.out_features != self.gll2.in_features:
            raise WidthMismatchError("gll1 output width must equal gll2 input width")
        if self.fusion_weight.shape != (self.fusion_bias.shape[0], self.gll2.out_features):
            raise WidthMismatchError("fusion layer width does not chain after gll2")

    @property
    def widths(self) -> tuple:
        return (
            self.gll1.in_features,
            self.gll1.out_features,
            self.gll2.out_features,
            self.fusion_bias.shape[0],
        )

    @classmethod
    def init(cls, widths, n_groups: int, seed: int = 0) -> "AsmaHead":
        c0, c1, c2, out = widths
        rng = np.random.default_rng(seed)
        gll1 = GroupLinear.init(c0, c1, n_groups, rng)
        gll2 = GroupLinear.init(c1, c2, n_groups, rng)
        limit = np.sqrt(6.0 / (c2 + out))
        fusion_w = rng.uniform(-limit, limit, size=(out, c2))
        return cls(gll1, gll2, fusion_w, np.zeros(out))


@dataclass
class MlpHead:
    """Three dense layers with rectifiers between them; same widths as AsmaHead."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        self.weights = tuple(as_float_array(w, "weight") for w in self.weights)
        self.biases = tuple(as_float_array(b, "bias") for b in self.biases)
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise WidthMismatchError("an MLP head has exactly three layers")
        for k in range(2):
            if self.weights[k + 1].shape[1] != self.weights[k].shape[0]:
                raise WidthMismatchError("layer widths do not chain")

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @classmethod
    def init(cls, widths, seed: int = 0) -> "MlpHead":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (c_in + c_out))
            ws.append(rng.uniform(-limit, limit, size=(c_out, c_in)))
            bs.append(np.zeros(c_out))
        return cls(tuple(ws), tuple(bs))


def asma_forward(x, head: AsmaHead) -> np.ndarray:
    """gll1 -> gll2 -> dense fusion; fusion output is the raw motion vector."""
    xb, squeeze = _as_batch(x)
    h1 = np.maximum(_gll_preact(xb, head.gll1), 0.0)
    h2 = np.maximum(_gll_preact(h1, head.gll2), 0.0)
    out = h2 @ head.fusion_weight.T + head.fusion_bias
    return out[0] if squeeze else out


def mlp_forward(x, head: MlpHead) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    h = xb
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        h = h @ w.T + b
        if k < 2:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def _gll_backward(x, layer: GroupLinear, pre, d_out):
    d_pre = d_out * (pre > 0.0)
    b = x.shape[0]
    dg = d_pre.reshape(b, layer.n_groups, -1)
    xg = x.reshape(b, layer.n_groups, -1)
    d_weight = np.einsum("bgo,bgi->goi", dg, xg)
    d_bias = dg.sum(axis=0)
    d_x = np.einsum("goi,bgo->bgi", layer.weight, dg).reshape(b, -1)
    return d_x, d_weight, d_bias


def asma_backward(x, head: AsmaHead, upstream):
    """Exact reverse-mode gradients of asma_forward.

    Returns (input gradient, dict of parameter gradients keyed
    gll1_weight/gll1_bias/gll2_weight/gll2_bias/fusion_weight/fusion_bias).
    """
    xb, squeeze = _as_batch(x)
    ub, _ = _as_batch(upstream)
    if ub.shape != (xb.shape[0], head.fusion_bias.shape[0]):
        raise WidthMismatchError("upstream gradient width does not match the head output")
    pre1 = _gll_preact(xb, head.gll1)
    h1 = np.maximum(pre1, 0.0)
    pre2 = _gll_preact(h1, head.gll2)
    h2 = np.maximum(pre2, 0.0)
    d_fusion_w = ub.T @ h2
    d_fusion_b = ub.sum(axis=0)
    d_h2 = ub @ head.fusion_weight
    d_h1, d_w2, d_b2 = _gll_backward(h1, head.gll2, pre2, d_h2)
    d_x, d_w1, d_b1 = _gll_backward(xb, head.gll1, pre1, d_h1)
    grads = {
        "gll1_weight": d_w1,
        "gll1_bias": d_b1,
        "gll2_weight": d_w2,
        "gll2_bias": d_b2,
        "fusion_weight": d_fusion_w,
        "fusion_bias": d_fusion_b,
    }
    return (d_x[0] if squeeze else d_x), grads


def mlp_backward(x, head: MlpHead, upstream):
    xb, squeeze = _as_batch(x)
    ub, _ = _as_batch(upstream)
    acts = [xb]
    pres = []
    h = xb
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        pre = h @ w.T + b
        pres.append(pre)
        h = np.maximum(pre, 0.0) if k < 2 else pre
        acts.append(h)
    d = ub
    d_ws = [None] * 3
    d_bs = [None] * 3
    for k in range(2, -1, -1):
        if k < 2:
            d = d * (pres[k] > 0.0)
        d_ws[k] = d.T @ acts[k]
        d_bs[k] = d.sum(axis=0)
        d = d @ head.weights[k]
    grads = {"weights": tuple(d_ws), "biases": tuple(d_bs)}
    return (d[0] if squeeze else d), grads


def param_count(head):
    """Exact (weights, biases) counts for either head type."""
    if isinstance(head, AsmaHead):
        weights = head.gll1.weight.size + head.gll2.weight.size + head.fusion_weight.size
        biases = head.gll1.bias.size + head.gll2.bias.size + head.fusion_bias.size
        return int(weights), int(biases)
    if isinstance(head, MlpHead):
        return (
            int(sum(w.size for w in head.weights)),
            int(sum(b.size for b in head.biases)),
        )
    raise TypeError("expected an AsmaHead or MlpHead")


def _forward_backward(head, xb, yb):
    if isinstance(head, AsmaHead):
        pred = asma_forward(xb, head)
        upstream = 2.0 * (pred - yb) / pred.size
        _, grads = asma_backward(xb, head, upstream)
        return pred, grads
    pred = mlp_forward(xb, head)
    upstream = 2.0 * (pred - yb) / pred.size
    _, grads = mlp_backward(xb, head, upstream)
    return pred, grads


def _apply_sgd(head, grads, velocity, lr, momentum):
    if isinstance(head, AsmaHead):
        params = {
            "gll1_weight": head.gll1.weight,
            "gll1_bias": head.gll1.bias,
            "gll2_weight": head.gll2.weight,
            "gll2_bias": head.gll2.bias,
            "fusion_weight": head.fusion_weight,
            "fusion_bias": head.fusion_bias,
        }
        for key, p in params.items():
            velocity[key] = momentum * velocity.get(key, 0.0) - lr * grads[key]
            p += velocity[key]
    else:
        for kind in ("weights", "biases"):
            for k, p in enumerate(getattr(head, kind)):
                key = f"{kind}{k}"
                velocity[key] = momentum * velocity.get(key, 0.0) - lr * grads[kind][k]
                p += velocity[key]


def train_toy_regressor(dataset, head, epochs: int, lr: float, momentum: float = 0.9,
                        batch_size: int = 32, holdout: float = 0.2, seed: int = 0):
    """Mini-batch SGD (momentum 0.9) on MSE; returns (head, held-out MSE).

    The trailing ``holdout`` fraction of the dataset is never trained on.
    Shuffling uses a fixed seed so runs are reproducible.
    """
    x, y = dataset
    x = as_float_array(x, "features")
    y = as_float_array(y, "targets")
    if x.shape[0] != y.shape[0] or x.ndim != 2 or y.ndim != 2:
        raise ValueError("dataset must be matching (n, d) feature/target matrices")
    n_hold = max(int(round(x.shape[0] * holdout)), 1)
    n_train = x.shape[0] - n_hold
    if n_train < 1:
        raise ValueError("dataset too small for the requested holdout")
    x_tr, y_tr = x[:n_train], y[:n_train]
    x_ho, y_ho = x[n_train:], y[n_train:]
    rng = np.random.default_rng(seed)
    velocity = {}
    forward = asma_forward if isinstance(head, AsmaHead) else mlp_forward
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            sel = order[start : start + batch_size]
            pred, grads = _forward_backward(head, x_tr[sel], y_tr[sel])
            if not np.all(np.isfinite(pred)):
                raise DivergenceError("training loss became non-finite")
            _apply_sgd(head, grads, velocity, lr, momentum)
    resid = forward(x_ho, head) - y_ho
    mse = float(np.mean(resid * resid))
    if not np.isfinite(mse):
        raise DivergenceError("held-out loss is non-finite")
    return head, mse
