"""JSON parameter container shared by the warp models and the motion head.

Document layout (keys are emitted in a fixed order):

    {
      "model": "edffd" | "bspline" | "tps" | "homography" | "asma",
      "canvas": [width, height],
      "H": [9 floats, row-major],            # optional, identity if absent
      "theta": float,                        # edffd only
      "grid": [M, N],                        # grid-based single-stage models
      "displacements": [... 2*(M+1)*(N+1)],  # row-major points, dx dy interleaved
      "stages": [{"grid": ..., "theta": ..., "displacements": ...}, ...],
      "asma": {...}                          # head parameters, model == "asma"
    }

Multi-stage results store one entry per refinement stage under "stages";
single-model documents use the flat grid/displacements keys. Loading a
warpable document yields (canvas, Homography, [DisplacementField, ...]).
"""

from __future__ import annotations

import json
import os

import numpy as np

from .aggregator import AsmaHead, GroupLinear
from .errors import SchemaError
from .warps import (
    ControlGrid,
    DisplacementField,
    Homography,
    bspline_ffd_field,
    edffd_field,
    tps_field,
)

WARP_MODELS = ("edffd", "bspline", "tps", "homography")
ALL_MODELS = WARP_MODELS + ("asma",)


def _require(obj, key, kind=None):
    if key not in obj:
        raise SchemaError(key)
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise SchemaError(key, f"key {key!r} has wrong type")
    return value


def _int_pair(obj, key):
    value = _require(obj, key, list)
    if len(value) != 2 or not all(isinstance(v, int) and v > 0 for v in value):
        raise SchemaError(key, f"key {key!r} must be two positive integers")
    return value


def _float_list(obj, key, length=None):
    value = _require(obj, key, list)
    if not all(isinstance(v, (int, float)) and np.isfinite(v) for v in value):
        raise SchemaError(key, f"key {key!r} must hold finite numbers")
    if length is not None and len(value) != length:
        raise SchemaError(key, f"key {key!r} must have length {length}")
    return [float(v) for v in value]


def _validate_stage(stage, model, index):
    label = f"stages[{index}]"
    if not isinstance(stage, dict):
        raise SchemaError(label, f"{label} must be an object")
    m, n = _int_pair(stage, "grid")
    _float_list(stage, "displacements", 2 * (m + 1) * (n + 1))
    if model == "edffd":
        theta = _require(stage, "theta", (int, float))
        if not theta > 0:
            raise SchemaError("theta", "theta must be positive")


def validate_params(obj) -> str:
    """Check a parsed document against the schema; returns the model name."""
    if not isinstance(obj, dict):
        raise SchemaError("document", "parameter document must be a JSON object")
    model = _require(obj, "model", str)
    if model not in ALL_MODELS:
        raise SchemaError("model", f"unknown model {model!r}")
    if model == "asma":
        head = _require(obj, "asma", dict)
        _require(head, "n_groups", int)
        widths = _require(head, "widths", list)
        if len(widths) != 4 or not all(isinstance(v, int) and v > 0 for v in widths):
            raise SchemaError("widths", "widths must be four positive integers")
        for key in ("gll1_weight", "gll1_bias", "gll2_weight", "gll2_bias",
                    "fusion_weight", "fusion_bias"):
            _float_list(head, key)
        return model
    _int_pair(obj, "canvas")
    if "H" in obj:
        _float_list(obj, "H", 9)
    if model == "homography":
        _float_list(obj, "H", 9)
        return model
    if "stages" in obj:
        stages = _require(obj, "stages", list)
        if not stages:
            raise SchemaError("stages", "stages must be non-empty")
        for i, stage in enumerate(stages):
            _validate_stage(stage, model, i)
        return model
    m, n = _int_pair(obj, "grid")
    _float_list(obj, "displacements", 2 * (m + 1) * (n + 1))
    if model == "edffd":
        theta = _require(obj, "theta", (int, float))
        if not theta > 0:
            raise SchemaError("theta", "theta must be positive")
    return model


def _stage_dict(grid: ControlGrid, model: str, theta: float) -> dict:
    out = {"grid": [grid.m, grid.n]}
    if model == "edffd":
        out["theta"] = float(theta)
    out["displacements"] = [float(v) for v in grid.flat_displacements().ravel()]
    return out


def params_to_dict(model: str, canvas, hom: Homography | None = None,
                   grids=(), theta: float = 0.75) -> dict:
    """Build a schema document from fitted warp parameters."""
    if model not in WARP_MODELS:
        raise ValueError(f"unknown warp model {model!r}")
    doc = {"model": model, "canvas": [int(canvas[0]), int(canvas[1])]}
    if hom is not None:
        doc["H"] = [float(v) for v in hom.h.ravel()]
    grids = list(grids)
    if model == "homography":
        if hom is None:
            raise ValueError("homography document needs H")
        return doc
    if len(grids) == 1:
        doc.update(_stage_dict(grids[0], model, theta))
    elif grids:
        doc["stages"] = [_stage_dict(g, model, theta) for g in grids]
    else:
        raise ValueError("grid-based document needs at least one grid")
    return doc


def asma_to_dict(head: AsmaHead) -> dict:
    return {
        "model": "asma",
        "asma": {
            "n_groups": int(head.gll1.n_groups),
            "widths": [int(v) for v in head.widths],
            "gll1_weight": [float(v) for v in head.gll1.weight.ravel()],
            "gll1_bias": [float(v) for v in head.gll1.bias.ravel()],
            "gll2_weight": [float(v) for v in head.gll2.weight.ravel()],
            "gll2_bias": [float(v) for v in head.gll2.bias.ravel()],
            "fusion_weight": [float(v) for v in head.fusion_weight.ravel()],
            "fusion_bias": [float(v) for v in head.fusion_bias.ravel()],
        },
    }


def asma_from_dict(obj) -> AsmaHead:
    validate_params(obj)
    head = obj["asma"]
    ng = head["n_groups"]
    c0, c1, c2, out = head["widths"]
    gll1 = GroupLinear(
        np.array(head["gll1_weight"]).reshape(ng, c1 // ng, c0 // ng),
        np.array(head["gll1_bias"]).reshape(ng, c1 // ng),
    )
    gll2 = GroupLinear(
        np.array(head["gll2_weight"]).reshape(ng, c2 // ng, c1 // ng),
        np.array(head["gll2_bias"]).reshape(ng, c2 // ng),
    )
    return AsmaHead(
        gll1,
        gll2,
        np.array(head["fusion_weight"]).reshape(out, c2),
        np.array(head["fusion_bias"]),
    )


def _stage_field(stage, model, width, height) -> DisplacementField:
    m, n = stage["grid"]
    disp = np.array(stage["displacements"]).reshape(m + 1, n + 1, 2)
    grid = ControlGrid(m, n, width, height, disp)
    if model == "edffd":
        return edffd_field(grid, float(stage["theta"]))
    if model == "bspline":
        return bspline_ffd_field(grid)
    anchors = grid.flat_anchors()
    return tps_field(anchors, anchors + grid.flat_displacements(), width, height)


def dict_to_warp(obj):
    """Reconstruct ((width, height), Homography, [fields]) from a document.

    Raises SchemaError for non-warp documents (including "asma").
    """
    model = validate_params(obj)
    if model not in WARP_MODELS:
        raise SchemaError("model", f"model {model!r} does not describe an image warp")
    width, height = obj["canvas"]
    hom = Homography(np.array(obj["H"]).reshape(3, 3)) if "H" in obj else Homography.identity()
    if model == "homography":
        return (width, height), hom, []
    stages = obj["stages"] if "stages" in obj else [obj]
    fields = [_stage_field(stage, model, width, height) for stage in stages]
    return (width, height), hom, fields


def save_params(path, obj) -> None:
    """Validate and atomically write a parameter document."""
    validate_params(obj)
    text = json.dumps(obj, indent=1)
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_params(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError("document", f"invalid JSON: {exc}") from exc
    validate_params(obj)
    return obj
