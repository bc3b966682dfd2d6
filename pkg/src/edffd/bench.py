"""Micro-benchmark of the deformation models: field evaluation and warp.

Field evaluation runs the full basis-matrix path for every model so the
kernel costs are directly comparable. Timings are wall-clock medians of N
repeats after one warm-up; peak memory comes from tracemalloc on a
separate untimed run (numpy registers its buffers with tracemalloc), or
is reported as missing when tracing is unavailable.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from statistics import median

import numpy as np

from .image import ImageBuffer
from .warps import (
    ControlGrid,
    Homography,
    bspline_ffd_field,
    compose_sampling_map,
    edffd_field,
    tps_field,
    warp_image,
)

BENCH_MODELS = ("tps", "bspline", "edffd")
CSV_HEADER = "model,width,height,grid_m,grid_n,field_eval_ms,warp_ms,peak_bytes"


@dataclass(frozen=True)
class BenchRow:
    model: str
    width: int
    height: int
    grid_m: int
    grid_n: int
    field_eval_ms: float
    warp_ms: float
    peak_bytes: int | None


def _field_eval(model: str, grid: ControlGrid, theta: float):
    if model == "edffd":
        return edffd_field(grid, theta)
    if model == "bspline":
        return bspline_ffd_field(grid)
    anchors = grid.flat_anchors()
    return tps_field(
        anchors, anchors + grid.flat_displacements(), grid.width, grid.height
    )


def run_benchmark(sizes=((512, 512),), grids=((12, 12),), repeats: int = 5,
                  seed: int = 0, theta: float = 0.75, models=BENCH_MODELS):
    """One row per (model, size, grid); all models see identical inputs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for width, height in sizes:
        for m, n in grids:
            rng = np.random.default_rng(seed)
            disp = rng.uniform(-4.0, 4.0, size=(m + 1, n + 1, 2))
            grid = ControlGrid(m, n, width, height, disp)
            img = ImageBuffer(rng.uniform(size=(height, width)))
            hom = Homography.identity()
            for model in models:
                _field_eval(model, grid, theta)  # warm-up
                field_times = []
                warp_times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fld = _field_eval(model, grid, theta)
                    t1 = time.perf_counter()
                    smap = compose_sampling_map(hom, [fld], width, height)
                    warp_image(img, smap)
                    t2 = time.perf_counter()
                    field_times.append((t1 - t0) * 1000.0)
                    warp_times.append((t2 - t1) * 1000.0)
                peak = _measure_peak(model, grid, theta)
                rows.append(
                    BenchRow(
                        model,
                        width,
                        height,
                        m,
                        n,
                        median(field_times),
                        median(warp_times),
                        peak,
                    )
                )
    return rows


def _measure_peak(model: str, grid: ControlGrid, theta: float):
    was_tracing = tracemalloc.is_tracing()
    try:
        if not was_tracing:
            tracemalloc.start()
        tracemalloc.reset_peak()
        _field_eval(model, grid, theta)
        _, peak = tracemalloc.get_traced_memory()
        return int(peak) if peak > 0 else None
    except Exception:
        return None
    finally:
        if not was_tracing and tracemalloc.is_tracing():
            tracemalloc.stop()


def rows_to_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        peak = "n/a" if r.peak_bytes is None else str(r.peak_bytes)
        lines.append(
            f"{r.model},{r.width},{r.height},{r.grid_m},{r.grid_n},"
            f"{r.field_eval_ms:.3f},{r.warp_ms:.3f},{peak}"
        )
    return "\n".join(lines) + "\n"
