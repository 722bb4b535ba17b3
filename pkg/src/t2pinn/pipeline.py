"""Voxel-wise fitting over an image series.

Each masked-in voxel is fitted independently. PINN voxels draw their
initialization from ``SeedSequence([cfg.seed, row, col])``, so a map does not
depend on the visiting order or on how many worker threads share the work.
The numba kernels release the GIL, which lets a thread pool scale.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from enum import Enum, IntEnum
from typing import Callable

import numpy as np

from .lsq import LsqOptions, fit_lsq
from .net import MlpParams, n_params
from .result import FitError
from .signal import ImageSeries
from .trainer import CollocationGrid, LossWeights, TrainConfig, TrainedVoxel, fit_voxel


class EmptyMaskWarning(UserWarning):
    pass


class MapKind(str, Enum):
    T2 = "t2"
    M0 = "m0"
    DIFF = "diff"
    RESIDUAL = "residual"


class VoxelStatus(IntEnum):
    OK = 0
    MAX_ITERS = 1  # PINN ran the full iteration budget; estimate is valid
    MASKED = 2
    DEGENERATE = 3
    NON_DECAYING = 4
    REJECTED = 5
    NON_FINITE = 6
    NOT_CONVERGED = 7  # Gauss-Newton hit its iteration cap; estimate is valid
    SINGULAR = 8
    FIT_ERROR = 9


VALID_STATUS = (VoxelStatus.OK, VoxelStatus.MAX_ITERS, VoxelStatus.NOT_CONVERGED)

_ERROR_STATUS = {
    "degenerate": VoxelStatus.DEGENERATE,
    "non_decaying": VoxelStatus.NON_DECAYING,
    "rejected": VoxelStatus.REJECTED,
}
_RESULT_STATUS = {
    "ok": VoxelStatus.OK,
    "converged": VoxelStatus.OK,
    "max_iters": VoxelStatus.MAX_ITERS,
    "non_finite": VoxelStatus.NON_FINITE,
    "not_converged": VoxelStatus.NOT_CONVERGED,
    "singular": VoxelStatus.SINGULAR,
}


@dataclass
class ParameterMap:
    """Row-major scalar map; entries outside ``mask`` are NaN."""

    values: np.ndarray
    mask: np.ndarray
    kind: MapKind

    def __post_init__(self):
        self.kind = MapKind(self.kind)
        self.values = np.array(self.values, dtype=np.float64)
        self.mask = np.array(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        self.values[~self.mask] = np.nan

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape

    def masked(self) -> np.ndarray:
        return self.values[self.mask]


@dataclass
class TrainedField:
    """One trained network per masked-in voxel.

    Row ``i`` of every array belongs to voxel ``coords[i]``. Each voxel keeps
    its own input scale, signal scale and trained interval.
    """

    dims: tuple[int, int]
    width: int
    coords: np.ndarray  # (n, 2) int
    params: np.ndarray  # (n, n_params(width)) flat trainables
    t_scale: np.ndarray
    scale: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray

    def __post_init__(self):
        self.dims = (int(self.dims[0]), int(self.dims[1]))
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        n = self.coords.shape[0]
        self.params = np.asarray(self.params, dtype=np.float64).reshape(n, n_params(self.width))
        for name in ("t_scale", "scale", "t_lo", "t_hi"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(n)
            setattr(self, name, arr)
        if n and (self.coords.min() < 0 or np.any(self.coords.max(axis=0) >= self.dims)):
            raise ValueError("voxel coordinates outside the field dims")
        if len({tuple(c) for c in self.coords.tolist()}) != n:
            raise ValueError("each voxel may carry only one parameter set")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.dims, dtype=bool)
        m[self.coords[:, 0], self.coords[:, 1]] = True
        return m

    def voxel(self, i: int) -> TrainedVoxel:
        p = MlpParams.from_flat(self.params[i], self.width, self.t_scale[i])
        return TrainedVoxel(p, float(self.scale[i]), float(self.t_lo[i]), float(self.t_hi[i]))

    @classmethod
    def from_models(cls, dims, width: int, coords, models: list[TrainedVoxel]) -> TrainedField:
        n = len(models)
        return cls(
            dims,
            width,
            np.asarray(coords, dtype=np.int64).reshape(n, 2),
            np.array([m.params.to_flat() for m in models]).reshape(n, n_params(width)),
            np.array([m.params.t_scale for m in models]),
            np.array([m.scale for m in models]),
            np.array([m.t_lo for m in models]),
            np.array([m.t_hi for m in models]),
        )


@dataclass
class MapResult:
    t2: ParameterMap
    m0: ParameterMap
    residual: ParameterMap  # per-voxel mean absolute data misfit, signal units
    status: np.ndarray  # uint8 VoxelStatus codes
    iters: np.ndarray
    field: TrainedField | None = None
    wall_time: float = 0.0
    method: str = ""
    results: dict = dc_field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        codes, counts = np.unique(self.status, return_counts=True)
        fitted = np.isin(self.status, [int(s) for s in VALID_STATUS])
        return {
            "method": self.method,
            "wall_time_s": self.wall_time,
            "voxels_fitted": int(fitted.sum()),
            "status_counts": {VoxelStatus(int(c)).name.lower(): int(n) for c, n in zip(codes, counts)},
            "iters_mean": float(self.iters[fitted].mean()) if fitted.any() else 0.0,
            "converged": int(np.sum(self.status == VoxelStatus.OK)),
        }


def build_mask(series: ImageSeries, threshold_frac: float = 0.05) -> np.ndarray:
    """Voxels whose first echo is positive and at least ``threshold_frac`` of the brightest."""
    if not 0.0 <= threshold_frac < 1.0:
        raise ValueError(f"threshold_frac must be in [0, 1), got {threshold_frac}")
    first = series.frames[0]
    peak = float(first.max())
    if not peak > 0:
        warnings.warn("first frame has no positive intensity; mask is empty", EmptyMaskWarning, stacklevel=2)
        return np.zeros(series.dims, dtype=bool)
    return (first > 0) & (first >= threshold_frac * peak)


def _check_mask(series: ImageSeries, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != series.dims:
        raise ValueError(f"mask shape {mask.shape} does not match image dims {series.dims}")
    if not mask.any():
        raise ValueError("mask is empty")
    if series.times.size < 2:
        raise ValueError("need at least 2 echoes")
    return mask


def _run(fn: Callable, coords: list[tuple[int, int]], threads: int, progress: Callable | None):
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    out = [None] * len(coords)

    def task(i):
        out[i] = fn(*coords[i])
        if progress is not None:
            progress(i)

    if threads == 1:
        for i in range(len(coords)):
            task(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(task, range(len(coords))))
    return out


def _assemble(series, mask, coords, fits, method, t0) -> MapResult:
    dims = series.dims
    t2 = np.full(dims, np.nan)
    m0 = np.full(dims, np.nan)
    res = np.full(dims, np.nan)
    iters = np.zeros(dims, dtype=np.int64)
    status = np.full(dims, VoxelStatus.MASKED, dtype=np.uint8)
    results = {}
    for (r, c), fit in zip(coords, fits):
        if isinstance(fit, FitError):
            status[r, c] = _ERROR_STATUS.get(fit.code, VoxelStatus.FIT_ERROR)
            continue
        code = _RESULT_STATUS.get(fit.status, VoxelStatus.FIT_ERROR)
        if code in VALID_STATUS and not fit.ok:
            code = VoxelStatus.NON_FINITE
        status[r, c] = code
        iters[r, c] = fit.iters
        results[(r, c)] = fit
        if code in VALID_STATUS:
            t2[r, c] = fit.t2_hat
            m0[r, c] = fit.m0_hat
            res[r, c] = fit.loss_data * fit.scale
    valid = np.isin(status, [int(s) for s in VALID_STATUS])
    return MapResult(
        ParameterMap(t2, valid, MapKind.T2),
        ParameterMap(m0, valid, MapKind.M0),
        ParameterMap(res, valid, MapKind.RESIDUAL),
        status,
        iters,
        wall_time=time.perf_counter() - t0,
        method=method,
        results=results,
    )


def map_lsq(series: ImageSeries, mask, opts: LsqOptions = LsqOptions(), *, threads: int = 1,
            progress: Callable | None = None) -> MapResult:
    mask = _check_mask(series, mask)
    coords = [(int(r), int(c)) for r, c in zip(*np.nonzero(mask))]
    t0 = time.perf_counter()

    def one(r, c):
        try:
            return fit_lsq(series.voxel(r, c), opts)
        except FitError as exc:
            return exc

    fits = _run(one, coords, threads, progress)
    return _assemble(series, mask, coords, fits, f"lsq:{opts.method.value}", t0)


def voxel_seed(seed: int, row: int, col: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, row, col])


def map_pinn(series: ImageSeries, mask, grid: CollocationGrid | None = None, w: LossWeights = LossWeights(),
             cfg: TrainConfig = TrainConfig(), *, threads: int = 1, progress: Callable | None = None) -> MapResult:
    """PINN fit of every masked-in voxel; also returns the :class:`TrainedField`."""
    mask = _check_mask(series, mask)
    coords = [(int(r), int(c)) for r, c in zip(*np.nonzero(mask))]
    t0 = time.perf_counter()

    def one(r, c):
        try:
            return fit_voxel(series.voxel(r, c), grid, w, cfg, seed=voxel_seed(cfg.seed, r, c))
        except FitError as exc:
            return exc

    fits = _run(one, coords, threads, progress)
    out = _assemble(series, mask, coords, fits, "pinn", t0)
    kept = [(rc, f.model) for rc, f in zip(coords, fits) if not isinstance(f, FitError) and out.t2.mask[rc]]
    out.field = TrainedField.from_models(series.dims, cfg.width, [k[0] for k in kept], [k[1] for k in kept])
    return out


def diff_map(a: ParameterMap, b: ParameterMap) -> ParameterMap:
    """``a - b`` on the joint mask."""
    if a.dims != b.dims:
        raise ValueError(f"map dims differ: {a.dims} vs {b.dims}")
    joint = a.mask & b.mask
    if not joint.any():
        warnings.warn("maps share no masked-in voxel; difference is empty", EmptyMaskWarning, stacklevel=2)
    return ParameterMap(np.where(joint, a.values - b.values, np.nan), joint, MapKind.DIFF)


def generate_frames(field: TrainedField, times) -> ImageSeries:
    """Evaluate every trained voxel at ``times`` (ms, >= 0, increasing); others are 0."""
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if t.ndim != 1 or t.size == 0 or not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValueError("times must be a non-empty list of finite values >= 0")
    frames = np.zeros((t.size, *field.dims))
    for i in range(len(field)):
        r, c = field.coords[i]
        frames[:, r, c] = field.voxel(i).predict(t)
    return ImageSeries(t, frames)


def region_errors(estimate: ParameterMap, truth: np.ndarray, labels: np.ndarray) -> dict[int, dict]:
    """Per-region median relative error and voxel count against a ground-truth map."""
    out = {}
    for lab in np.unique(labels[labels > 0]):
        region = (labels == lab) & estimate.mask
        ref = truth[labels == lab]
        entry = {"truth": float(np.median(ref)), "n": int(region.sum())}
        if region.any():
            rel = estimate.values[region] / truth[region] - 1.0
            entry.update(median_rel_error=float(np.median(rel)), median_abs_rel_error=float(np.median(np.abs(rel))))
        else:
            entry.update(median_rel_error=float("nan"), median_abs_rel_error=float("nan"))
        out[int(lab)] = entry
    return out


__all__ = [
    "EmptyMaskWarning",
    "MapKind",
    "MapResult",
    "ParameterMap",
    "TrainedField",
    "VoxelStatus",
    "build_mask",
    "diff_map",
    "generate_frames",
    "map_lsq",
    "map_pinn",
    "region_errors",
    "voxel_seed",
]
