"""Physics-informed fit of one voxel.

The loss is ``w_bloch * L_bloch + w_data * L_data`` where ``L_bloch`` is the
mean absolute ODE residual of the network over the collocation grid and
``L_data`` the mean absolute misfit at the echoes (a squared variant is a
config switch). Adam updates every network weight and the T2 parameter
``rho`` jointly, full batch.

Two scale choices make a single configuration work from T2 = 5 ms to a few
hundred ms:

* the network input is ``t / t_scale`` with ``t_scale = min(t_max, T2_init)``
  so that the decay spans an O(1) range of the tanh features;
* ``T2 = t_scale * softplus(rho)``, so one Adam step moves T2 by a fraction
  of itself instead of by a fixed number of milliseconds.

By default the collocation grid covers the sampled echo range only. Before
the first echo there is no data to anchor the network, and fitting there
biases T2 upward. ``m0_hat`` then follows from continuing the fitted ODE
solution from the first collocation point back to ``t = 0``.

``loss_bloch``/``loss_data``/``grad_total`` below are the plain numpy
reference. ``fit_voxel`` runs the fused kernels in :mod:`t2pinn._kernels`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import _kernels as kn
from .lsq import log_linear_solve
from .net import MlpParams, forward, grad_wrt_params, init_params, sigmoid, softplus_inv
from .result import FitError, FitResult, RejectedVoxelError
from .signal import EchoSeries


# --------------------------------------------------------------------------- types


@dataclass(frozen=True)
class CollocationGrid:
    """``K`` sorted times (ms) at which the ODE residual is penalized."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError(f"collocation grid needs K >= 2 points, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(np.diff(p) <= 0):
            raise ValueError("collocation points must be finite and strictly increasing")
        object.__setattr__(self, "points", p)

    @property
    def k(self) -> int:
        return self.points.size

    @property
    def t_lo(self) -> float:
        return float(self.points[0])

    @property
    def t_hi(self) -> float:
        return float(self.points[-1])

    @classmethod
    def uniform(cls, t_lo: float, t_hi: float, k: int = 1001) -> CollocationGrid:
        if k < 2:
            raise ValueError(f"K must be >= 2, got {k}")
        if not t_hi > t_lo:
            raise ValueError(f"empty interval [{t_lo}, {t_hi}]")
        return cls(np.linspace(t_lo, t_hi, k))

    @classmethod
    def for_series(cls, series: EchoSeries, k: int = 1001, start: GridStart | str = "first_echo") -> CollocationGrid:
        start = GridStart(start)
        t_lo = 0.0 if start is GridStart.ZERO else float(series.times[0])
        return cls.uniform(t_lo, float(series.times[-1]), k)


class GridStart(str, Enum):
    FIRST_ECHO = "first_echo"
    ZERO = "zero"


@dataclass(frozen=True)
class LossWeights:
    w_bloch: float = 0.01
    w_data: float = 1.0

    def __post_init__(self):
        if self.w_bloch < 0 or self.w_data < 0:
            raise ValueError(f"loss weights must be >= 0, got ({self.w_bloch}, {self.w_data})")
        if self.w_bloch == 0 and self.w_data == 0:
            raise ValueError("loss weights must not both be zero")

    def combine(self, l_bloch: float, l_data: float) -> float:
        return self.w_bloch * l_bloch + self.w_data * l_data


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 5000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 1e-8  # relative change of the total loss across one window
    window: int = 100
    t2_init: float | None = None  # ms; None means the clamped log-linear estimate
    seed: int = 0
    width: int = 8
    n_colloc: int = 1001
    squared: bool = False
    grid_start: GridStart = GridStart.FIRST_ECHO
    keep_best: bool = True  # return the lowest-loss iterate rather than the last

    def __post_init__(self):
        object.__setattr__(self, "grid_start", GridStart(self.grid_start))
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if not self.eps > 0 or not self.tol > 0:
            raise ValueError("eps and tol must be > 0")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.t2_init is not None and not self.t2_init > 0:
            raise ValueError(f"t2_init must be > 0, got {self.t2_init}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.n_colloc < 2:
            raise ValueError(f"n_colloc must be >= 2, got {self.n_colloc}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_start"] = self.grid_start.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        from .config import build_dataclass

        return build_dataclass(cls, d, "train")


# --------------------------------------------------------------------------- reference losses


def loss_bloch(p: MlpParams, grid: CollocationGrid, squared: bool = False) -> float:
    rec = forward(p, grid.points)
    r = rec.dvalue_dt + rec.value / p.t2
    return float(np.mean(r * r if squared else np.abs(r)))


def loss_data(p: MlpParams, series: EchoSeries, squared: bool = False) -> float:
    e = series.signals - forward(p, series.times).value
    return float(np.mean(e * e if squared else np.abs(e)))


def loss_total(p: MlpParams, grid: CollocationGrid, series: EchoSeries, w: LossWeights, squared: bool = False) -> float:
    return w.combine(loss_bloch(p, grid, squared), loss_data(p, series, squared))


def _dloss(r: np.ndarray, squared: bool) -> np.ndarray:
    return 2.0 * r if squared else np.sign(r)


def grad_total(p: MlpParams, grid: CollocationGrid, series: EchoSeries, w: LossWeights, squared: bool = False) -> MlpParams:
    """Exact (sub)gradient of :func:`loss_total`, ``rho`` included."""
    t2 = p.t2
    rc = forward(p, grid.points)
    r = rc.dvalue_dt + rc.value / t2
    gr = w.w_bloch * _dloss(r, squared) / grid.k
    g = grad_wrt_params(p, rc, gr / t2, gr)

    re = forward(p, series.times)
    e = series.signals - re.value
    gd = grad_wrt_params(p, re, -w.w_data * _dloss(e, squared) / len(series), 0.0)
    out = MlpParams.from_flat(g.to_flat() + gd.to_flat(), p.width, p.t_scale)
    # dr/dT2 = -N/T2^2 and dT2/drho = t_scale * sigmoid(rho)
    out.rho = float(-np.dot(gr, rc.value) / (t2 * t2) * p.t_scale * sigmoid(p.rho))
    return out


# --------------------------------------------------------------------------- trained model


@dataclass
class TrainedVoxel:
    """A fitted network plus the scaling needed to evaluate it in signal units.

    Inside ``[t_lo, t_hi]`` predictions come from the network. Outside, the
    fitted ODE solution is continued from the nearest end:
    ``N(t_end) * exp(-(t - t_end) / T2)``.
    """

    params: MlpParams
    scale: float
    t_lo: float
    t_hi: float

    @property
    def t2(self) -> float:
        return self.params.t2

    def predict(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        inner = np.clip(t, self.t_lo, self.t_hi)
        value = forward(self.params, inner).value
        out = value * np.exp(-(t - inner) / self.t2)
        return out * self.scale

    @property
    def m0(self) -> float:
        return float(self.predict(0.0)[0])


# --------------------------------------------------------------------------- fused training loop


class _Workspace:
    """Preallocated buffers for one voxel; ``loss_grad`` is the hot path."""

    def __init__(self, width: int, x: np.ndarray, dxdt: float, n_colloc: int, signals: np.ndarray,
                 w: LossWeights, t2_unit: float, squared: bool):
        n = x.size
        self.c = width
        self.x = x
        self.dxdt = dxdt
        self.n_colloc = n_colloc
        self.signals = signals
        self.w = w
        self.t2_unit = t2_unit
        self.squared = squared
        (self.z1, self.a1, self.d1, self.z2, self.dz2, self.a2,
         self.za, self.zb, self.ba, self.bd) = (np.empty((width, n)) for _ in range(10))
        self.val = np.empty(n)
        self.der = np.empty(n)
        self.cv = np.empty(n)
        self.cd = np.empty(n)

    def loss_grad(self, theta: np.ndarray, grad: np.ndarray) -> tuple[float, float]:
        c = self.c
        kn.layer1(theta, c, self.x, self.z1)
        np.tanh(self.z1, out=self.a1)
        kn.layer2(theta, c, self.dxdt, self.a1, self.d1, self.z2, self.dz2)
        np.tanh(self.z2, out=self.a2)
        kn.head(theta, c, self.a2, self.dz2, self.val, self.der)
        lb, ld, g_rho = kn.residual_coeffs(
            theta, self.t2_unit, self.n_colloc, self.signals, self.w.w_bloch, self.w.w_data,
            self.squared, self.val, self.der, self.cv, self.cd,
        )
        kn.backward(theta, c, self.x, self.dxdt, self.a1, self.d1, self.a2, self.dz2,
                    self.cv, self.cd, grad, self.za, self.zb, self.ba, self.bd)
        grad[-1] = g_rho
        return lb, ld


def fused_loss_grad(p: MlpParams, grid: CollocationGrid, series: EchoSeries, w: LossWeights,
                    squared: bool = False) -> tuple[float, float, MlpParams]:
    """``(loss_bloch, loss_data, gradient)`` through the kernels ``fit_voxel`` uses."""
    x = np.concatenate([grid.points, series.times]) / p.t_scale
    ws = _Workspace(p.width, x, 1.0 / p.t_scale, grid.k, series.signals, w, p.t_scale, squared)
    theta = p.to_flat()
    grad = np.empty_like(theta)
    lb, ld = ws.loss_grad(theta, grad)
    return lb, ld, MlpParams.from_flat(grad, p.width, p.t_scale)


def initial_t2(series: EchoSeries) -> float:
    """Log-linear estimate clamped to ``[0.1 * min dt, 10 * t_max]``; ``t_max / 3`` if that fails."""
    t = series.times
    t_max = float(t[-1])
    try:
        _, t2 = log_linear_solve(t, series.signals)
    except FitError:
        return t_max / 3.0
    lo = 0.1 * float(np.min(np.diff(t)))
    return float(min(max(t2, lo), 10.0 * t_max))


def _check_series(series: EchoSeries) -> float:
    s = series.signals
    if not np.all(np.isfinite(s)):
        raise RejectedVoxelError("signals must be finite")
    peak = float(np.max(s))
    if not peak > 0:
        raise RejectedVoxelError("signal maximum must be > 0")
    return peak


def fit_voxel(
    series: EchoSeries,
    grid: CollocationGrid | None = None,
    w: LossWeights = LossWeights(),
    cfg: TrainConfig = TrainConfig(),
    *,
    seed: int | np.random.SeedSequence | None = None,
) -> FitResult:
    """Train the network on one voxel and read off ``(m0, T2)``.

    ``grid`` defaults to ``cfg.n_colloc`` points over the echo range.
    ``seed`` overrides ``cfg.seed`` for weight initialization.
    """
    scale = _check_series(series)
    if grid is None:
        grid = CollocationGrid.for_series(series, cfg.n_colloc, cfg.grid_start)
    signals = series.signals / scale
    t2_0 = cfg.t2_init if cfg.t2_init is not None else initial_t2(series)
    t_hi = max(grid.t_hi, float(series.times[-1]))
    t_lo = min(grid.t_lo, float(series.times[0]))
    t_scale = min(t_hi, t2_0)

    p0 = init_params(cfg.width, cfg.seed if seed is None else seed, t_scale=t_scale)
    p0.rho = softplus_inv(t2_0 / t_scale)
    theta = p0.to_flat()
    x = np.concatenate([grid.points, series.times]) / t_scale
    ws = _Workspace(cfg.width, x, 1.0 / t_scale, grid.k, signals, w, t_scale, cfg.squared)

    grad = np.empty_like(theta)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    history = np.empty(cfg.max_iters + 1)
    best_theta = theta.copy()
    best = (math.inf, math.nan, math.nan)
    status = "max_iters"
    converged = False
    n_done = 0
    lb = ld = math.nan
    for it in range(cfg.max_iters + 1):
        lb, ld = ws.loss_grad(theta, grad)
        total = w.combine(lb, ld)
        history[it] = total
        if not (math.isfinite(total) and np.all(np.isfinite(grad))):
            status = "non_finite"
            break
        if total < best[0] or not cfg.keep_best:
            best = (total, lb, ld)
            best_theta[:] = theta
        if it >= cfg.window:
            prev = history[it - cfg.window]
            if abs(prev - total) <= cfg.tol * max(abs(prev), 1e-300):
                status = "converged"
                converged = True
                break
        if it == cfg.max_iters:
            break
        kn.adam_step(theta, grad, m, v, it + 1, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        n_done = it + 1
    history = history[: it + 1]

    if status == "non_finite":
        return FitResult(math.nan, math.nan, lb, ld, n_done, False, "pinn", status, scale, history=history)

    params = MlpParams.from_flat(best_theta, cfg.width, t_scale)
    model = TrainedVoxel(params, scale, t_lo, t_hi)
    return FitResult(
        m0_hat=model.m0,
        t2_hat=params.t2,
        loss_bloch=best[1],
        loss_data=best[2],
        iters=n_done,
        converged=converged,
        method="pinn",
        status=status,
        scale=scale,
        history=history,
        model=model,
    )


__all__ = [
    "CollocationGrid",
    "GridStart",
    "LossWeights",
    "TrainConfig",
    "TrainedVoxel",
    "fit_voxel",
    "grad_total",
    "initial_t2",
    "loss_bloch",
    "loss_data",
    "loss_total",
]
