"""Least-squares baseline for the mono-exponential model.

``fit_log_linear`` regresses ``ln S`` on ``t``. ``fit_nonlinear`` refines any
starting point with Levenberg-damped Gauss-Newton on the untransformed model,
which removes the log-domain bias that noise introduces at short T2.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .result import DegenerateInputError, FitResult, NonDecayingSignalError
from .signal import EchoSeries


class LsqMethod(str, Enum):
    LOG_LINEAR = "log_linear"
    NONLINEAR_REFINED = "nonlinear_refined"


@dataclass(frozen=True)
class LsqOptions:
    method: LsqMethod = LsqMethod.LOG_LINEAR
    min_signal: float = 0.0  # fraction of the series max; echoes at or below it are dropped
    max_gn_iters: int = 100
    gn_tol: float = 1e-12  # relative step norm

    def __post_init__(self):
        object.__setattr__(self, "method", LsqMethod(self.method))
        if not 0.0 <= self.min_signal < 1.0:
            raise ValueError(f"min_signal must be in [0, 1), got {self.min_signal}")
        if self.max_gn_iters < 0:
            raise ValueError(f"max_gn_iters must be >= 0, got {self.max_gn_iters}")
        if not self.gn_tol > 0:
            raise ValueError(f"gn_tol must be > 0, got {self.gn_tol}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LsqOptions:
        from .config import build_dataclass

        return build_dataclass(cls, d, "lsq")


def model_jacobian(t, m0: float, t2: float) -> np.ndarray:
    """``d/d(m0, t2)`` of ``m0 * exp(-t / t2)``, shape ``(len(t), 2)``."""
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-t / t2)
    return np.column_stack([e, m0 * t * e / (t2 * t2)])


def log_linear_solve(times, signals, min_signal: float = 0.0) -> tuple[float, float]:
    """``(m0, t2)`` from OLS on ``ln S``. Accepts echoes in any order."""
    t = np.asarray(times, dtype=np.float64)
    s = np.asarray(signals, dtype=np.float64)
    finite = np.isfinite(s)
    peak = s[finite].max() if finite.any() else 0.0
    keep = finite & (s > 0) & (s > min_signal * peak)
    if np.count_nonzero(keep) < 2 or np.ptp(t[keep]) == 0:
        raise DegenerateInputError(f"need 2 echoes above threshold, have {int(np.count_nonzero(keep))}")
    # Sort so the sums do not depend on the caller's echo order.
    order = np.argsort(t[keep], kind="stable")
    x = t[keep][order]
    y = np.log(s[keep][order])
    xm = x.mean()
    dx = x - xm
    slope = float(np.dot(dx, y - y.mean()) / np.dot(dx, dx))
    if not slope < 0:
        raise NonDecayingSignalError(f"log-signal slope {slope:.3g} is not negative")
    intercept = float(y.mean() - slope * xm)
    return math.exp(intercept), -1.0 / slope


def _rss(t, s, m0, t2) -> float:
    r = s - m0 * np.exp(-t / t2)
    return float(np.dot(r, r))


def gauss_newton_solve(times, signals, m0: float, t2: float, max_iters: int = 100, tol: float = 1e-12):
    """Levenberg-Marquardt from ``(m0, t2)``.

    Returns ``(m0, t2, steps, converged)``. A step is accepted only if it
    does not increase the residual sum of squares.
    """
    if not t2 > 0:
        raise ValueError(f"initial t2 must be > 0, got {t2}")
    order = np.argsort(np.asarray(times, dtype=np.float64), kind="stable")
    t = np.asarray(times, dtype=np.float64)[order]
    s = np.asarray(signals, dtype=np.float64)[order]
    p = np.array([m0, t2], dtype=np.float64)
    rss = _rss(t, s, *p)
    lam = 1e-3
    steps = 0
    if rss == 0.0:
        return float(p[0]), float(p[1]), 0, True
    for _ in range(max_iters):
        J = model_jacobian(t, *p)
        r = s - p[0] * np.exp(-t / p[1])
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        if not np.all(np.isfinite(A)) or diag.max() <= 0:
            return float(p[0]), float(p[1]), steps, False
        diag = np.maximum(diag, 1e-12 * diag.max())
        while True:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                cand = p + delta
                if cand[1] > 0:
                    new = _rss(t, s, *cand)
                    if new <= rss:
                        break
            lam *= 10.0
            if lam > 1e16:
                # Damping exhausted: no descent direction is left, which at a
                # minimum means the fit has converged to working precision.
                return float(p[0]), float(p[1]), steps, bool(np.linalg.norm(g) <= 1e-10 * max(1.0, np.linalg.norm(s)))
        p = cand
        rss = new
        steps += 1
        lam = max(lam / 10.0, 1e-12)
        if np.linalg.norm(delta) <= tol * (np.linalg.norm(p) + tol) or rss == 0.0:
            return float(p[0]), float(p[1]), steps, True
    return float(p[0]), float(p[1]), steps, False


def _result(series: EchoSeries, m0: float, t2: float, method: str, iters: int, converged: bool) -> FitResult:
    t, s = series.times, series.signals
    scale = float(np.max(np.abs(s))) or 1.0
    resid = s - m0 * np.exp(-t / t2)
    return FitResult(
        m0_hat=m0,
        t2_hat=t2,
        loss_bloch=0.0,  # the analytic model solves the ODE exactly
        loss_data=float(np.mean(np.abs(resid)) / scale),
        iters=iters,
        converged=converged,
        method=method,
        status="ok" if converged else "not_converged",
        scale=scale,
        rss=float(np.dot(resid, resid)),
    )


def fit_log_linear(series: EchoSeries, opts: LsqOptions = LsqOptions()) -> FitResult:
    m0, t2 = log_linear_solve(series.times, series.signals, opts.min_signal)
    return _result(series, m0, t2, LsqMethod.LOG_LINEAR.value, 0, True)


def fit_nonlinear(series: EchoSeries, init: FitResult, opts: LsqOptions = LsqOptions()) -> FitResult:
    m0, t2, steps, ok = gauss_newton_solve(
        series.times, series.signals, init.m0_hat, init.t2_hat, opts.max_gn_iters, opts.gn_tol
    )
    if not ok and steps == 0:
        out = _result(series, init.m0_hat, init.t2_hat, LsqMethod.NONLINEAR_REFINED.value, 0, False)
        out.status = "singular"
        return out
    return _result(series, m0, t2, LsqMethod.NONLINEAR_REFINED.value, steps, ok)


def fit_lsq(series: EchoSeries, opts: LsqOptions = LsqOptions()) -> FitResult:
    """Log-linear fit, refined when ``opts.method`` asks for it."""
    init = fit_log_linear(series, opts)
    if opts.method is LsqMethod.LOG_LINEAR:
        return init
    return fit_nonlinear(series, init, opts)


__all__ = [
    "LsqMethod",
    "LsqOptions",
    "fit_log_linear",
    "fit_lsq",
    "fit_nonlinear",
    "gauss_newton_solve",
    "log_linear_solve",
    "model_jacobian",
]
