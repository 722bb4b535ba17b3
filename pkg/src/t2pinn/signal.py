"""Mono-exponential transverse decay, its ODE residual, and synthetic data.

All times are milliseconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TissueParams:
    m0: float
    t2: float  # ms

    def __post_init__(self):
        if not self.t2 > 0:
            raise ValueError(f"t2 must be > 0, got {self.t2}")
        if not self.m0 >= 0:
            raise ValueError(f"m0 must be >= 0, got {self.m0}")


@dataclass(frozen=True)
class EchoSeries:
    """Samples ``(times[i], signals[i])`` of one voxel's decay."""

    times: np.ndarray
    signals: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        s = np.asarray(self.signals, dtype=np.float64)
        if t.ndim != 1 or s.shape != t.shape:
            raise ValueError(f"times {t.shape} and signals {s.shape} must be equal-length 1-D")
        if t.size < 2:
            raise ValueError(f"need at least 2 echoes, got {t.size}")
        if np.any(np.diff(t) <= 0):
            raise ValueError("echo times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "signals", s)

    def __len__(self) -> int:
        return self.times.size

    def scaled(self, factor: float) -> EchoSeries:
        return EchoSeries(self.times, self.signals * factor)


class NoiseKind(str, Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    RICIAN = "rician"


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise with standard deviation ``sigma * m0``."""

    kind: NoiseKind = NoiseKind.GAUSSIAN
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


NOISELESS = NoiseSpec(NoiseKind.NONE)


def model_signal(p: TissueParams, t):
    """``m0 * exp(-t / t2)``; accepts scalar or array ``t``."""
    if np.ndim(t):
        return p.m0 * np.exp(-np.asarray(t, dtype=np.float64) / p.t2)
    return p.m0 * math.exp(-t / p.t2)


def model_signal_dt(p: TissueParams, t):
    """Analytic time derivative of :func:`model_signal`."""
    return -model_signal(p, t) / p.t2


def ode_residual(value, derivative, t2):
    """Residual of ``dM/dt + M/T2 = 0``; zero on exact solutions."""
    return derivative + value / t2


def _noise_rng(noise: NoiseSpec, stream: Sequence[int] = ()) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([noise.seed, *stream]))


def _corrupt(clean: np.ndarray, m0, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    if noise.kind is NoiseKind.NONE:
        return clean
    sd = noise.sigma * np.asarray(m0, dtype=np.float64)
    n1 = rng.standard_normal(clean.shape) * sd
    if noise.kind is NoiseKind.GAUSSIAN:
        return clean + n1
    n2 = rng.standard_normal(clean.shape) * sd
    return np.hypot(clean + n1, n2)


def synthesize_series(p: TissueParams, times, noise: NoiseSpec = NOISELESS) -> EchoSeries:
    t = np.asarray(times, dtype=np.float64)
    if t.size == 0:
        raise ValueError("times must not be empty")
    if np.any(t <= 0) or np.any(np.diff(t) <= 0):
        raise ValueError("times must be positive and strictly increasing")
    clean = p.m0 * np.exp(-t / p.t2)
    return EchoSeries(t, _corrupt(clean, p.m0, noise, _noise_rng(noise)))


@dataclass(frozen=True)
class ImageSeries:
    """A stack of ``I`` images of shape ``dims`` sharing one echo-time axis."""

    times: np.ndarray
    frames: np.ndarray  # (I, rows, cols)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[0] != t.size:
            raise ValueError(f"frames {f.shape} must be (I, rows, cols) with I = {t.size}")
        if t.size >= 2 and np.any(np.diff(t) <= 0):
            raise ValueError("echo times must be strictly increasing")
        if not np.all(np.isfinite(f)):
            raise ValueError("frames must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "frames", f)

    @property
    def dims(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def voxel(self, row: int, col: int) -> EchoSeries:
        return EchoSeries(self.times, self.frames[:, row, col])


# --------------------------------------------------------------------------- phantom

# Geometric ladder from 5.592 ms (a short-T2 MnCl2 tube) up to 150 ms, which
# spans what 9 echoes at 5..45 ms can resolve.
DEFAULT_TUBE_T2 = tuple(round(5.592 * (150 / 5.592) ** (k / 13), 3) for k in range(14))
DEFAULT_ECHO_TIMES = tuple(float(t) for t in range(5, 50, 5))


@dataclass(frozen=True)
class DiskRegion:
    center: tuple[float, float]  # (row, col), pixel units
    radius: float
    params: TissueParams

    def mask(self, dims: tuple[int, int]) -> np.ndarray:
        rr, cc = np.mgrid[0 : dims[0], 0 : dims[1]]
        return (rr - self.center[0]) ** 2 + (cc - self.center[1]) ** 2 <= self.radius**2


@dataclass(frozen=True)
class PhantomLayout:
    dims: tuple[int, int]
    regions: tuple[DiskRegion, ...]
    echo_times: tuple[float, ...] = DEFAULT_ECHO_TIMES

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "echo_times": list(self.echo_times),
            "regions": [
                {"center": list(r.center), "radius": r.radius, "m0": r.params.m0, "t2": r.params.t2}
                for r in self.regions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomLayout:
        known = {"dims", "echo_times", "regions"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown phantom field(s): {sorted(extra)}")
        try:
            dims = tuple(int(v) for v in d["dims"])
        except KeyError:
            raise ValueError("phantom field 'dims' is required") from None
        if len(dims) != 2 or min(dims) < 1:
            raise ValueError(f"phantom field 'dims' must be two positive integers, got {d['dims']}")
        regions = []
        for i, r in enumerate(d.get("regions", [])):
            missing = {"center", "radius", "m0", "t2"} - set(r)
            if missing:
                raise ValueError(f"phantom field 'regions[{i}]' missing {sorted(missing)}")
            try:
                params = TissueParams(float(r["m0"]), float(r["t2"]))
            except ValueError as exc:
                raise ValueError(f"phantom field 'regions[{i}]': {exc}") from None
            regions.append(DiskRegion((float(r["center"][0]), float(r["center"][1])), float(r["radius"]), params))
        echo = tuple(float(t) for t in d.get("echo_times", DEFAULT_ECHO_TIMES))
        return cls(dims, tuple(regions), echo)

    @classmethod
    def load(cls, path: str | Path) -> PhantomLayout:
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_layout(dims: tuple[int, int] = (64, 64), radius: float | None = None) -> PhantomLayout:
    """14 disks on a 4x4 grid (two corners empty), T2 from :data:`DEFAULT_TUBE_T2`."""
    rows, cols = dims
    step_r, step_c = rows / 4, cols / 4
    if radius is None:
        radius = 0.1875 * min(step_r, step_c)
    slots = [(i, j) for i in range(4) for j in range(4) if (i, j) not in ((0, 0), (3, 3))]
    regions = tuple(
        DiskRegion(((i + 0.5) * step_r - 0.5, (j + 0.5) * step_c - 0.5), radius, TissueParams(1.0, t2))
        for (i, j), t2 in zip(slots, DEFAULT_TUBE_T2)
    )
    return PhantomLayout(dims, regions)


@dataclass
class Phantom:
    """Ground truth for a disk phantom plus a factory for image series."""

    dims: tuple[int, int]
    m0: np.ndarray
    t2: np.ndarray  # 0 on background
    labels: np.ndarray  # 0 on background, region index + 1 inside
    echo_times: tuple[float, ...] = field(default=DEFAULT_ECHO_TIMES)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def series(self, times=None, noise: NoiseSpec = NOISELESS) -> ImageSeries:
        """Per-pixel :func:`synthesize_series`; background pixels carry only noise.

        Noise for pixel ``(r, c)`` is drawn from its own stream seeded by
        ``(noise.seed, r, c)``, so the image does not depend on traversal order.
        """
        t = np.asarray(self.echo_times if times is None else times, dtype=np.float64)
        if t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ValueError("times must be non-empty, positive and strictly increasing")
        frames = np.zeros((t.size, *self.dims))
        fg = self.foreground
        frames[:, fg] = self.m0[fg] * np.exp(-t[:, None] / self.t2[fg])
        if noise.kind is not NoiseKind.NONE and noise.sigma > 0:
            # Noise scale is the pixel's own m0; background (m0 = 0) stays clean.
            for r, c in zip(*np.nonzero(fg)):
                rng = _noise_rng(noise, (int(r), int(c)))
                frames[:, r, c] = _corrupt(frames[:, r, c], self.m0[r, c], noise, rng)
        return ImageSeries(t, frames)


def make_phantom(layout: PhantomLayout) -> Phantom:
    dims = layout.dims
    labels = np.zeros(dims, dtype=np.int32)
    m0 = np.zeros(dims)
    t2 = np.zeros(dims)
    for idx, region in enumerate(layout.regions, start=1):
        inside = region.mask(dims)
        if not inside.any():
            raise ValueError(f"region {idx - 1} lies outside the {dims} grid")
        if np.any(labels[inside]):
            raise ValueError(f"region {idx - 1} overlaps region {int(labels[inside].max()) - 1}")
        labels[inside] = idx
        m0[inside] = region.params.m0
        t2[inside] = region.params.t2
    return Phantom(dims, m0, t2, labels, tuple(layout.echo_times))
