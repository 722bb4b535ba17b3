"""Per-voxel fit result shared by the least-squares and PINN fitters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class FitError(ValueError):
    """A voxel that cannot be fitted; carries a short machine-readable code."""

    code = "fit_error"


class DegenerateInputError(FitError):
    code = "degenerate"


class NonDecayingSignalError(FitError):
    code = "non_decaying"


class RejectedVoxelError(FitError):
    code = "rejected"


@dataclass
class FitResult:
    """Estimated ``(m0, t2)`` plus diagnostics.

    ``loss_data`` and ``loss_bloch`` are measured on the max-normalized
    signals (divide by ``scale``), the units the optimizer works in. Multiply
    ``loss_data`` by ``scale`` for a mean absolute error in signal units.
    """

    m0_hat: float
    t2_hat: float  # ms
    loss_bloch: float
    loss_data: float
    iters: int
    converged: bool
    method: str
    status: str = "ok"
    scale: float = 1.0
    rss: float = float("nan")  # sum of squares in signal units (least squares only)
    history: np.ndarray | None = field(default=None, repr=False)
    model: Any = field(default=None, repr=False)  # TrainedVoxel for PINN fits

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.t2_hat) and self.t2_hat > 0 and np.isfinite(self.m0_hat))


__all__ = ["DegenerateInputError", "FitError", "FitResult", "NonDecayingSignalError", "RejectedVoxelError"]
