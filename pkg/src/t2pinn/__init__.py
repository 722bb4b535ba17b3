"""Per-voxel T2 mapping by least squares and by a physics-informed network."""

from .lsq import LsqMethod, LsqOptions, fit_log_linear, fit_lsq, fit_nonlinear
from .net import MlpParams, forward, grad_wrt_params, init_params
from .pipeline import (
    MapKind,
    ParameterMap,
    TrainedField,
    build_mask,
    diff_map,
    generate_frames,
    map_lsq,
    map_pinn,
)
from .result import FitError, FitResult
from .signal import (
    EchoSeries,
    ImageSeries,
    NoiseKind,
    NoiseSpec,
    TissueParams,
    default_layout,
    make_phantom,
    model_signal,
    ode_residual,
    synthesize_series,
)
from .trainer import CollocationGrid, LossWeights, TrainConfig, fit_voxel, grad_total, loss_bloch, loss_data, loss_total

__version__ = "0.1.0"

__all__ = [
    "CollocationGrid",
    "EchoSeries",
    "FitError",
    "FitResult",
    "ImageSeries",
    "LossWeights",
    "LsqMethod",
    "LsqOptions",
    "MapKind",
    "MlpParams",
    "NoiseKind",
    "NoiseSpec",
    "ParameterMap",
    "TissueParams",
    "TrainConfig",
    "TrainedField",
    "build_mask",
    "default_layout",
    "diff_map",
    "fit_log_linear",
    "fit_lsq",
    "fit_nonlinear",
    "fit_voxel",
    "forward",
    "generate_frames",
    "grad_total",
    "grad_wrt_params",
    "init_params",
    "loss_bloch",
    "loss_data",
    "loss_total",
    "make_phantom",
    "map_lsq",
    "map_pinn",
    "model_signal",
    "ode_residual",
    "synthesize_series",
    "__version__",
]
