"""Tomographic reconstruction with joint projection-angle calibration."""

__version__ = "0.1.0"

from .projector import Projector, ProjectorConfig, default_num_detectors
from .denoise import (
    DenoiseResult,
    DenoiserSpec,
    ExternalDenoiserError,
    denoise,
    external_denoise,
    red_penalty,
    tv_prox,
)
from .simkit import (
    ExperimentSpec,
    nominal_angles,
    perturb_angles,
    rmse_deg,
    shepp_logan,
    snr_db,
    synth_sinogram,
)
from .solvers import (
    RunResult,
    SolverAbort,
    SolverConfig,
    SolverState,
    TraceRow,
    nesterov_q,
    run,
)

__all__ = [
    "__version__",
    "Projector",
    "ProjectorConfig",
    "default_num_detectors",
    "DenoiserSpec",
    "DenoiseResult",
    "ExternalDenoiserError",
    "denoise",
    "external_denoise",
    "red_penalty",
    "tv_prox",
    "ExperimentSpec",
    "nominal_angles",
    "perturb_angles",
    "rmse_deg",
    "shepp_logan",
    "snr_db",
    "synth_sinogram",
    "RunResult",
    "SolverAbort",
    "SolverConfig",
    "SolverState",
    "TraceRow",
    "nesterov_q",
    "run",
]
