"""Rotated tensor parallelism on a simulated worker ring."""
from .config import ExperimentConfig, ModelConfig, init_params, make_batch, preset
from .errors import ConfigurationError, DeadlockError, DimensionError, ProtocolError, StateError
from .model import RunResult, build_rtp_transformer, build_serial, run_rtp, run_serial

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DeadlockError",
    "DimensionError",
    "ExperimentConfig",
    "ModelConfig",
    "ProtocolError",
    "RunResult",
    "StateError",
    "build_rtp_transformer",
    "build_serial",
    "init_params",
    "make_batch",
    "preset",
    "run_rtp",
    "run_serial",
]
