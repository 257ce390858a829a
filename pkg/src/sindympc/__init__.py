"""Multirotor simulation, sparse system identification, and obstacle-aware
nonlinear model predictive control."""

__version__ = "0.1.0"

from . import dynamics, nmpc, sim, sindy
from .dynamics import VehicleParams
from .nmpc import MpcConfig, MpcController, ObstacleSpec, run_closed_loop, solve_ocp
from .sim import (PidGains, SimConfig, SnapshotSet, TrajectorySpec,
                  run_data_collection)
from .sindy import (SparseModel, assemble_model, estimate_derivatives,
                    fit_model, model_from_params, one_step_validate, stls)

__all__ = [
    "MpcConfig", "MpcController", "ObstacleSpec", "PidGains", "SimConfig",
    "SnapshotSet", "SparseModel", "TrajectorySpec", "VehicleParams",
    "assemble_model", "dynamics", "estimate_derivatives", "fit_model",
    "model_from_params", "nmpc", "one_step_validate", "run_closed_loop",
    "run_data_collection", "sim", "sindy", "solve_ocp", "stls",
]
