"""State, Jacobian, and inverse flows with Malliavin-covariance quadrature."""
from .brownian import BrownianGrid, sample_brownian, standard_normal_stream
from .integrals import (
    bracket_pullback,
    chaos_remainder,
    chaos_remainder_ensemble,
    chaos_remainder_path,
    expansion_coefficients,
    iterated_integral,
    pullback_process,
)
from .probes import AssumptionProbe, MomentProbe, assumption_probe, moment_probe
from .simulate import (
    SCHEMES,
    EnsembleResult,
    FlowTrajectory,
    MalliavinPair,
    RecordSpec,
    SimConfig,
    Trajectory,
    malliavin_checkpoint_ensemble,
    malliavin_derivative,
    malliavin_matrices,
    nearest_index,
    replace_config,
    run_ensemble,
    simulate_flow,
    simulate_x,
)

__all__ = [
    "BrownianGrid",
    "sample_brownian",
    "standard_normal_stream",
    "SCHEMES",
    "SimConfig",
    "Trajectory",
    "FlowTrajectory",
    "MalliavinPair",
    "RecordSpec",
    "EnsembleResult",
    "simulate_x",
    "simulate_flow",
    "run_ensemble",
    "malliavin_derivative",
    "malliavin_matrices",
    "malliavin_checkpoint_ensemble",
    "nearest_index",
    "replace_config",
    "iterated_integral",
    "pullback_process",
    "bracket_pullback",
    "chaos_remainder",
    "chaos_remainder_path",
    "chaos_remainder_ensemble",
    "expansion_coefficients",
    "AssumptionProbe",
    "assumption_probe",
    "MomentProbe",
    "moment_probe",
]
