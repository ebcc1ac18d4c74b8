"""Uncertainty-aware stochastic MPC with exact probabilistic collision avoidance."""

from uasmpc.geometry import (
    OverlapRect,
    chi2_quantile_2dof,
    constraint_value,
    dist_to_zonotope,
    inv_sqrt,
    overlap_rect,
    zonotope_generators,
)
from uasmpc.prediction import (
    AgentState,
    GmmPrediction,
    Mode,
    avg_entropy,
    constant_velocity_predict,
    ece,
    gmm_nll,
    min_ade_fde,
    sample_trajectories,
    scale_covariances,
)
from uasmpc.planner import (
    EgoState,
    PlannerConfig,
    PlanResult,
    PolicyParameters,
    build_reference,
    plan,
)

__all__ = [
    "AgentState",
    "EgoState",
    "GmmPrediction",
    "Mode",
    "OverlapRect",
    "PlanResult",
    "PlannerConfig",
    "PolicyParameters",
    "avg_entropy",
    "build_reference",
    "chi2_quantile_2dof",
    "constant_velocity_predict",
    "constraint_value",
    "dist_to_zonotope",
    "ece",
    "gmm_nll",
    "inv_sqrt",
    "min_ade_fde",
    "overlap_rect",
    "plan",
    "sample_trajectories",
    "scale_covariances",
    "zonotope_generators",
]

__version__ = "0.1.0"
