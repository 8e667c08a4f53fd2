"""Hybrid model-predictive control for quasi-static planar pushing."""

__version__ = "0.1.0"

from .dynamics import (PhysicalParams, PusherSlider, build_limit_surface, case_a_params,
                       case_b_params)
from .modes import ContactMode, ModeSchedule
from .mpc import (MpcConfig, MpcProblem, branch_and_bound, build_nominal_figure8, case_a_config,
                  case_b_config, solve_mpc_learned, solve_mpc_miqp)
from .qp import QpProblem, solve_qp

__all__ = [
    "PhysicalParams", "PusherSlider", "build_limit_surface", "case_a_params", "case_b_params",
    "ContactMode", "ModeSchedule", "MpcConfig", "MpcProblem", "branch_and_bound",
    "build_nominal_figure8", "case_a_config", "case_b_config", "solve_mpc_learned", "solve_mpc_miqp",
    "QpProblem", "solve_qp",
]
