"""Actor-critic neural solver for static HJB equations on balls."""

from .autodiff import AdamState, ContractViolation, NumericFailure, ParamVector, Tape, adam_step
from .networks import NetworkSet, ResidualMLP, load_networks, save_networks
from .problems import (Problem, make_eikonal, make_lqr, make_nonconstant_lqr, make_problem,
                       make_van_der_pol, pde_residual, sample_boundary, sample_initial)
from .rollout import SchemeConfig, rollout
from .trainer import MetricsRecord, TrainConfig, Trainer, train, validate
from .estimator import HJBSolver

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "HJBSolver",
    "ContractViolation",
    "MetricsRecord",
    "NetworkSet",
    "NumericFailure",
    "ParamVector",
    "Problem",
    "ResidualMLP",
    "SchemeConfig",
    "Tape",
    "TrainConfig",
    "Trainer",
    "adam_step",
    "load_networks",
    "make_eikonal",
    "make_lqr",
    "make_nonconstant_lqr",
    "make_problem",
    "make_van_der_pol",
    "pde_residual",
    "rollout",
    "sample_boundary",
    "sample_initial",
    "save_networks",
    "train",
    "validate",
]
