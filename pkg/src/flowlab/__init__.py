"""Deterministic diffusion samplers with exact scores for atom clouds,
their pushforward densities, total-variation metrology and bound checks."""

from .analytic import AtomCloud, MarginalScaling
from .errors import (
    ComputationError,
    DomainError,
    FlowlabError,
    InputError,
    SingularMapError,
    StiffnessError,
    UnsupportedSchemeError,
)
from .forward import VE, VP, ForwardSpec, GaussianPrior, MarginalLaw, TimeGrid, build_grid, grid_with_steps
from .samplers import run_reverse
from .scores import ExactField, PerturbedField, ZeroField, field_from_dict

__all__ = [
    "AtomCloud",
    "MarginalScaling",
    "ComputationError",
    "DomainError",
    "FlowlabError",
    "InputError",
    "SingularMapError",
    "StiffnessError",
    "UnsupportedSchemeError",
    "VE",
    "VP",
    "ForwardSpec",
    "GaussianPrior",
    "MarginalLaw",
    "TimeGrid",
    "build_grid",
    "grid_with_steps",
    "run_reverse",
    "ExactField",
    "PerturbedField",
    "ZeroField",
    "field_from_dict",
]
