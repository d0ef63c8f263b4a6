"""Split a target volume into a feature-explainable envelope and an orthogonal residual."""

__version__ = "0.1.0"

from .projection import (  # noqa: E402
    GramFactorization,
    ProjectorSpec,
    ResidualDecomposition,
    SubspaceProjector,
    decompose_residual,
    effective_rank,
    gram_factorize,
    project_parallel,
)
from .inr import OrthogonalSirenRegressor, TrainConfig  # noqa: E402

__all__ = [
    "GramFactorization",
    "OrthogonalSirenRegressor",
    "ProjectorSpec",
    "ResidualDecomposition",
    "SubspaceProjector",
    "TrainConfig",
    "decompose_residual",
    "effective_rank",
    "gram_factorize",
    "project_parallel",
]
