"""DivMorph-style morphology control toolkit.

Weight matrices of a morphology-aware transformer controller are
SVD-factorized into shared learngenes and gated morphology-/task-specific
tailors; training distills per-task teachers into the factorized student,
and deployment prunes unselected tailors into a compact low-rank agent.
"""

from .controller import ActionDistribution, Controller, ControllerConfig, make_config
from .errors import (
    ContractViolationError,
    DivMorphError,
    EvaluationError,
    FormatError,
    NumericalFailureError,
    SingularMatrixError,
)
from .factorized import CompactMatrix, DiversionConfig, FactorizedMatrix
from .specs import Limb, MorphSpec, TaskSpec

__all__ = [
    "ActionDistribution",
    "CompactMatrix",
    "ContractViolationError",
    "Controller",
    "ControllerConfig",
    "DiversionConfig",
    "DivMorphError",
    "EvaluationError",
    "FactorizedMatrix",
    "FormatError",
    "Limb",
    "MorphSpec",
    "NumericalFailureError",
    "SingularMatrixError",
    "TaskSpec",
    "make_config",
]

__version__ = "0.1.0"
