from . import aft1, ops
from .gradcheck import GradCheckReport, grad_check, grad_check_params, relative_error
from .precision import Precision, as_precision, precision_of, round_b16
from .tape import ConformanceError, Node, Parameter, Tape

__all__ = [
    "ConformanceError",
    "GradCheckReport",
    "Node",
    "Parameter",
    "Precision",
    "Tape",
    "aft1",
    "as_precision",
    "grad_check",
    "grad_check_params",
    "ops",
    "precision_of",
    "relative_error",
    "round_b16",
]
