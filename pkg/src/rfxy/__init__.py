"""Random-field XY model toolkit: fields, coarse-graining, contour surgery, sampling."""

__version__ = "0.1.0"

from .errors import DomainError, ParameterError, ScaleError, SurgeryError, NumericError
from .params import ModelParams, CleanConstants, validate_params

__all__ = [
    "DomainError",
    "ParameterError",
    "ScaleError",
    "SurgeryError",
    "NumericError",
    "ModelParams",
    "CleanConstants",
    "validate_params",
]
