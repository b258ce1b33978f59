"""Semiparametric estimation for regression with a randomly right-censored covariate."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .data import CompleteRecord, Dataset, ObservedRecord, apply_scaling, load_csv, write_csv
from .outcome import NormalOutcome, RegressionParams

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "CompleteRecord",
    "Dataset",
    "NormalOutcome",
    "ObservedRecord",
    "RegressionParams",
    "apply_scaling",
    "load_csv",
    "write_csv",
]
