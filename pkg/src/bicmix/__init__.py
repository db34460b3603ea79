"""Sparse/dense mixture factor analysis for biclustering and co-expression networks."""

import os as _os

__version__ = "0.1.0"

# BICMIX_THREADS caps BLAS threads; it only takes effect if set before numpy loads
if _os.environ.get("BICMIX_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BICMIX_THREADS"])

from .model import Bicluster, DataMatrix, Hyperparameters, ModelState, classify_component, extract_biclusters
from .simulate import SimConfig, preset, simulate
from .vem import FitConfig, FitResult, fit

__all__ = [
    "Bicluster",
    "DataMatrix",
    "FitConfig",
    "FitResult",
    "Hyperparameters",
    "ModelState",
    "SimConfig",
    "classify_component",
    "extract_biclusters",
    "fit",
    "preset",
    "simulate",
]
