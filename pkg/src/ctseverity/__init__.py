"""Chest-CT airspace-disease severity metrics and COVID-19 classifiers.

Submodules: ``volgrid`` (grids, I/O, resampling), ``phantom`` (synthetic
cases with exact ground truth), ``lesions`` and ``metrics`` (the 32 severity
metrics), ``cluster`` (feature selection and clustering), ``forest`` (M1 and
M2), ``convnet`` (M3), ``evaluation`` (ROC, bootstrap, confusion tables),
``pipeline`` and ``cli`` (orchestration).
"""
from ._accel import get_backend, set_backend, use_backend
from .errors import CtSeverityError, ValidationError
from .lesions import RegionParams
from .metrics import METRIC_NAMES, SeverityVector, compute_all
from .volgrid import RegionLabels, Spacing, VoxelVolume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "CtSeverityError",
    "METRIC_NAMES",
    "RegionLabels",
    "RegionParams",
    "SeverityVector",
    "Spacing",
    "ValidationError",
    "VoxelVolume",
    "compute_all",
    "get_backend",
    "load_volume",
    "save_volume",
    "set_backend",
    "use_backend",
]
