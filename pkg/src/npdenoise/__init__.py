"""Point-cloud denoising by projecting points onto learned local planes."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError, DataError, DegenerateFitError, DegeneratePlaneError, FormatError,
    NPDError, NumericalError, ParseError, UsageError,
)
from .geom import Plane, PlaneSet, add_gaussian_noise, normalize_unit_cube, project_cloud, project_point  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "BACKEND", "ConfigError", "DataError", "DegenerateFitError", "DegeneratePlaneError",
    "FormatError", "NPDError", "NumericalError", "ParseError", "Plane", "PlaneSet",
    "UsageError", "__version__", "add_gaussian_noise", "normalize_unit_cube",
    "project_cloud", "project_point",
]
