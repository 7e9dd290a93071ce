"""Consistency-regularized diffusion models on Gaussian-mixture toys.

Modules: ``schedule`` (noise schedules and time grids), ``oracle`` (exact
mixture scores and denoisers), ``sde`` (reverse-time samplers), ``model``
(a small differentiable denoiser), ``losses`` (DSM and consistency
objectives with their gradient estimators), ``proptest`` (numerical checks
of the consistency theory), ``trainer`` and ``cli``.
"""

from .errors import DiffusionLabError
from .oracle import GaussianMixture, OracleDenoiser, preset
from .schedule import NoiseSchedule

__version__ = "0.1.0"

__all__ = ["DiffusionLabError", "GaussianMixture", "NoiseSchedule", "OracleDenoiser", "preset", "__version__"]
