"""Monte Carlo laboratory for McKean-Vlasov SDEs: transport, Krylov bounds and Harnack inequalities."""

from __future__ import annotations

__version__ = "0.1.0"

from .coefficients import CoefficientSpec, build_coefficients, validate_bounds
from .model import Ensemble, MeasureFlow, PathBundle, TimeGrid
from .simulate import euler_frozen, particle_system, picard
from .transport import w_theta

__all__ = ["CoefficientSpec", "Ensemble", "MeasureFlow", "PathBundle", "TimeGrid", "__version__",
           "build_coefficients", "euler_frozen", "particle_system", "picard", "validate_bounds", "w_theta"]
