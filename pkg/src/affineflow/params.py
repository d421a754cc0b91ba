"""Physical parameters of the expanding gas ball.

The gas is polytropic with pressure rho**gamma.  All derived constants used
throughout the package (polytropic exponent alpha, enthalpy coefficient,
expansion rates) live on ``GammaParams`` so that every module draws them from
one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidParameterError


@dataclass(frozen=True)
class GammaParams:
    """Adiabatic exponent and central enthalpy scale.

    Parameters
    ----------
    gamma : float
        Adiabatic exponent, must be > 1.
    delta : float
        Positive enthalpy normalisation.  The steady enthalpy profile is
        ``w(y) = delta * (gamma - 1) / (2 * gamma) * (1 - |y|**2)`` on the
        unit ball.
    """

    gamma: float = 5.0 / 3.0
    delta: float = 1.0

    def __post_init__(self):
        if not (self.gamma > 1.0):
            raise InvalidParameterError(f"gamma must exceed 1, got {self.gamma}")
        if not (self.delta > 0.0):
            raise InvalidParameterError(f"delta must be positive, got {self.delta}")
        if not (math.isfinite(self.gamma) and math.isfinite(self.delta)):
            raise InvalidParameterError("gamma and delta must be finite")

    @property
    def alpha(self) -> float:
        """Polytropic index 1 / (gamma - 1); the density is w**alpha."""
        return 1.0 / (self.gamma - 1.0)

    @property
    def w_coeff(self) -> float:
        """Coefficient of (1 - r**2) in the steady enthalpy profile."""
        return self.delta * (self.gamma - 1.0) / (2.0 * self.gamma)

    @property
    def damping_exponent(self) -> float:
        """Exponent 3*gamma - 3 governing the inertial weight mu**(3*gamma-3)."""
        return 3.0 * self.gamma - 3.0

    def mu0(self, mu1: float) -> float:
        """Slow rate (3*gamma - 3)/2 * mu1 paired with a mean expansion rate mu1.

        Equals mu1 exactly when gamma = 5/3.
        """
        return 0.5 * (3.0 * self.gamma - 3.0) * mu1

    def enthalpy(self, r2):
        """Steady enthalpy w as a function of |y|**2, clipped to zero outside."""
        import numpy as np

        return self.w_coeff * np.maximum(0.0, 1.0 - r2)
