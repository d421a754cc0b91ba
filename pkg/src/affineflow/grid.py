"""Grids on the closed unit ball with enthalpy weight and cutoff.

Two discretizations share one small interface: a cell-centered radial grid
on (0, 1) for spherically symmetric work, and a cell-centered cartesian grid
on [-1, 1]^3 masked to the ball for anisotropic work.  Both carry samples of
the enthalpy weight w(y) = delta*(gamma-1)/(2*gamma) * (1 - |y|^2) and of the
outer cutoff psi (0 inside radius 1/4, 1 outside radius 3/4, quintic bridge
between), plus midpoint quadrature over the ball.
"""

import numpy as np

from .errors import InvalidParameterError
from .params import GammaParams

R_MIN_DEFAULT = 1e-3


def smoothstep_quintic(x):
    """C^2 ramp 6x^5 - 15x^4 + 10x^3 clamped to [0, 1]."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def cutoff_profile(r):
    """Outer cutoff: 0 on r <= 1/4, 1 on r >= 3/4, smooth in between."""
    return smoothstep_quintic((np.asarray(r, dtype=float) - 0.25) / 0.5)


class RadialGrid:
    """Cell-centered grid on (0, 1): r_i = (i + 1/2) * dr, no node at 0 or 1.

    Faces sit at i * dr for i = 0..n; the outermost face carries w = 0
    exactly, which is what makes degenerate-flux schemes boundary-free.
    """

    kind = "radial"

    def __init__(self, params: GammaParams, n: int, r_min: float = R_MIN_DEFAULT):
        if n < 8:
            raise InvalidParameterError(f"radial grid needs n >= 8, got {n}")
        self.params = params
        self.n = int(n)
        self.dr = 1.0 / self.n
        self.h = self.dr
        self.r = (np.arange(self.n) + 0.5) * self.dr
        self.faces = np.arange(self.n + 1) * self.dr
        self.r_min = float(r_min)
        self.w = params.enthalpy(self.r ** 2)
        self.w_face = params.enthalpy(self.faces ** 2)
        self.psi = cutoff_profile(self.r)
        self.interior = np.ones(self.n, dtype=bool)

    def quad(self, values) -> float:
        """Midpoint quadrature of a radial profile over the ball volume."""
        return float(4.0 * np.pi * np.sum(values * self.r ** 2) * self.dr)

    def deriv(self, f):
        """d/dr of a cell profile: centered interior, one-sided 2nd order ends.

        The inner end uses the even ghost extension f(-r) = f(r); profiles
        with odd symmetry should use ``deriv_odd``.
        """
        return self._deriv(f, ghost=f[0])

    def deriv_odd(self, f):
        """d/dr for an odd profile (f(-r) = -f(r)), e.g. displacements."""
        return self._deriv(f, ghost=-f[0])

    def _deriv(self, f, ghost):
        f = np.asarray(f, dtype=float)
        out = np.empty_like(f)
        out[1:-1] = (f[2:] - f[:-2]) / (2.0 * self.dr)
        out[0] = (f[1] - ghost) / (2.0 * self.dr)
        out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * self.dr)
        return out


class CartesianGrid:
    """Cell-centered grid on [-1, 1]^3 masked to the ball |y| <= 1 - h/2."""

    kind = "cartesian"

    def __init__(self, params: GammaParams, n: int, r_min: float = R_MIN_DEFAULT):
        if n < 8:
            raise InvalidParameterError(f"cartesian grid needs n >= 8, got {n}")
        self.params = params
        self.n = int(n)
        self.h = 2.0 / self.n
        axis = -1.0 + (np.arange(self.n) + 0.5) * self.h
        self.axis = axis
        X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
        self.y = np.stack([X, Y, Z], axis=-1)
        self.r = np.sqrt(X * X + Y * Y + Z * Z)
        self.mask = self.r <= 1.0 - 0.5 * self.h
        self.r_min = float(r_min)
        self.angular_ok = self.mask & (self.r >= max(self.r_min, 1e-12))
        self.w = params.enthalpy(self.r ** 2)
        self.w[~self.mask] = 0.0
        self.psi = cutoff_profile(self.r)
        # neighbor availability per axis, for stencil selection
        self._has_lo = []
        self._has_hi = []
        for ax in range(3):
            lo = np.zeros_like(self.mask)
            hi = np.zeros_like(self.mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            src[ax], dst[ax] = slice(None, -1), slice(1, None)
            lo[tuple(dst)] = self.mask[tuple(src)]
            hi[tuple(src)] = self.mask[tuple(dst)]
            self._has_lo.append(lo & self.mask)
            self._has_hi.append(hi & self.mask)

    def quad(self, values) -> float:
        """Midpoint quadrature over the masked ball."""
        return float(np.sum(np.where(self.mask, values, 0.0)) * self.h ** 3)

    def w_at(self, points):
        """Analytic enthalpy at arbitrary points (used for face fluxes)."""
        pts = np.asarray(points, dtype=float)
        return self.params.enthalpy(np.sum(pts * pts, axis=-1))


def ball_grid(params: GammaParams, kind: str, n: int, r_min: float = R_MIN_DEFAULT):
    """Factory for run configs: kind is 'radial' or 'cartesian'."""
    if kind == "radial":
        return RadialGrid(params, n, r_min)
    if kind == "cartesian":
        return CartesianGrid(params, n, r_min)
    raise InvalidParameterError(f"unknown grid kind {kind!r}")
