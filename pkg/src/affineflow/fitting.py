"""Small least-squares helpers used by the decay diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: float
    window: tuple = (None, None)


def loglinear_fit(x, values) -> FitResult:
    """Least-squares fit of log(values) against x.

    Values must be strictly positive.  A perfect (or zero-variance) fit
    reports r2 = 1.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape != v.shape or len(x) < 2:
        raise InvalidParameterError("fit needs two 1-d arrays of equal length >= 2")
    if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
        raise InvalidParameterError("log-linear fit requires positive finite values")
    y = np.log(v)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return FitResult(slope=float(slope), intercept=float(intercept), r2=r2,
                     window=(float(x[0]), float(x[-1])))
