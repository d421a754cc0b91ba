"""Shared fixtures and the acceptance-criteria terminal summary."""

import numpy as np
import pytest

from affineflow import (
    GammaParams,
    SolverConfig,
    ball_grid,
    conformal_background,
    integrate_affine,
    series_norm_reports,
    solve_linear3d,
    solve_radial,
)

# criterion number -> (name, passed, detail); filled by tests/test_acceptance.py
RESULTS = {}


def record_criterion(num, name, passed, detail):
    RESULTS[num] = (name, bool(passed), detail)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        name, passed, detail = RESULTS[num]
        tag = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{tag}] criterion-{num} {name}: {detail}")


@pytest.fixture(scope="session")
def radial_run():
    """Nonlinear radial decay run at desk scale, reused by several tests."""
    params = GammaParams(gamma=5.0 / 3.0, delta=1.0)
    background = conformal_background(params)
    grid = ball_grid(params, "radial", 2048)
    theta0 = 1e-3 * grid.r * (1.0 - grid.r ** 2)
    cfg = SolverConfig(mode="radial-nonlinear", tau_end=8.0, snap_dtau=0.25)
    series = solve_radial(params, background, theta0, np.zeros_like(theta0),
                          grid, cfg)
    reports = series_norm_reports(params, series, background)
    return params, series, reports


@pytest.fixture(scope="session")
def aniso3d_run():
    """Linearized 3D run on an anisotropic background, gamma = 7/5."""
    params = GammaParams(gamma=1.4, delta=1.0)
    traj = integrate_affine(params, np.diag([1.2, 1.0, 1.0 / 1.2]),
                            np.eye(3), t_end=2.5e5)
    grid = ball_grid(params, "cartesian", 48)

    def theta0(y):
        r2 = (y ** 2).sum(axis=-1)
        return 1e-3 * np.maximum(0.0, 1.0 - r2)[..., None] * y

    def v0(y):
        return np.zeros_like(y)

    cfg = SolverConfig(mode="cartesian-linear", tau_end=8.0, snap_dtau=0.25)
    series = solve_linear3d(params, traj, theta0, v0, grid, cfg)
    reports = series_norm_reports(params, series, traj, linearized=True)
    return params, traj, series, reports
