"""Weighted norms, eigenframe machinery, and the diagnostic checks."""

import math

import numpy as np
import pytest
import sympy as sp

from affineflow import (
    EigenPathError,
    GammaParams,
    SolverConfig,
    ball_grid,
    conformal_background,
    curl_transport_check,
    decay_fit,
    eigen_frame,
    eigen_frame_path,
    energy_inequality_report,
    equivalence_interval,
    export_norm_csv,
    hardy_and_embedding_check,
    integrate_affine,
    key_lemma_check,
    norm_report,
    radial_norm_report,
    radial_weighted_integral,
    solve_linear3d,
    weighted_norm,
)
from affineflow.norms import NormReport, _eigen_quadratic

P53 = GammaParams(gamma=5.0 / 3.0, delta=1.0)
P14 = GammaParams(gamma=1.4, delta=1.0)


def spd_matrix(seed, scale=0.5):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((3, 3))
    lam = np.eye(3) + scale * (S + S.T) * 0.5
    return lam @ lam.T


# ---------------------------------------------------------------------------
# weighted norms


def test_weighted_norm_unit_ball_volume():
    grid = ball_grid(P53, "radial", 2048)
    ones = np.ones(grid.n)
    vol = weighted_norm(grid, ones, 0, side="both")
    assert vol == pytest.approx(4.0 * math.pi / 3.0, rel=1e-6)
    # the two cutoff sides partition the ball
    split = (weighted_norm(grid, ones, 0, "psi")
             + weighted_norm(grid, ones, 0, "one_minus_psi"))
    assert split == pytest.approx(vol, rel=1e-12)


def test_weighted_norm_enthalpy_closed_form():
    # int w^alpha dy for gamma = 5/3 equals 0.2^{3/2} pi^2 / 8
    exact = 0.2 ** 1.5 * math.pi ** 2 / 8.0
    grid_r = ball_grid(P53, "radial", 2048)
    got_r = weighted_norm(grid_r, np.ones(grid_r.n), P53.alpha, "both")
    assert got_r == pytest.approx(exact, rel=1e-5)
    grid_c = ball_grid(P53, "cartesian", 32)
    got_c = weighted_norm(grid_c, np.ones_like(grid_c.r), P53.alpha, "both")
    assert got_c == pytest.approx(exact, rel=2e-3)


def test_weighted_norm_zero_and_validation():
    grid = ball_grid(P53, "radial", 128)
    assert weighted_norm(grid, np.zeros(grid.n), 2, "both") == 0.0
    from affineflow import InvalidParameterError
    with pytest.raises(InvalidParameterError):
        weighted_norm(grid, np.ones(grid.n), -1, "both")
    with pytest.raises(InvalidParameterError):
        weighted_norm(grid, np.ones(grid.n), 0, "outer")


def test_radial_weighted_integral_polynomial_oracle():
    # fn = r^2, k = 2, gamma = 7/5: the integrand is a polynomial, so both
    # the Gauss rule and the symbolic integral are exact
    r = sp.Symbol("r", positive=True)
    w = (1 - r ** 2) / 7
    exact = float(4 * sp.pi * sp.integrate(w ** 2 * r ** 4 * r ** 2, (r, 0, 1)))
    got = radial_weighted_integral(P14, lambda rr: rr ** 2, 2, "both")
    assert got == pytest.approx(exact, rel=1e-13)


# ---------------------------------------------------------------------------
# eigenframe


def test_eigen_frame_reconstruction():
    for seed in range(5):
        lam = spd_matrix(seed)
        d, P = eigen_frame(lam)
        assert d[0] >= d[1] >= d[2] > 0.0
        assert np.linalg.det(P) == pytest.approx(1.0, abs=1e-12)
        assert np.abs(P @ P.T - np.eye(3)).max() <= 1e-12
        rebuilt = P.T @ np.diag(d) @ P
        assert np.abs(rebuilt - lam).max() <= 1e-12


def test_eigen_quadratic_two_routes():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((4, 2, 3, 3))
    lam = spd_matrix(11)
    d, P = eigen_frame(lam)
    got = _eigen_quadratic(W, P, d)
    M = np.einsum("ab,...bc,dc->...ad", P, W, P)
    expected = np.zeros(W.shape[:-2])
    for k in range(3):
        for el in range(3):
            expected += d[k] / d[el] * M[..., k, el] ** 2
    assert np.abs(got - expected).max() <= 1e-12
    # with equal eigenvalues the quadratic collapses to the Frobenius norm
    ones = np.ones(3)
    frob = _eigen_quadratic(W, np.eye(3), ones)
    assert np.abs(frob - np.sum(W * W, axis=(-2, -1))).max() <= 1e-12


def test_eigen_frame_path_continuity():
    base = np.diag([3.0, 2.0, 1.0])
    angles = np.linspace(0.0, 0.8, 17)
    lams = []
    for th in angles:
        c, s = math.cos(th), math.sin(th)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        lams.append(R @ base @ R.T)
    d_path, P_path = eigen_frame_path(np.stack(lams))
    assert np.abs(d_path - np.array([3.0, 2.0, 1.0])).max() <= 1e-12
    for s in range(1, len(angles)):
        overlap = np.abs(np.sum(P_path[s] * P_path[s - 1], axis=1))
        assert overlap.min() >= 0.99


def test_eigen_frame_path_rejects_crossing():
    svals = np.linspace(0.0, 1.0, 21)
    lams = np.stack([np.diag([1.0 + s, 2.0 - s, 3.0]) for s in svals])
    with pytest.raises(EigenPathError):
        eigen_frame_path(lams)


# ---------------------------------------------------------------------------
# norm reports


def test_norm_report_zero_data():
    grid = ball_grid(P53, "cartesian", 16)
    bg = conformal_background(P53, t_end=10.0)
    fr = bg.frame_at_tau(0.5)
    z = np.zeros_like(grid.y)
    rep = norm_report(P53, grid, fr, z, z)
    assert rep.S == 0.0 and rep.E == 0.0 and rep.D == 0.0
    assert rep.B_V == 0.0 and rep.B_theta == 0.0
    assert math.isnan(rep.ratio)


def test_norm_report_quadratic_homogeneity():
    grid = ball_grid(P53, "cartesian", 16)
    bg = conformal_background(P53, t_end=10.0)
    fr = bg.frame_at_tau(0.8)
    rng = np.random.default_rng(5)
    C = rng.standard_normal((3, 3)) * 0.05
    Cv = rng.standard_normal((3, 3)) * 0.05
    r2 = (grid.y ** 2).sum(axis=-1)
    theta = (1.0 - r2)[..., None] * (grid.y @ C.T)
    V = (1.0 - r2)[..., None] * (grid.y @ Cv.T)
    rep1 = norm_report(P53, grid, fr, theta, V, N=1, linearized=True)
    rep2 = norm_report(P53, grid, fr, 2.0 * theta, 2.0 * V, N=1,
                       linearized=True)
    for attr in ("S", "B_V", "B_theta", "E"):
        a, b = getattr(rep1, attr), getattr(rep2, attr)
        assert b == pytest.approx(4.0 * a, rel=1e-12)
    assert rep2.D == pytest.approx(4.0 * rep1.D, rel=1e-12, abs=1e-300)


def test_linear_displacement_matches_radial_quadrature():
    # theta = eps*y has |theta|^2 = eps^2 r^2; the grid sum must match the
    # 1D Gauss oracle for the same weighted integral
    eps = 1e-2
    grid = ball_grid(P53, "cartesian", 40)
    bg = conformal_background(P53, t_end=10.0)
    fr = bg.frame_at_tau(0.0)
    theta = eps * grid.y
    rep = norm_report(P53, grid, fr, theta, np.zeros_like(theta),
                      linearized=True)
    slot = (0, (0, 0, 0))
    got = rep.psi_entries[slot]["theta"] + rep.nu_entries[(0, 0, 0)]["theta"]
    oracle = eps ** 2 * radial_weighted_integral(P53, lambda r: r,
                                                 P53.alpha, "both")
    # w^alpha has a kink at the boundary, so the midpoint rule converges
    # slower than O(h^2) here
    assert got == pytest.approx(oracle, rel=5e-3)
    # gradient is eps*Id: squared Frobenius 3 eps^2, divergence 3 eps
    grad = rep.psi_entries[slot]["grad_eta_theta"] \
        + rep.nu_entries[(0, 0, 0)]["grad_eta_theta"]
    div = rep.psi_entries[slot]["div_eta_theta"] \
        + rep.nu_entries[(0, 0, 0)]["div_eta_theta"]
    base = radial_weighted_integral(P53, lambda r: np.ones_like(r),
                                    P53.alpha + 1, "both")
    assert grad == pytest.approx(3.0 * eps ** 2 * base, rel=2e-3)
    assert div == pytest.approx(9.0 * eps ** 2 * base, rel=2e-3)


def test_radial_and_cartesian_reports_agree():
    # same displacement measured by the radial formulas and by the full
    # 3D machinery; gamma = 7/5 so the dissipation term is active
    traj = integrate_affine(P14, np.eye(3), np.eye(3), t_end=100.0)
    fr = traj.frame_at_tau(0.7)

    def prof_t(r):
        return 0.01 * r * (1.0 - r ** 2)

    def prof_v(r):
        return 0.004 * r * (1.0 - 0.5 * r ** 2)

    grid_r = ball_grid(P14, "radial", 2048)
    rep_r = radial_norm_report(P14, grid_r, fr, prof_t(grid_r.r),
                               prof_v(grid_r.r))

    grid_c = ball_grid(P14, "cartesian", 48)
    rr = np.maximum(grid_c.r, 1e-300)
    theta = (prof_t(rr) / rr)[..., None] * grid_c.y
    V = (prof_v(rr) / rr)[..., None] * grid_c.y
    rep_c = norm_report(P14, grid_c, fr, theta, V)

    assert rep_c.S == pytest.approx(rep_r.S, rel=1e-2)
    assert rep_c.E == pytest.approx(rep_r.E, rel=1e-2)
    assert rep_c.D == pytest.approx(rep_r.D, rel=1e-2)
    assert rep_r.B_V == 0.0
    # curl of a radial field is pure discretization noise
    assert rep_c.B_V <= 1e-8 * rep_c.S
    assert rep_c.B_theta <= 1e-8 * rep_c.S


def test_dissipation_sign_tracks_adiabatic_index():
    profiles = {}
    for gamma in (4.0 / 3.0, 5.0 / 3.0, 2.0):
        params = GammaParams(gamma=gamma, delta=1.0)
        traj = integrate_affine(params, np.eye(3), np.eye(3), t_end=100.0)
        fr = traj.frame_at_tau(1.0)
        assert fr.mu_rate > 0.0
        grid = ball_grid(params, "radial", 256)
        V = 0.01 * grid.r * (1.0 - grid.r ** 2)
        rep = radial_norm_report(params, grid, fr, np.zeros_like(V), V)
        profiles[gamma] = rep.D
    assert profiles[4.0 / 3.0] > 0.0
    assert profiles[5.0 / 3.0] == 0.0
    assert profiles[2.0] < 0.0


def test_export_norm_csv_columns(tmp_path):
    grid = ball_grid(P53, "radial", 128)
    bg = conformal_background(P53, t_end=10.0)
    theta = 1e-3 * grid.r * (1.0 - grid.r ** 2)
    reps = [radial_norm_report(P53, grid, bg.frame_at_tau(tau), theta,
                               np.zeros_like(theta)) for tau in (0.0, 0.5)]
    path = tmp_path / "norms.csv"
    export_norm_csv(path, reps)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header[:7] == ["tau", "S", "B_V", "B_theta", "E", "D", "ratio_E_S"]
    assert "psi_a0b000_V" in header
    assert "nu000_curl_theta" in header
    assert len(lines) == 3
    first = dict(zip(header, (float(x) for x in lines[1].split(","))))
    assert first["tau"] == 0.0
    assert first["S"] == pytest.approx(reps[0].S, rel=1e-15)


# ---------------------------------------------------------------------------
# trace identity


def test_key_lemma_zero_and_polynomial():
    lam = spd_matrix(2)
    zero = {"M": lambda tau: np.zeros((3, 3)),
            "L": lambda tau: lam}
    out = key_lemma_check(zero["M"], zero["L"], [0.5])
    assert out["max_residual"] == 0.0

    rng = np.random.default_rng(8)
    B = rng.standard_normal((3, 3))
    C = rng.standard_normal((3, 3))
    poly = key_lemma_check(lambda tau: tau * B + C, lambda tau: lam,
                           np.linspace(0.3, 0.9, 4))
    assert poly["max_residual"] <= 1e-10


def test_key_lemma_generic_paths():
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        Msym = rng.standard_normal((3, 3))
        Mskew = rng.standard_normal((3, 3))
        base = rng.standard_normal((3, 3)) * 0.3

        def M_of_tau(tau):
            return np.cos(tau) * Msym + np.sin(1.7 * tau) * Mskew

        def Lam_of_tau(tau):
            S = base * math.sin(0.9 * tau)
            sym = 0.5 * (S + S.T)
            return np.eye(3) + 0.2 * sym + 0.4 * sym @ sym

        out = key_lemma_check(M_of_tau, Lam_of_tau,
                              np.linspace(0.2, 1.0, 5))
        assert out["max_residual"] <= 1e-6


# ---------------------------------------------------------------------------
# vorticity transport


def test_curl_transport_zero_data():
    bg = conformal_background(P53, t_end=10.0)
    grid = ball_grid(P53, "cartesian", 12)
    z = np.zeros_like(grid.y)
    cfg = SolverConfig(mode="cartesian-linear", tau_end=0.5, snap_dtau=0.1)
    series = solve_linear3d(P53, bg, z, z, grid, cfg)
    report = curl_transport_check(P53, series, bg)
    assert report["max_rel_residual"] == 0.0
    assert not report["cadence_limited"]
    assert max(report["b0"]) == 0.0


def test_curl_transport_radial_data_stays_curl_free():
    bg = conformal_background(P53, t_end=100.0)
    grid = ball_grid(P53, "cartesian", 16)

    def theta0(y):
        r2 = (y ** 2).sum(axis=-1)
        return 1e-3 * np.maximum(0.0, 1.0 - r2)[..., None] * y

    def v0(y):
        return np.zeros_like(y)

    cfg = SolverConfig(mode="cartesian-linear", tau_end=1.0, snap_dtau=0.1)
    series = solve_linear3d(P53, bg, theta0, v0, grid, cfg)
    report = curl_transport_check(P53, series, bg)
    assert max(report["b0"]) <= 1e-9


def test_curl_transport_generic_run():
    bg = conformal_background(P53, t_end=100.0)
    grid = ball_grid(P53, "cartesian", 16)
    rng = np.random.default_rng(4)
    C = rng.standard_normal((3, 3)) * 1e-3
    Cv = rng.standard_normal((3, 3)) * 1e-3

    def theta0(y):
        r2 = (y ** 2).sum(axis=-1)
        return np.maximum(0.0, 1.0 - r2)[..., None] * (y @ C.T)

    def v0(y):
        r2 = (y ** 2).sum(axis=-1)
        return np.maximum(0.0, 1.0 - r2)[..., None] * (y @ Cv.T)

    cfg = SolverConfig(mode="cartesian-linear", tau_end=1.0, snap_dtau=0.05)
    series = solve_linear3d(P53, bg, theta0, v0, grid, cfg)
    report = curl_transport_check(P53, series, bg)
    assert report["b0"][0] > 0.0
    assert report["max_rel_residual"] <= 0.2
    assert not report["cadence_limited"]
    assert report["target_rate"] == pytest.approx(-2.0, rel=1e-6)


def test_aniso_curl_norm_decay_rate(aniso3d_run):
    # squared twisted-curl norm of V against the reference rate 2*mu0
    params, traj, series, reports = aniso3d_run
    mu1 = traj.frame_at_tau(series.taus[-1]).mu_rate
    mu0 = params.mu0(mu1)
    vals = np.array([rep.B_V for rep in reports])
    taus = np.array([rep.tau for rep in reports])
    fit = decay_fit(taus, vals)
    assert fit.r2 >= 0.99
    assert abs(fit.slope + 2.0 * mu0) / (2.0 * mu0) <= 0.20, (
        f"fitted curl-norm rate {fit.slope:.4f} vs -2*mu0 = {-2.0 * mu0:.4f}")


# ---------------------------------------------------------------------------
# inequalities and intervals


def test_hardy_and_embedding_closed_forms():
    out = hardy_and_embedding_check(P53)
    assert out["all_hold"]
    assert out["max_drift"] <= 1e-3
    by_name = {e["name"]: e for e in out["entries"]}
    e0 = by_name["g=1-r, k=0"]
    assert e0["left_error"] <= 1e-12
    assert e0["closed_form_left"] == pytest.approx(1.0 / 3.0, rel=1e-15)
    e1 = by_name["g=1, k=1"]
    assert e1["left_error"] <= 1e-12
    trace = by_name["g=r^2 - 1 traced, k=-3/2"]
    assert math.isfinite(trace["ratio"]) and trace["ratio"] > 0.0
    sup = by_name["annulus sup embedding"]
    assert sup["ratio"] <= 1.0  # sup is controlled by the graded sum


def test_hardy_check_other_index():
    out = hardy_and_embedding_check(P14, levels=(120, 240))
    assert out["all_hold"]


def test_equivalence_interval_synthetic():
    reps = [NormReport(tau=float(k), S=2.0 + k, B_V=0.0, B_theta=0.0,
                       E=1.0 + 0.1 * k, D=0.0) for k in range(3)]
    out = equivalence_interval(reps)
    assert out["lo"] == pytest.approx(1.2 / 4.0)
    assert out["hi"] == pytest.approx(0.5)
    assert out["spread"] == pytest.approx(0.5 / 0.3)
    empty = equivalence_interval([NormReport(tau=0.0, S=0.0, B_V=0.0,
                                             B_theta=0.0, E=0.0, D=0.0)])
    assert math.isnan(empty["spread"])


def test_energy_inequality_synthetic():
    taus = np.linspace(0.0, 6.0, 100)
    E = np.exp(-taus)
    S = np.exp(-taus)
    out = energy_inequality_report(taus, E, S, mu0=1.0)
    assert out["c_fit"] == pytest.approx(1.0, abs=1e-12)
    assert all(r <= 1.0 + 1e-12 for r in out["ratios"])
