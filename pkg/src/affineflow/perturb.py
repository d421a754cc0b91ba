"""Evolution of Lagrangian perturbations around an expanding background.

Two solvers share the damped-wave structure in the slow time tau:

* ``solve_radial``: the full nonlinear dynamics restricted to spherical
  symmetry over a conformal (isotropic) background, evolving the radial
  flow map R(tau, r) = r + theta(tau, r) in well-balanced flux form, so
  the unperturbed state is an exact fixed point of the discrete scheme;
* ``solve_linear3d``: the linearized system on a Cartesian ball grid with
  the full anisotropic frame data Lambda(tau), Gamma*(tau), mu(tau)
  supplied by a background trajectory.

Both use explicit RK4 stepping under a CFL bound tied to mu^{3-3gamma},
divergence-form fluxes with the degenerate weight w^{1+alpha} evaluated
analytically at faces (vanishing at |y| = 1, so no boundary condition is
imposed), and an energy monitor that aborts cleanly on instability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from .errors import (ConfigError, DegenerateFlowError, IntegrationError,
                     InvalidParameterError)
from .fitting import FitResult, loglinear_fit
from .grid import CartesianGrid, RadialGrid
from .params import GammaParams

CFL_FLOOR = 0.05


@dataclass
class SolverConfig:
    mode: str
    tau_end: float
    cfl: float = 0.4
    snap_dtau: float = 0.25

    def __post_init__(self):
        if self.mode not in ("radial-nonlinear", "cartesian-linear"):
            raise ConfigError(f"unknown solver mode {self.mode!r}")
        if not (0.0 < self.cfl < 1.0):
            raise ConfigError(f"cfl must lie in (0, 1), got {self.cfl}")
        if not (self.tau_end > 0.0):
            raise ConfigError(f"tau_end must be positive, got {self.tau_end}")
        if not (self.snap_dtau > 0.0):
            raise ConfigError(f"snap_dtau must be positive, got {self.snap_dtau}")


@dataclass
class PerturbationField:
    """One snapshot: radial mode stores scalar profiles, 3D stores vectors."""

    tau: float
    theta: np.ndarray
    V: np.ndarray


@dataclass
class PerturbationSeries:
    mode: str
    params: GammaParams
    grid: object
    background: object
    config: SolverConfig
    snapshots: list
    energy_taus: np.ndarray
    energy: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def taus(self):
        return np.array([snap.tau for snap in self.snapshots])


def _as_profile(data, r):
    arr = data(r) if callable(data) else np.asarray(data, dtype=float)
    if arr.shape != r.shape:
        raise InvalidParameterError("radial profile shape does not match the grid")
    return arr.astype(float)


def _as_vector_field(data, grid):
    arr = data(grid.y) if callable(data) else np.asarray(data, dtype=float)
    if arr.shape != grid.y.shape:
        raise InvalidParameterError("vector field shape does not match the grid")
    out = arr.astype(float).copy()
    out[~grid.mask] = 0.0
    return out


class _Unstable(Exception):
    def __init__(self, tau):
        self.tau = tau


def _require_conformal(background):
    fr = background.frame_at_tau(0.0)
    if (np.abs(fr.Lambda - np.eye(3)).max() > 1e-9
            or np.abs(fr.Gamma_star).max() > 1e-9):
        raise InvalidParameterError(
            "radial solver needs a conformal background (Lambda = Id, Gamma* = 0)")


def _require_horizon(background, cfg):
    bg_end = getattr(background, "tau_end", math.inf)
    if cfg.tau_end > bg_end + 1e-9:
        raise InvalidParameterError(
            f"tau_end={cfg.tau_end} exceeds the background horizon {bg_end:.4f}; "
            "integrate the background further")


def solve_radial(params: GammaParams, background, theta0, V0,
                 grid: RadialGrid, cfg: SolverConfig) -> PerturbationSeries:
    """Nonlinear radial dynamics of R(tau, r) = r + theta in flux form.

    The pressure flux is written as w^{1+alpha}(J_f^{-gamma} - 1) with the
    face Jacobian J_f = R_f^2 (dR/dr)_f / r_f^2, and the zeroth-order term
    as delta w^alpha (R - R^2/r).  Both vanish identically at R = r, so
    zero data is preserved to rounding.  Spatial faces use second-order
    averages; the origin face takes J = (R_0/r_0)^3 by odd symmetry and
    the outer face flux vanishes with the weight.
    """
    if cfg.mode != "radial-nonlinear":
        raise ConfigError("solve_radial requires mode 'radial-nonlinear'")
    _require_conformal(background)
    _require_horizon(background, cfg)
    gamma, delta, alpha = params.gamma, params.delta, params.alpha
    r = grid.r
    dr = grid.dr
    r_face = grid.faces
    wf = grid.w_face ** (1.0 + alpha)
    wa = grid.w ** alpha
    theta_init = _as_profile(theta0, r)
    v_init = _as_profile(V0, r)

    def face_jacobian(R):
        R_f = 0.5 * (R[:-1] + R[1:])
        R_r = (R[1:] - R[:-1]) / dr
        J = np.empty(grid.n + 1)
        J[0] = (R[0] / r[0]) ** 3
        J[1:-1] = R_f ** 2 * R_r / r_face[1:-1] ** 2
        J[-1] = 1.0  # outer face carries zero weight
        return J

    def accel(tau_now, R, V, fr):
        J = face_jacobian(R)
        if J.min() <= 0.0:
            raise DegenerateFlowError(
                f"face Jacobian hit {J.min():.3e} at tau={tau_now:.4f}", where=tau_now)
        G = wf * (J ** -gamma - 1.0)
        S = (R ** 2 / r ** 2) * (G[1:] - G[:-1]) / dr / wa + delta * (R - R ** 2 / r)
        return -fr.mu_rate * V - fr.mu ** (3.0 - 3.0 * gamma) * S

    def monitor(R, V, fr):
        th = R - r
        return grid.quad(wa * (fr.mu ** (3.0 * gamma - 3.0) * V ** 2 + delta * th ** 2))

    w_max = params.w_coeff
    cfl_eff = cfg.cfl
    attempt = 0
    while True:
        R = r + theta_init
        V = v_init.copy()
        tau = 0.0
        snaps = [PerturbationField(tau=0.0, theta=R - r, V=V.copy())]
        e_taus, e_vals = [0.0], [monitor(R, V, background.frame_at_tau(0.0))]
        e0 = e_vals[0]
        next_snap = cfg.snap_dtau
        try:
            while tau < cfg.tau_end - 1e-12:
                fr = background.frame_at_tau(tau)
                c = math.sqrt(gamma * w_max * fr.mu ** (3.0 - 3.0 * gamma))
                dtau = min(cfl_eff * dr / c, cfg.snap_dtau, cfg.tau_end - tau)
                fr_mid = background.frame_at_tau(tau + 0.5 * dtau)
                fr_end = background.frame_at_tau(tau + dtau)
                k1r, k1v = V, accel(tau, R, V, fr)
                k2r = V + 0.5 * dtau * k1v
                k2v = accel(tau, R + 0.5 * dtau * k1r, k2r, fr_mid)
                k3r = V + 0.5 * dtau * k2v
                k3v = accel(tau, R + 0.5 * dtau * k2r, k3r, fr_mid)
                k4r = V + dtau * k3v
                k4v = accel(tau, R + dtau * k3r, k4r, fr_end)
                R = R + dtau / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
                V = V + dtau / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
                tau += dtau
                e = monitor(R, V, fr_end)
                if not np.isfinite(e) or (e0 > 0 and e > 10.0 * e0):
                    raise _Unstable(tau)
                e_taus.append(tau)
                e_vals.append(e)
                if tau >= next_snap - 1e-12:
                    snaps.append(PerturbationField(tau=tau, theta=R - r, V=V.copy()))
                    next_snap += cfg.snap_dtau
        except _Unstable as bad:
            attempt += 1
            cfl_eff *= 0.5
            if cfl_eff < CFL_FLOOR:
                raise IntegrationError(
                    f"radial run unstable at tau={bad.tau:.4f} even at cfl={cfl_eff * 2:.3f}",
                    last_state={"tau": bad.tau, "attempts": attempt})
            continue
        break
    if snaps[-1].tau < cfg.tau_end - 1e-9:
        snaps.append(PerturbationField(tau=tau, theta=R - r, V=V.copy()))
    return PerturbationSeries(
        mode=cfg.mode, params=params, grid=grid, background=background,
        config=cfg, snapshots=snaps,
        energy_taus=np.array(e_taus), energy=np.array(e_vals),
        meta={"cfl_used": cfl_eff, "restarts": attempt})


def _ghost_filler(mask):
    """Build a function extending a field one layer past the mask.

    Cells just outside the mask receive, per axis direction with a masked
    face neighbor, the linear extrapolation 2*theta[n] - theta[nn] (falling
    back to theta[n] when the second cell is unmasked), averaged over the
    available directions.  The scheme then sees a first-degree continuation
    of the unresolved boundary layer instead of an artificial Dirichlet
    wall at |y| = 1 - h/2.
    """
    def shift(arr, axis, k):
        out = np.zeros_like(arr)
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        if k > 0:
            src[axis], dst[axis] = slice(0, -k), slice(k, None)
        else:
            src[axis], dst[axis] = slice(-k, None), slice(0, k)
        out[tuple(dst)] = arr[tuple(src)]
        return out

    maskf = mask.astype(float)
    dirs = [(axis, k) for axis in range(3) for k in (1, -1)]
    near = {d: shift(maskf, d[0], d[1]) for d in dirs}
    far = {d: shift(maskf, d[0], 2 * d[1]) for d in dirs}
    counts = np.zeros(mask.shape)
    for d in dirs:
        counts += near[d]
    rim = (~mask) & (counts > 0)
    safe = np.where(rim, counts, 1.0)

    def fill(theta):
        masked = theta * maskf[..., None]
        acc = np.zeros_like(theta)
        for d in dirs:
            v1 = shift(masked, d[0], d[1])
            v2 = shift(masked, d[0], 2 * d[1])
            pair = (near[d] * far[d])[..., None]
            lone = (near[d] * (1.0 - far[d]))[..., None]
            acc += pair * (2.0 * v1 - v2) + lone * v1
        out = masked.copy()
        out[rim] = acc[rim] / safe[rim, None]
        return out

    return fill


def _linear_operator(grid: CartesianGrid, params: GammaParams, wf_faces, wa_safe):
    """Return L(theta, Lambda) = div(w^{1+alpha} Lambda T) / w^alpha.

    T^k_j = d_j theta^k + (1/alpha) delta^k_j div(theta).  Fluxes live on
    faces along each axis; the normal derivative is a face difference and
    tangential derivatives are averaged centered cell differences, all
    second order.  Array-edge faces carry zero flux (they lie at |y| >= 1).
    """
    n = grid.n
    h = grid.h
    inv_alpha = 1.0 / params.alpha
    fill = _ghost_filler(grid.mask)

    def centered(fld, axis):
        out = np.zeros_like(fld)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        mid = [slice(None)] * 3
        lo[axis], hi[axis], mid[axis] = slice(0, -2), slice(2, None), slice(1, -1)
        out[tuple(mid)] = (fld[tuple(hi)] - fld[tuple(lo)]) / (2.0 * h)
        return out

    def apply(theta_raw, Lambda):
        theta = fill(theta_raw)
        grad_cell = [[centered(theta[..., comp], ax) for ax in range(3)]
                     for comp in range(3)]
        div_cell = grad_cell[0][0] + grad_cell[1][1] + grad_cell[2][2]
        L = np.zeros_like(theta)
        for k in range(3):
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[k], sl_hi[k] = slice(0, -1), slice(1, None)
            sl_lo, sl_hi = tuple(sl_lo), tuple(sl_hi)
            wf = wf_faces[k]
            # face gradient of component k and face divergence
            dface = {}
            for j in range(3):
                if j == k:
                    dface[j] = (theta[sl_hi + (k,)] - theta[sl_lo + (k,)]) / h
                else:
                    dface[j] = 0.5 * (grad_cell[k][j][sl_hi] + grad_cell[k][j][sl_lo])
            div_face = (theta[sl_hi + (k,)] - theta[sl_lo + (k,)]) / h
            for j in range(3):
                if j != k:
                    div_face = div_face + 0.5 * (grad_cell[j][j][sl_hi]
                                                 + grad_cell[j][j][sl_lo])
            for i in range(3):
                G = wf * (Lambda[i, 0] * dface[0] + Lambda[i, 1] * dface[1]
                          + Lambda[i, 2] * dface[2]
                          + inv_alpha * Lambda[i, k] * div_face)
                flux = np.zeros(theta.shape[:3])
                pad_lo = [slice(None)] * 3
                pad_hi = [slice(None)] * 3
                pad_lo[k], pad_hi[k] = slice(0, -1), slice(1, None)
                flux[tuple(pad_lo)] += G
                flux[tuple(pad_hi)] -= G
                L[..., i] += flux / h
        return L * wa_safe[..., None]

    return apply


def solve_linear3d(params: GammaParams, background, theta0, V0,
                   grid: CartesianGrid, cfg: SolverConfig) -> PerturbationSeries:
    """Linearized perturbation dynamics with anisotropic frame data.

    theta_tautau = -(mu_rate + 2 Gamma*) theta_tau
                   - mu^{3-3gamma} [delta Lambda theta - div(w^{1+alpha}
                     Lambda T)/w^alpha],
    with T the linearized stress.  Instability (monitor energy beyond 10x
    initial) aborts in the gamma <= 5/3 regime after CFL back-off.
    """
    if cfg.mode != "cartesian-linear":
        raise ConfigError("solve_linear3d requires mode 'cartesian-linear'")
    _require_horizon(background, cfg)
    gamma, delta, alpha = params.gamma, params.delta, params.alpha
    h = grid.h
    mask3 = grid.mask[..., None]
    wa = np.where(grid.mask, grid.w, 1.0) ** alpha
    wa_safe = np.where(grid.mask, 1.0 / wa, 0.0)

    wf_faces = []
    ax = grid.axis
    face_ax = 0.5 * (ax[:-1] + ax[1:])
    for k in range(3):
        coords = [ax, ax, ax]
        coords[k] = face_ax
        Xf = np.meshgrid(*coords, indexing="ij")
        r2 = Xf[0] ** 2 + Xf[1] ** 2 + Xf[2] ** 2
        wf_faces.append(params.enthalpy(r2) ** (1.0 + alpha))

    apply_L = _linear_operator(grid, params, wf_faces, wa_safe)
    theta_init = _as_vector_field(theta0, grid)
    v_init = _as_vector_field(V0, grid)

    def accel(theta, V, fr):
        lam = fr.Lambda
        damping = V * fr.mu_rate + 2.0 * V @ fr.Gamma_star.T
        stiff = delta * theta @ lam.T - apply_L(theta, lam)
        out = -damping - fr.mu ** (3.0 - 3.0 * gamma) * stiff
        return out * mask3

    def monitor(theta, V, fr):
        mu_fac = fr.mu ** (3.0 * gamma - 3.0)
        dens = wa * (mu_fac * (V ** 2).sum(axis=-1) + delta * (theta ** 2).sum(axis=-1))
        return grid.quad(np.where(grid.mask, dens, 0.0))

    w_max = params.w_coeff
    abort_on_growth = gamma <= 5.0 / 3.0 + 1e-12
    cfl_eff = cfg.cfl
    attempt = 0
    while True:
        theta = theta_init.copy()
        V = v_init.copy()
        tau = 0.0
        snaps = [PerturbationField(tau=0.0, theta=theta.copy(), V=V.copy())]
        e_taus, e_vals = [0.0], [monitor(theta, V, background.frame_at_tau(0.0))]
        e0 = e_vals[0]
        next_snap = cfg.snap_dtau
        try:
            while tau < cfg.tau_end - 1e-12:
                fr = background.frame_at_tau(tau)
                lam_max = float(np.linalg.eigvalsh(fr.Lambda)[-1])
                c = math.sqrt(gamma * lam_max * w_max
                              * fr.mu ** (3.0 - 3.0 * gamma))
                dtau = min(cfl_eff * h / c, cfg.snap_dtau, cfg.tau_end - tau)
                fr_mid = background.frame_at_tau(tau + 0.5 * dtau)
                fr_end = background.frame_at_tau(tau + dtau)
                k1t, k1v = V, accel(theta, V, fr)
                k2t = V + 0.5 * dtau * k1v
                k2v = accel(theta + 0.5 * dtau * k1t, k2t, fr_mid)
                k3t = V + 0.5 * dtau * k2v
                k3v = accel(theta + 0.5 * dtau * k2t, k3t, fr_mid)
                k4t = V + dtau * k3v
                k4v = accel(theta + dtau * k3t, k4t, fr_end)
                theta = theta + dtau / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
                V = V + dtau / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
                tau += dtau
                e = monitor(theta, V, fr_end)
                e_taus.append(tau)
                e_vals.append(e)
                if not np.isfinite(e) or (
                        abort_on_growth and e0 > 0 and e > 10.0 * e0):
                    raise _Unstable(tau)
                if tau >= next_snap - 1e-12:
                    snaps.append(PerturbationField(tau=tau, theta=theta.copy(),
                                                   V=V.copy()))
                    next_snap += cfg.snap_dtau
        except _Unstable as bad:
            attempt += 1
            cfl_eff *= 0.5
            if cfl_eff < CFL_FLOOR:
                raise IntegrationError(
                    f"3D linear run unstable at tau={bad.tau:.4f}; "
                    f"energy exceeded 10x initial",
                    last_state={"tau": bad.tau, "attempts": attempt})
            continue
        break
    if snaps[-1].tau < cfg.tau_end - 1e-9:
        snaps.append(PerturbationField(tau=tau, theta=theta.copy(), V=V.copy()))
    return PerturbationSeries(
        mode=cfg.mode, params=params, grid=grid, background=background,
        config=cfg, snapshots=snaps,
        energy_taus=np.array(e_taus), energy=np.array(e_vals),
        meta={"cfl_used": cfl_eff, "restarts": attempt})


def weighted_l2(series: PerturbationSeries, which="V") -> np.ndarray:
    """sqrt of the w^alpha-weighted L2 norm of V or theta per snapshot."""
    grid = series.grid
    alpha = series.params.alpha
    if series.mode == "radial-nonlinear":
        wa = grid.w ** alpha
        out = [math.sqrt(max(grid.quad(wa * getattr(s, which) ** 2), 0.0))
               for s in series.snapshots]
    else:
        wa = np.where(grid.mask, grid.w, 0.0) ** alpha
        out = [math.sqrt(max(grid.quad(wa * (getattr(s, which) ** 2).sum(axis=-1)), 0.0))
               for s in series.snapshots]
    return np.array(out)


def decay_fit(taus, values, window_frac=0.5) -> FitResult:
    """Log-linear least squares over the trailing window of a series."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if taus.size < 3:
        raise InvalidParameterError("need at least 3 samples to fit a decay rate")
    cut = taus[0] + (1.0 - window_frac) * (taus[-1] - taus[0])
    sel = taus >= cut
    if np.any(values[sel] <= 0.0):
        raise InvalidParameterError("decay fit window contains nonpositive values")
    return loglinear_fit(taus[sel], values[sel])


def attractor_estimate(series: PerturbationSeries) -> dict:
    """Terminal-state estimate with a dyadic Cauchy ladder.

    theta_inf is the final snapshot; the report lists the weighted L2
    distances ||theta(tau_j) - theta_inf|| at tau_j = tau_end / 2^j and a
    log-linear envelope fit (report only).
    """
    taus = series.taus
    span = taus[-1] - taus[0]
    if span < 4.0:
        raise InvalidParameterError(
            f"series spans only {span:.2f} in tau; attractor estimate needs >= 4")
    theta_inf = series.snapshots[-1].theta
    grid = series.grid
    alpha = series.params.alpha
    if series.mode == "radial-nonlinear":
        wa = grid.w ** alpha
        def dist(a, b):
            return math.sqrt(max(grid.quad(wa * (a - b) ** 2), 0.0))
    else:
        wa = np.where(grid.mask, grid.w, 0.0) ** alpha
        def dist(a, b):
            return math.sqrt(max(grid.quad(wa * ((a - b) ** 2).sum(axis=-1)), 0.0))
    ladder_taus = []
    residuals = []
    for j in (3, 2, 1, 0):
        target = taus[-1] / 2.0 ** (j + 1)
        idx = int(np.argmin(np.abs(taus - target)))
        if idx == len(taus) - 1:
            continue
        ladder_taus.append(float(taus[idx]))
        residuals.append(dist(series.snapshots[idx].theta, theta_inf))
    envelope = None
    if len(residuals) >= 3 and all(v > 0 for v in residuals):
        envelope = loglinear_fit(np.array(ladder_taus), np.array(residuals))
    return {
        "theta_inf": theta_inf,
        "ladder_taus": np.array(ladder_taus),
        "residuals": np.array(residuals),
        "envelope": envelope,
    }


def export_series_csv(series: PerturbationSeries, path):
    """Snapshot dump; radial: tau,r,theta,V -- 3D: tau,x,y,z,theta*,V*."""
    rows = []
    if series.mode == "radial-nonlinear":
        header = "tau,r,theta,V"
        for s in series.snapshots:
            for i, ri in enumerate(series.grid.r):
                rows.append((s.tau, ri, s.theta[i], s.V[i]))
    else:
        header = "tau,x,y,z,theta1,theta2,theta3,V1,V2,V3"
        pts = series.grid.y[series.grid.mask]
        for s in series.snapshots:
            th = s.theta[series.grid.mask]
            vv = s.V[series.grid.mask]
            for p, a, b in zip(pts, th, vv):
                rows.append((s.tau, *p, *a, *b))
    np.savetxt(path, np.array(rows), delimiter=",", header=header,
               comments="", fmt="%.17g")
    return path


def _background_descriptor(background) -> dict:
    if hasattr(background, "closed_form"):
        return {"type": "conformal", "a0": background.a0, "a1": background.a1,
                "t_end": background.t_end}
    st = background.state_at(0.0)
    return {"type": "trajectory", "A0": st.A.tolist(), "A1": st.A_dot.tolist(),
            "t_end": background.t_end}


def write_run_manifest(path, series: PerturbationSeries, extra=None):
    grid = series.grid
    grid_spec = {"kind": "radial" if isinstance(grid, RadialGrid) else "cartesian",
                 "n": grid.n, "r_min": grid.r_min}
    manifest = {
        "schema_version": 1,
        "mode": series.mode,
        "config": asdict(series.config),
        "grid": grid_spec,
        "gamma": series.params.gamma,
        "delta": series.params.delta,
        "background": _background_descriptor(series.background),
        "snapshots": len(series.snapshots),
        "meta": series.meta,
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
