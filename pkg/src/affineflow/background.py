"""Background affine dynamics of the expanding gas ball.

The support of the gas is the image of the unit ball under a time dependent
matrix A(t) in GL+(3).  A solves the second order matrix ODE

    A'' = delta * det(A)**(1 - gamma) * inv(A).T

which conserves  0.5 * ||A'||_F**2 + delta/(gamma-1) * det(A)**(1-gamma).
Two auxiliary clocks are carried along with the state:

* the self-similar time s with ds/dt = det(A)**(-(3*gamma - 1)/6),
* the slow time tau with dtau/dt = det(A)**(-1/3),

so a trajectory knows t, s and tau for every sample.  From (A, A') the
moving frame is computed analytically: the geometric mean radius
mu = det(A)**(1/3), the shape matrix O = A / mu, the drift
Gamma* = O^{-1} dO/dtau and the metric Lambda = mu**2 inv(A) inv(A).T,
a symmetric positive definite matrix of unit determinant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import PchipInterpolator

from .errors import DegenerateFlowError, IntegrationError, InvalidParameterError
from .fitting import loglinear_fit
from .params import GammaParams

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
_DET_FLOOR = 1e-10


@dataclass
class AffineState:
    """Snapshot of the background flow at one instant."""

    t: float
    s: float
    tau: float
    A: np.ndarray
    A_dot: np.ndarray


@dataclass
class DerivedFrame:
    """Moving-frame quantities derived from one affine state.

    ``mu_rate`` is the logarithmic derivative d(log mu)/dtau.  All tau
    derivatives are computed analytically from the ODE, not by differencing.
    """

    t: float
    tau: float
    mu: float
    mu_rate: float
    O: np.ndarray
    Lambda: np.ndarray
    Gamma_star: np.ndarray
    Lambda_tau: np.ndarray
    Gamma_star_tau: np.ndarray
    Lambda_tautau: np.ndarray


def ode_energy(params: GammaParams, A: np.ndarray, A_dot: np.ndarray) -> float:
    """Conserved energy of the background matrix ODE."""
    det_a = np.linalg.det(A)
    if det_a <= 0.0:
        raise DegenerateFlowError(f"det(A) = {det_a} is not positive")
    kinetic = 0.5 * float(np.sum(A_dot * A_dot))
    return kinetic + params.delta / (params.gamma - 1.0) * det_a ** (1.0 - params.gamma)


def spin(A: np.ndarray, A_dot: np.ndarray) -> np.ndarray:
    """Conserved angular momentum matrix A.T A' - A'.T A of the matrix ODE."""
    return A.T @ A_dot - A_dot.T @ A


def _pack(A, A_dot, s, tau):
    out = np.empty(20)
    out[:9] = np.asarray(A, dtype=float).ravel()
    out[9:18] = np.asarray(A_dot, dtype=float).ravel()
    out[18] = s
    out[19] = tau
    return out


def _rhs(t, y, gamma, delta):
    A = y[:9].reshape(3, 3)
    det_a = (
        A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
        - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
        + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0])
    )
    if det_a <= 0.0 or not np.isfinite(det_a):
        # keep the solver from stepping through a degenerate configuration
        raise DegenerateFlowError(f"det(A) = {det_a} at t = {t}", where=t)
    inv_at = np.linalg.inv(A).T
    dy = np.empty(20)
    dy[:9] = y[9:18]
    dy[9:18] = (delta * det_a ** (1.0 - gamma) * inv_at).ravel()
    dy[18] = det_a ** (-(3.0 * gamma - 1.0) / 6.0)
    dy[19] = det_a ** (-1.0 / 3.0)
    return dy


def frame_from_state(params: GammaParams, state: AffineState) -> DerivedFrame:
    """Analytic moving frame at one state.

    Gamma* has the closed form mu * (inv(A) A' - tr(inv(A) A')/3 * Id).
    Lambda_tau is assembled from the product rule
    Lambda_tau = -Gamma* Lambda - Lambda Gamma*.T, and the second tau
    derivatives use the ODE for A'' so no finite differencing enters.
    """
    A = state.A
    A_dot = state.A_dot
    det_a = np.linalg.det(A)
    if det_a <= 0.0:
        raise DegenerateFlowError(f"det(A) = {det_a} is not positive", where=state.t)
    gamma, delta = params.gamma, params.delta
    inv_a = np.linalg.inv(A)
    mu = det_a ** (1.0 / 3.0)
    B = inv_a @ A_dot
    trB = np.trace(B)
    eye = np.eye(3)

    O = A / mu
    Gamma_star = mu * (B - (trB / 3.0) * eye)
    Lambda = mu * mu * (inv_a @ inv_a.T)
    Lambda_tau = -Gamma_star @ Lambda - Lambda @ Gamma_star.T

    # d/dt of tr(inv(A) A') feeds the second tau derivative of O
    A_tt = delta * det_a ** (1.0 - gamma) * inv_a.T
    trB_t = -np.trace(B @ B) + delta * det_a ** (1.0 - gamma) * np.trace(inv_a @ inv_a.T)
    g = 1.0 / mu
    g_t = -g * trB / 3.0
    g_tt = -(g_t * trB + g * trB_t) / 3.0
    O_t = g_t * A + g * A_dot
    O_tt = g_tt * A + 2.0 * g_t * A_dot + g * A_tt
    mu_t = mu * trB / 3.0
    O_tautau = mu * (mu_t * O_t + mu * O_tt)
    inv_O = mu * inv_a
    Gamma_star_tau = -Gamma_star @ Gamma_star + inv_O @ O_tautau
    Lambda_tautau = (
        -Gamma_star_tau @ Lambda
        - Gamma_star @ Lambda_tau
        - Lambda_tau @ Gamma_star.T
        - Lambda @ Gamma_star_tau.T
    )
    return DerivedFrame(
        t=state.t,
        tau=state.tau,
        mu=mu,
        mu_rate=mu_t,
        O=O,
        Lambda=Lambda,
        Gamma_star=Gamma_star,
        Lambda_tau=Lambda_tau,
        Gamma_star_tau=Gamma_star_tau,
        Lambda_tautau=Lambda_tautau,
    )


class AffineTrajectory:
    """Dense-in-time solution of the background matrix ODE.

    Provides state and frame lookup by physical time t or by slow time tau;
    the tau -> t inversion uses a monotone interpolant refined by Newton
    steps on the exact clock derivative.
    """

    def __init__(self, params, A0, A1, t_end, sol, rtol, atol):
        self.params = params
        self.A0 = A0
        self.A1 = A1
        self.t_end = float(t_end)
        self._sol = sol
        self.rtol = rtol
        self.atol = atol
        # monotone sample of the tau clock for inversion
        n = max(200, 16 * len(sol.ts) if hasattr(sol, "ts") else 400)
        tg = np.concatenate(
            [np.linspace(0.0, min(1.0, self.t_end), 64, endpoint=False),
             np.geomspace(min(1.0, self.t_end), self.t_end, n)]
        ) if self.t_end > 1.0 else np.linspace(0.0, self.t_end, 256)
        tg = np.unique(np.clip(tg, 0.0, self.t_end))
        taus = sol.sol(tg)[19]
        keep = np.concatenate([[True], np.diff(taus) > 0])
        self._t_grid = tg[keep]
        self._tau_grid = taus[keep]
        self._t_of_tau = PchipInterpolator(self._tau_grid, self._t_grid)
        self.tau_end = float(self._tau_grid[-1])

    def state_at(self, t: float) -> AffineState:
        if t < -1e-12 or t > self.t_end * (1 + 1e-12):
            raise InvalidParameterError(f"t = {t} outside integrated range [0, {self.t_end}]")
        y = self._sol.sol(min(max(t, 0.0), self.t_end))
        return AffineState(t=float(t), s=float(y[18]), tau=float(y[19]),
                           A=y[:9].reshape(3, 3).copy(), A_dot=y[9:18].reshape(3, 3).copy())

    def t_of_tau(self, tau: float) -> float:
        if tau < -1e-12 or tau > self.tau_end * (1 + 1e-9) + 1e-12:
            raise InvalidParameterError(f"tau = {tau} outside [0, {self.tau_end}]")
        t = float(self._t_of_tau(min(max(tau, 0.0), self.tau_end)))
        # two Newton corrections on tau(t) - tau using the exact derivative
        for _ in range(2):
            y = self._sol.sol(min(max(t, 0.0), self.t_end))
            det_a = np.linalg.det(y[:9].reshape(3, 3))
            t -= (y[19] - tau) * det_a ** (1.0 / 3.0)
            t = min(max(t, 0.0), self.t_end)
        return t

    def state_at_tau(self, tau: float) -> AffineState:
        return self.state_at(self.t_of_tau(tau))

    def frame_at(self, t: float) -> DerivedFrame:
        return frame_from_state(self.params, self.state_at(t))

    def frame_at_tau(self, tau: float) -> DerivedFrame:
        return frame_from_state(self.params, self.state_at_tau(tau))

    def energy(self, t: float) -> float:
        st = self.state_at(t)
        return ode_energy(self.params, st.A, st.A_dot)

    def sample_times(self, n: int) -> np.ndarray:
        """Geometric-ish spread of sample times biased toward late time."""
        if self.t_end <= 1.0:
            return np.linspace(0.0, self.t_end, n)
        head = np.linspace(0.0, 1.0, max(4, n // 8), endpoint=False)
        tail = np.geomspace(1.0, self.t_end, n - len(head))
        return np.concatenate([head, tail])


def integrate_affine(
    params: GammaParams,
    A0,
    A1,
    t_end: float,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    method: str = "DOP853",
) -> AffineTrajectory:
    """Integrate the background matrix ODE up to ``t_end``.

    Parameters
    ----------
    A0, A1 : array_like, shape (3, 3)
        Initial matrix (must have positive determinant) and initial velocity.
    method : str
        Any adaptive embedded Runge-Kutta method accepted by
        ``scipy.integrate.solve_ivp`` of order at least 4(5).

    Returns
    -------
    AffineTrajectory

    Raises
    ------
    DegenerateFlowError
        If det(A) reaches zero along the way.
    IntegrationError
        If the integrator fails or produces non-finite values.
    """
    A0 = np.asarray(A0, dtype=float).reshape(3, 3)
    A1 = np.asarray(A1, dtype=float).reshape(3, 3)
    if not (t_end > 0.0):
        raise InvalidParameterError(f"t_end must be positive, got {t_end}")
    det0 = np.linalg.det(A0)
    if det0 <= 0.0:
        raise InvalidParameterError(f"initial matrix must lie in GL+(3); det = {det0}")

    def det_event(t, y, *args):
        return np.linalg.det(y[:9].reshape(3, 3)) - _DET_FLOOR

    det_event.terminal = True
    det_event.direction = -1

    sol = solve_ivp(
        _rhs,
        (0.0, float(t_end)),
        _pack(A0, A1, 0.0, 0.0),
        method=method,
        rtol=rtol,
        atol=atol,
        dense_output=True,
        args=(params.gamma, params.delta),
        events=det_event,
    )
    if sol.status == 1:
        t_hit = float(sol.t_events[0][0]) if len(sol.t_events[0]) else float(sol.t[-1])
        raise DegenerateFlowError(f"det(A) hit the floor {_DET_FLOOR} at t = {t_hit}", where=t_hit)
    if not sol.success:
        last = None
        if len(sol.t):
            y = sol.y[:, -1]
            last = AffineState(t=float(sol.t[-1]), s=float(y[18]), tau=float(y[19]),
                               A=y[:9].reshape(3, 3), A_dot=y[9:18].reshape(3, 3))
        raise IntegrationError(f"background integration failed: {sol.message}", last_state=last)
    if not np.all(np.isfinite(sol.y[:, -1])):
        raise IntegrationError("background integration produced non-finite state")
    return AffineTrajectory(params, A0, A1, t_end, sol, rtol, atol)


class ConformalBackground:
    """Isotropic background A(t) = a(t) * Id.

    The scalar radius solves a'' = delta * a**(2 - 3*gamma).  For
    gamma = 5/3, delta = 1, a(0) = 1, a'(0) = 0 the closed form
    a = sqrt(1 + t**2) is used together with s = arctan(t) and
    tau = arcsinh(t); otherwise the scalar ODE is integrated with the same
    tolerances as the matrix problem.  The frame is exact: Lambda = Id and
    Gamma* = 0 for all times.
    """

    def __init__(self, params: GammaParams, a0=1.0, a1=0.0, t_end=1e4,
                 rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
        if not (a0 > 0.0):
            raise InvalidParameterError(f"a0 must be positive, got {a0}")
        self.params = params
        self.a0 = float(a0)
        self.a1 = float(a1)
        self.t_end = float(t_end)
        self.closed_form = (
            abs(params.gamma - 5.0 / 3.0) < 1e-14
            and abs(params.delta - 1.0) < 1e-14
            and a0 == 1.0
            and a1 == 0.0
        )
        if not self.closed_form:
            def rhs(t, y):
                a = y[0]
                if a <= 0.0:
                    raise DegenerateFlowError(f"a = {a} at t = {t}", where=t)
                return [y[1],
                        params.delta * a ** (2.0 - 3.0 * params.gamma),
                        a ** (-(3.0 * params.gamma - 1.0) / 2.0),
                        1.0 / a]

            sol = solve_ivp(rhs, (0.0, self.t_end), [a0, a1, 0.0, 0.0],
                            method="DOP853", rtol=rtol, atol=atol, dense_output=True)
            if not sol.success:
                raise IntegrationError(f"scalar background integration failed: {sol.message}")
            self._sol = sol
            tg = np.concatenate([np.linspace(0.0, min(1.0, self.t_end), 64, endpoint=False),
                                 np.geomspace(min(1.0, self.t_end), self.t_end, 800)])
            tg = np.unique(np.clip(tg, 0.0, self.t_end))
            taus = sol.sol(tg)[3]
            self._t_of_tau = PchipInterpolator(taus, tg)
            self.tau_end = float(taus[-1])
        else:
            self._sol = None
            self.tau_end = float(np.arcsinh(self.t_end))

    def scalar_state(self, t: float):
        """Return (a, a', s, tau) at time t."""
        if self.closed_form:
            a = math.sqrt(1.0 + t * t)
            return a, t / a, math.atan(t), math.asinh(t)
        y = self._sol.sol(min(max(t, 0.0), self.t_end))
        return float(y[0]), float(y[1]), float(y[2]), float(y[3])

    def t_of_tau(self, tau: float) -> float:
        if self.closed_form:
            return math.sinh(tau)
        t = float(self._t_of_tau(min(max(tau, 0.0), self.tau_end)))
        for _ in range(2):
            y = self._sol.sol(min(max(t, 0.0), self.t_end))
            t = min(max(t - (y[3] - tau) * y[0], 0.0), self.t_end)
        return t

    def state_at(self, t: float) -> AffineState:
        a, a_t, s, tau = self.scalar_state(t)
        return AffineState(t=float(t), s=s, tau=tau,
                           A=a * np.eye(3), A_dot=a_t * np.eye(3))

    def state_at_tau(self, tau: float) -> AffineState:
        return self.state_at(self.t_of_tau(tau))

    def frame_at_tau(self, tau: float) -> DerivedFrame:
        t = self.t_of_tau(tau)
        a, a_t, _, _ = self.scalar_state(t)
        eye = np.eye(3)
        zero = np.zeros((3, 3))
        return DerivedFrame(t=t, tau=tau, mu=a, mu_rate=a_t, O=eye.copy(),
                            Lambda=eye.copy(), Gamma_star=zero.copy(),
                            Lambda_tau=zero.copy(), Gamma_star_tau=zero.copy(),
                            Lambda_tautau=zero.copy())

    def frame_at(self, t: float) -> DerivedFrame:
        a, a_t, _, tau = self.scalar_state(t)
        return self.frame_at_tau(tau)

    @property
    def mu1(self) -> float:
        """Late-time expansion rate lim a'(t) (exact 1 for the closed form)."""
        if self.closed_form:
            return 1.0
        return self.scalar_state(self.t_end)[1]


def conformal_background(params: GammaParams, a0: float = 1.0, a1: float = 0.0,
                         t_end: float = 1e4) -> ConformalBackground:
    """Isotropic background trajectory; see ``ConformalBackground``."""
    return ConformalBackground(params, a0=a0, a1=a1, t_end=t_end)


@dataclass
class AsymptoticsReport:
    """Late-time scattering data of a background trajectory."""

    A0_est: np.ndarray
    A1_est: np.ndarray
    mu1: float
    mu0: float
    mu_ratio_error: float
    linear_remainder: float
    a1_richardson_error: float
    gamma_star_rate: float
    gamma_star_r2: float
    lambda_tau_rate: float
    lambda_tau_r2: float
    lambda_tautau_rate: float
    lambda_tautau_envelope: float
    gamma_star_limit_residual: float
    fit_window: tuple
    reliable: bool = True
    notes: str = ""


def asymptotics_report(traj: AffineTrajectory, params: GammaParams | None = None,
                       n_samples: int = 240) -> AsymptoticsReport:
    """Estimate the scattering matrices and decay exponents of a trajectory.

    The terminal velocity serves as the estimate of the asymptotic velocity
    matrix (cross-checked against the velocity at half the horizon);
    exponential rates of ||Gamma*||, ||Lambda_tau|| and ||Lambda_tautau||
    are least-squares fits of the log norms against tau over the final half
    of the covered tau range.
    """
    params = traj.params if params is None else params
    st_end = traj.state_at(traj.t_end)
    A1_est = st_end.A_dot.copy()
    det_a1 = np.linalg.det(A1_est)
    notes = ""
    reliable = True
    if det_a1 <= 1e-8:
        reliable = False
        notes = f"terminal velocity matrix nearly singular (det = {det_a1:.3e})"
        mu1 = float("nan")
    else:
        mu1 = det_a1 ** (1.0 / 3.0)
    A0_est = st_end.A - traj.t_end * A1_est
    mu_end = np.linalg.det(st_end.A) ** (1.0 / 3.0)
    mu_ratio_error = abs(mu_end / traj.t_end - mu1) / abs(mu1) if reliable else float("nan")
    a1_half = traj.state_at(0.5 * traj.t_end).A_dot
    a1_rich = np.linalg.norm(A1_est - a1_half) / max(np.linalg.norm(A1_est), 1e-300)
    if reliable and a1_rich > 1e-2:
        reliable = False
        notes = (notes + "; " if notes else "") + (
            f"velocity not settled: A_dot changed by {a1_rich:.2e} over the last half horizon")

    tau_lo, tau_hi = 0.5 * traj.tau_end, traj.tau_end
    taus = np.linspace(tau_lo, tau_hi, n_samples)
    g_norm = np.empty(n_samples)
    lt_norm = np.empty(n_samples)
    ltt_norm = np.empty(n_samples)
    lin_rem = 0.0
    for i, tau in enumerate(taus):
        fr = traj.frame_at_tau(tau)
        g_norm[i] = np.linalg.norm(fr.Gamma_star)
        lt_norm[i] = np.linalg.norm(fr.Lambda_tau)
        ltt_norm[i] = np.linalg.norm(fr.Lambda_tautau)
        st = traj.state_at_tau(tau)
        rem = np.linalg.norm(st.A - A0_est - st.t * A1_est) / (1.0 + st.t)
        lin_rem = max(lin_rem, rem)

    fit_g = loglinear_fit(taus, g_norm)
    fit_lt = loglinear_fit(taus, lt_norm)
    fit_ltt = loglinear_fit(taus, ltt_norm)
    mu0 = params.mu0(mu1) if reliable else float("nan")
    if reliable:
        env = ltt_norm * np.exp(2.0 * mu0 * taus)
        envelope = float(np.max(env) / env[0])
    else:
        envelope = float("nan")
    if reliable:
        fr_end = traj.frame_at_tau(traj.tau_end)
        predicted = math.exp(-mu1 * traj.tau_end) * mu1 * (A0_est @ np.linalg.inv(A1_est))
        limit_res = float(np.linalg.norm(fr_end.Gamma_star - predicted))
    else:
        limit_res = float("nan")

    return AsymptoticsReport(
        A0_est=A0_est, A1_est=A1_est, mu1=mu1, mu0=mu0,
        mu_ratio_error=mu_ratio_error, linear_remainder=lin_rem,
        a1_richardson_error=float(a1_rich),
        gamma_star_rate=fit_g.slope, gamma_star_r2=fit_g.r2,
        lambda_tau_rate=fit_lt.slope, lambda_tau_r2=fit_lt.r2,
        lambda_tautau_rate=fit_ltt.slope, lambda_tautau_envelope=envelope,
        gamma_star_limit_residual=limit_res,
        fit_window=(tau_lo, tau_hi), reliable=reliable, notes=notes,
    )


def export_trajectory_csv(traj: AffineTrajectory, path, ts=None) -> None:
    """Write trajectory samples as CSV with one row per time."""
    if ts is None:
        ts = traj.sample_times(200)
    cols = ["t", "s", "tau"]
    cols += [f"A{i}{j}" for i in (1, 2, 3) for j in (1, 2, 3)]
    cols += [f"Adot{i}{j}" for i in (1, 2, 3) for j in (1, 2, 3)]
    cols += ["mu", "det_A", "ode_energy"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in ts:
            st = traj.state_at(float(t))
            det_a = np.linalg.det(st.A)
            row = [st.t, st.s, st.tau]
            row += list(st.A.ravel())
            row += list(st.A_dot.ravel())
            row += [det_a ** (1.0 / 3.0), det_a, ode_energy(traj.params, st.A, st.A_dot)]
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
