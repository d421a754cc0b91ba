"""Explicit Eulerian solutions carried by an affine deformation.

Density is det A^{-1} w(A^{-1}x)^alpha with the enthalpy profile w of the
unit ball, velocity is the linear field Adot A^{-1} x.  The module verifies
these fields against the Euler equations by central-difference residuals,
implements the constant-matrix GL+(3) change of variables together with the
generalized momentum equation it produces, and provides support-geometry
and vacuum-boundary diagnostics plus mass quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .params import GammaParams


@dataclass
class EulerianSample:
    """Field values at a batch of positions (arrays share leading shape)."""

    x: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    in_support: np.ndarray


def affine_density(A, params: GammaParams, x):
    """Density det A^{-1} w(A^{-1}x)^alpha, zero outside the ellipsoid."""
    A = np.asarray(A, dtype=float)
    det = np.linalg.det(A)
    if det <= 0:
        raise InvalidParameterError("deformation matrix must have positive determinant")
    y = np.asarray(x, dtype=float) @ np.linalg.inv(A).T
    w = params.enthalpy((y ** 2).sum(axis=-1))
    return w ** params.alpha / det


def affine_velocity(A, A_dot, x):
    """Linear velocity field Adot A^{-1} x (defined for all x)."""
    A = np.asarray(A, dtype=float)
    grad = np.asarray(A_dot, dtype=float) @ np.linalg.inv(A)
    return np.asarray(x, dtype=float) @ grad.T


class AffineFields:
    """Eulerian sampler bound to an affine trajectory."""

    def __init__(self, trajectory):
        self.trajectory = trajectory
        self.params = trajectory.params

    def _matrices(self, t):
        st = self.trajectory.state_at(t)
        return st.A, st.A_dot

    def rho(self, t, x):
        A, _ = self._matrices(t)
        return affine_density(A, self.params, x)

    def velocity(self, t, x):
        A, A_dot = self._matrices(t)
        return affine_velocity(A, A_dot, x)

    def in_support(self, t, x):
        A, _ = self._matrices(t)
        y = np.asarray(x, dtype=float) @ np.linalg.inv(A).T
        return (y ** 2).sum(axis=-1) < 1.0

    def sample(self, t, x) -> EulerianSample:
        x = np.asarray(x, dtype=float)
        return EulerianSample(x=x, rho=self.rho(t, x), u=self.velocity(t, x),
                              in_support=self.in_support(t, x))


class TransformedFields:
    """Constant-matrix change of variables applied to a field sampler.

    With B fixed (det B > 0) the new pair is
        rho~(s, y) = det B * rho(det B^{(3g-1)/6} s, B y)
        u~(s, y)   = det B^{(3g-1)/6} B^{-1} u(det B^{(3g-1)/6} s, B y)
    which solves the generalized momentum equation with the shape matrix
    Lambda = det B^{2/3} B^{-1} B^{-T} in place of the identity.
    """

    def __init__(self, base, B):
        B = np.asarray(B, dtype=float)
        det = np.linalg.det(B)
        if det <= 0:
            raise InvalidParameterError("transform matrix must have positive determinant")
        self.base = base
        self.params = base.params
        self.B = B
        self.B_inv = np.linalg.inv(B)
        self.det = det
        # inverse time dilation: base time t = det^{(3g-1)/6} s
        self.time_factor = det ** ((3.0 * self.params.gamma - 1.0) / 6.0)
        self.Lambda = det ** (2.0 / 3.0) * self.B_inv @ self.B_inv.T

    def rho(self, s, y):
        x = np.asarray(y, dtype=float) @ self.B.T
        return self.det * self.base.rho(self.time_factor * s, x)

    def velocity(self, s, y):
        x = np.asarray(y, dtype=float) @ self.B.T
        u = self.base.velocity(self.time_factor * s, x)
        return self.time_factor * (u @ self.B_inv.T)

    def in_support(self, s, y):
        x = np.asarray(y, dtype=float) @ self.B.T
        return self.base.in_support(self.time_factor * s, x)

    def sample(self, s, y) -> EulerianSample:
        y = np.asarray(y, dtype=float)
        return EulerianSample(x=y, rho=self.rho(s, y), u=self.velocity(s, y),
                              in_support=self.in_support(s, y))


def gl3_transform(base, B) -> TransformedFields:
    return TransformedFields(base, B)


@dataclass
class ResidualReport:
    h: float
    dt: float
    l2_continuity: float
    sup_continuity: float
    l2_momentum: float
    sup_momentum: float


@dataclass
class ResidualConvergence:
    coarse: ResidualReport
    fine: ResidualReport
    orders: dict


def _interior(arr):
    sl = (slice(1, -1),) * 3 + (slice(None),) * (arr.ndim - 3)
    return arr[sl]


def _central(arr, axis, h):
    lo = [slice(1, -1)] * 3 + [slice(None)] * (arr.ndim - 3)
    hi = [slice(1, -1)] * 3 + [slice(None)] * (arr.ndim - 3)
    hi[axis] = slice(2, None)
    lo[axis] = slice(0, -2)
    return (arr[tuple(hi)] - arr[tuple(lo)]) / (2.0 * h)


def euler_residual(fields, t, h, n=16, dt=None, center=None, Lambda=None) -> ResidualReport:
    """Central-difference residuals of continuity and momentum on a cube.

    The cube has n points per axis at spacing h around `center` and must
    stay at least 2h inside the support at every stencil time; otherwise
    the call is rejected (one-sided differencing near vacuum is out of
    scope here).  `Lambda` inserts a constant matrix in front of the
    pressure gradient for transformed fields; None means the identity.
    """
    if dt is None:
        dt = 0.5 * h
    center = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    coords = [center[k] + h * (np.arange(n) - 0.5 * (n - 1)) for k in range(3)]
    X = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1)

    times = (t - dt, t, t + dt)
    for tk in times:
        # margin check: x-distance to the vacuum boundary >= 2h
        inside = fields.in_support(tk, X)
        if not inside.all():
            raise InvalidParameterError(
                f"residual cube leaves the support at t={tk:.6g}; shrink it or move the center")
        sup_y = np.sqrt(_support_radius_sq(fields, tk, X).max())
        if (1.0 - sup_y) * _min_stretch(fields, tk) < 2.0 * h:
            raise InvalidParameterError(
                f"residual cube is closer than 2h to the vacuum boundary at t={tk:.6g}")

    rho_m, rho_0, rho_p = (fields.rho(tk, X) for tk in times)
    u_m, u_0, u_p = (fields.velocity(tk, X) for tk in times)

    gamma = fields.params.gamma
    rho_t = (rho_p - rho_m) / (2.0 * dt)
    cont = _interior(rho_t)
    for k in range(3):
        cont = cont + _central(rho_0 * u_0[..., k], k, h)

    u_t = _interior((u_p - u_m) / (2.0 * dt))
    adv = np.zeros_like(u_t)
    for k in range(3):
        adv = adv + _interior(u_0[..., k])[..., None] * _central(u_0, k, h)
    grad_p = np.stack([_central(rho_0 ** gamma, k, h) for k in range(3)], axis=-1)
    if Lambda is not None:
        grad_p = grad_p @ np.asarray(Lambda, dtype=float).T
    mom = _interior(rho_0)[..., None] * (u_t + adv) + grad_p

    cell = h ** 3
    mom_mag = np.sqrt((mom ** 2).sum(axis=-1))
    return ResidualReport(
        h=h, dt=dt,
        l2_continuity=float(np.sqrt((cont ** 2).sum() * cell)),
        sup_continuity=float(np.abs(cont).max()),
        l2_momentum=float(np.sqrt((mom_mag ** 2).sum() * cell)),
        sup_momentum=float(mom_mag.max()),
    )


def _support_radius_sq(fields, t, X):
    # |A^{-1}x|^2 for samplers that expose the deformation; fall back to
    # the in_support indicator treated as a 0/1 radius proxy.
    if hasattr(fields, "trajectory"):
        A = fields.trajectory.state_at(t).A
        y = X @ np.linalg.inv(A).T
        return (y ** 2).sum(axis=-1)
    if hasattr(fields, "base"):
        x = X @ fields.B.T
        return _support_radius_sq(fields.base, fields.time_factor * t, x)
    return 1.0 - fields.in_support(t, X).astype(float)


def _min_stretch(fields, t):
    # smallest singular value of the deformation: converts y-space margin
    # to a lower bound on x-space distance
    if hasattr(fields, "trajectory"):
        A = fields.trajectory.state_at(t).A
        return float(np.linalg.svd(A, compute_uv=False)[-1])
    if hasattr(fields, "base"):
        inner = _min_stretch(fields.base, fields.time_factor * t)
        return inner * float(np.linalg.svd(fields.B_inv, compute_uv=False)[-1])
    return 1.0


def residual_convergence(fields, t, h, n=16, dt=None, center=None, Lambda=None) -> ResidualConvergence:
    """Run the residual test at (h, n) and (h/2, 2n-1) on the same cube."""
    coarse = euler_residual(fields, t, h, n=n, dt=dt, center=center, Lambda=Lambda)
    fine = euler_residual(fields, t, 0.5 * h, n=2 * n - 1,
                          dt=None if dt is None else 0.5 * dt,
                          center=center, Lambda=Lambda)
    orders = {}
    for name in ("l2_continuity", "sup_continuity", "l2_momentum", "sup_momentum"):
        c, f = getattr(coarse, name), getattr(fine, name)
        orders[name] = math.log2(c / f) if f > 0 else float("inf")
    return ResidualConvergence(coarse=coarse, fine=fine, orders=orders)


@dataclass
class SupportVacuumReport:
    times: np.ndarray
    radii: np.ndarray
    growth_slope: float
    growth_intercept: float
    growth_r2: float
    boundary_slopes: dict
    all_slopes_negative: bool


def support_and_vacuum_checks(trajectory, n_times=60, slope_time=0.0) -> SupportVacuumReport:
    """Support radius growth fit and one-sided vacuum boundary slopes.

    The support radius is the largest singular value of A(t); its late-time
    growth should be linear.  At `slope_time` the normal derivative of the
    squared sound speed is estimated by one-sided differencing along the
    inward normal at six boundary points; the physical vacuum condition
    requires every slope to be finite and strictly negative.
    """
    traj = trajectory
    params = traj.params
    t_hi = traj.t_end
    times = np.linspace(0.5 * t_hi, t_hi, n_times)
    radii = np.array([np.linalg.svd(traj.state_at(tk).A, compute_uv=False)[0]
                      for tk in times])
    slope, intercept = np.polyfit(times, radii, 1)
    pred = slope * times + intercept
    ss_res = float(((radii - pred) ** 2).sum())
    ss_tot = float(((radii - radii.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    st = traj.state_at(slope_time)
    A = st.A
    det = np.linalg.det(A)
    A_inv = np.linalg.inv(A)
    gamma, delta, alpha = params.gamma, params.delta, params.alpha
    sigma_min = float(np.linalg.svd(A, compute_uv=False)[-1])
    dirs = {}
    units = [np.array(v, dtype=float) for v in
             [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, 0, 1),
              (1, 1, 1), (-1, 1, -1)]]
    for idx, y0 in enumerate(units):
        y0 = y0 / np.linalg.norm(y0)
        x0 = A @ y0
        normal_in = -(A_inv.T @ y0)
        normal_in = normal_in / np.linalg.norm(normal_in)
        eps = 1e-4 * sigma_min
        # sound speed squared: gamma rho^{gamma-1} = gamma det^{1-gamma} w(y)
        def cs2(x):
            y = A_inv @ x
            w = params.enthalpy(float(y @ y))
            return gamma * det ** (1.0 - gamma) * w
        s1 = (cs2(x0 + eps * normal_in) - cs2(x0)) / eps
        s2 = (cs2(x0 + 0.5 * eps * normal_in) - cs2(x0)) / (0.5 * eps)
        slope_dir = 2.0 * s2 - s1  # Richardson on the one-sided difference
        dirs[f"dir{idx}"] = -float(slope_dir)  # derivative along outward normal
    all_neg = all(np.isfinite(v) and v < 0 for v in dirs.values())
    return SupportVacuumReport(times=times, radii=radii,
                               growth_slope=float(slope),
                               growth_intercept=float(intercept),
                               growth_r2=r2, boundary_slopes=dirs,
                               all_slopes_negative=all_neg)


def unit_ball_enthalpy_mass(params: GammaParams, n_nodes=240) -> float:
    """Quadrature of 4 pi int_0^1 r^2 w(r)^alpha dr with r = sin(phi).

    The substitution turns the (1 - r^2)^alpha endpoint into a smooth
    cos^{2 alpha + 1} factor, so Gauss-Legendre converges fast.
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    phi = 0.25 * math.pi * (nodes + 1.0)
    wphi = 0.25 * math.pi * weights
    r = np.sin(phi)
    integrand = r ** 2 * params.enthalpy(r ** 2) ** params.alpha * np.cos(phi)
    return float(4.0 * math.pi * (integrand * wphi).sum())


def mass_reference(params: GammaParams) -> float:
    """Closed form of the unit-ball enthalpy mass via the Beta integral."""
    a = params.alpha
    beta = math.gamma(1.5) * math.gamma(a + 1.0) / math.gamma(a + 2.5)
    return 4.0 * math.pi * params.w_coeff ** a * 0.5 * beta


def total_mass(fields: AffineFields, t, n_r=200, n_theta=24, n_phi=48) -> float:
    """Mass integral over the ellipsoidal support at time t.

    Tensorized Gauss-Legendre in (substituted) radius and polar angle with
    a uniform trapezoid rule in azimuth, mapped through x = A(t) r omega;
    the volume element contributes det A r^2.
    """
    A = fields.trajectory.state_at(t).A
    det = float(np.linalg.det(A))
    rn, rw = np.polynomial.legendre.leggauss(n_r)
    phi_r = 0.25 * math.pi * (rn + 1.0)
    wr = 0.25 * math.pi * rw
    r = np.sin(phi_r)
    cn, cw = np.polynomial.legendre.leggauss(n_theta)
    az = 2.0 * math.pi * np.arange(n_phi) / n_phi
    st_ = np.sqrt(1.0 - cn ** 2)
    omega = np.stack([
        np.outer(st_, np.cos(az)),
        np.outer(st_, np.sin(az)),
        np.broadcast_to(cn[:, None], (n_theta, n_phi)).copy(),
    ], axis=-1)
    total = 0.0
    for i in range(n_r):
        x = r[i] * omega @ A.T
        rho = fields.rho(t, x)
        ang = (rho * cw[:, None]).sum() * (2.0 * math.pi / n_phi)
        total += wr[i] * np.cos(phi_r[i]) * r[i] ** 2 * ang
    return float(det * total)


def export_fields_csv(fields, t, points, path):
    """Dump samples at one time to CSV: t,x,y,z,rho,ux,uy,uz,in_support."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    s = fields.sample(t, pts)
    rows = np.column_stack([
        np.full(pts.shape[0], float(t)), pts,
        s.rho.reshape(-1), s.u.reshape(-1, 3),
        s.in_support.reshape(-1).astype(float),
    ])
    header = "t,x,y,z,rho,ux,uy,uz,in_support"
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")
    return path
