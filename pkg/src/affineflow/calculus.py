"""Difference calculus on ball grids and the flow-map (Lagrangian) algebra.

Cartesian first derivatives are 2nd-order centered stencils that degrade to
2nd-order one-sided at mask edges.  Radial and angular derivatives are built
from the cartesian ones:

    d_r f      = (y/r) . grad f
    agrad_i f  = d_i f - (y_i / r^2) (y . grad f)

so a radial function has zero angular gradient to stencil accuracy.  The
flow-map differentials (gradient, Jacobian determinant, exact pointwise
inverse, cofactor matrix) and the Lambda-twisted curl operators act on these
discrete derivatives; identities that are algebraic in the exact inverse
(inv . Deta = Id, Curl of Lambda eta) therefore hold to rounding error, not
just stencil order.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFlowError, InvalidParameterError
from .grid import CartesianGrid


def _shift(a, axis, k):
    """Shift array contents by k cells along axis, zero-filling."""
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if k > 0:
        src[axis], dst[axis] = slice(None, -k), slice(k, None)
    elif k < 0:
        src[axis], dst[axis] = slice(-k, None), slice(None, k)
    else:
        return a.copy()
    out[tuple(dst)] = a[tuple(src)]
    return out


def partial(grid: CartesianGrid, f, axis: int):
    """d/dy_axis with centered stencil, one-sided 2nd order at mask edges."""
    f = np.asarray(f, dtype=float)
    extra = f.ndim - 3
    def ex(m):
        return m.reshape(m.shape + (1,) * extra) if extra else m
    h = grid.h
    lo1 = grid._has_lo[axis]
    hi1 = grid._has_hi[axis]
    mask = grid.mask
    lo2 = lo1 & _shift(lo1, axis, 1)
    hi2 = hi1 & _shift(hi1, axis, -1)

    fp = _shift(f, axis, -1)   # value at i+1
    fm = _shift(f, axis, 1)    # value at i-1
    fpp = _shift(f, axis, -2)
    fmm = _shift(f, axis, 2)

    centered = (fp - fm) / (2.0 * h)
    fwd2 = (-3.0 * f + 4.0 * fp - fpp) / (2.0 * h)
    bwd2 = (3.0 * f - 4.0 * fm + fmm) / (2.0 * h)
    fwd1 = (fp - f) / h
    bwd1 = (f - fm) / h

    out = np.zeros_like(f)
    c = ex(lo1 & hi1)
    out = np.where(c, centered, out)
    use_f2 = ex(~lo1 & hi2)
    out = np.where(use_f2, fwd2, out)
    use_b2 = ex(~hi1 & lo2)
    out = np.where(use_b2, bwd2, out)
    use_f1 = ex(~lo1 & hi1 & ~hi2)
    out = np.where(use_f1, fwd1, out)
    use_b1 = ex(~hi1 & lo1 & ~lo2)
    out = np.where(use_b1, bwd1, out)
    out = np.where(ex(mask), out, 0.0)
    return out


def gradient(grid, f):
    """Cartesian gradient of a scalar field, shape f.shape + (3,)."""
    return np.stack([partial(grid, f, ax) for ax in range(3)], axis=-1)


def jacobian(grid, F):
    """DF[..., i, s] = d F^i / d y_s for a vector field F[..., i]."""
    cols = [partial(grid, F, ax) for ax in range(3)]
    return np.stack(cols, axis=-1)


def _expand(m, ndim):
    return m.reshape(m.shape + (1,) * (ndim - 3)) if ndim > 3 else m


def radial_derivative(grid, f):
    """d_r f = (y/r) . grad f, applied componentwise to trailing dims."""
    f = np.asarray(f, dtype=float)
    rr = np.where(grid.r > 0, grid.r, 1.0)
    out = 0.0
    for ax in range(3):
        out = out + _expand(grid.y[..., ax] / rr, f.ndim) * partial(grid, f, ax)
    return np.where(_expand(grid.mask, f.ndim), out, 0.0)


def angular_gradient(grid, f, i: int):
    """agrad_i f = d_i f - (y_i/r^2)(y . grad f), tangential to spheres."""
    f = np.asarray(f, dtype=float)
    parts = [partial(grid, f, ax) for ax in range(3)]
    r2 = np.where(grid.r > 0, grid.r ** 2, 1.0)
    ydotgrad = 0.0
    for ax in range(3):
        ydotgrad = ydotgrad + _expand(grid.y[..., ax], f.ndim) * parts[ax]
    out = parts[i] - _expand(grid.y[..., i] / r2, f.ndim) * ydotgrad
    return np.where(_expand(grid.angular_ok, f.ndim), out, 0.0)


def composite_derivative(grid, f, a: int, beta=(0, 0, 0)):
    """Apply agrad_3^b3, agrad_2^b2, agrad_1^b1, then d_r^a (right to left)."""
    if a < 0 or any(b < 0 for b in beta):
        raise InvalidParameterError("derivative orders must be nonnegative")
    out = np.asarray(f, dtype=float)
    for i in (2, 1, 0):
        for _ in range(beta[i]):
            out = angular_gradient(grid, out, i)
    for _ in range(a):
        out = radial_derivative(grid, out)
    return out


def cartesian_derivative(grid, f, nu):
    """Apply the plain partial-derivative multi-index nu."""
    out = np.asarray(f, dtype=float)
    for i in (2, 1, 0):
        for _ in range(nu[i]):
            out = partial(grid, out, i)
    return out


def det3(M):
    """Determinant of a stacked 3x3 field."""
    return (M[..., 0, 0] * (M[..., 1, 1] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 1])
            - M[..., 0, 1] * (M[..., 1, 0] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 0])
            + M[..., 0, 2] * (M[..., 1, 0] * M[..., 2, 1] - M[..., 1, 1] * M[..., 2, 0]))


def adjugate3(M):
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 1]
    out[..., 0, 1] = M[..., 0, 2] * M[..., 2, 1] - M[..., 0, 1] * M[..., 2, 2]
    out[..., 0, 2] = M[..., 0, 1] * M[..., 1, 2] - M[..., 0, 2] * M[..., 1, 1]
    out[..., 1, 0] = M[..., 1, 2] * M[..., 2, 0] - M[..., 1, 0] * M[..., 2, 2]
    out[..., 1, 1] = M[..., 0, 0] * M[..., 2, 2] - M[..., 0, 2] * M[..., 2, 0]
    out[..., 1, 2] = M[..., 0, 2] * M[..., 1, 0] - M[..., 0, 0] * M[..., 1, 2]
    out[..., 2, 0] = M[..., 1, 0] * M[..., 2, 1] - M[..., 1, 1] * M[..., 2, 0]
    out[..., 2, 1] = M[..., 0, 1] * M[..., 2, 0] - M[..., 0, 0] * M[..., 2, 1]
    out[..., 2, 2] = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    return out


@dataclass
class FlowMapDiff:
    """Pointwise differentials of the flow map eta = y + theta."""

    grid: object
    Deta: np.ndarray     # [..., i, s] = d eta^i / d y_s
    J: np.ndarray        # det Deta
    InvJac: np.ndarray   # exact pointwise inverse of Deta
    cof: np.ndarray      # J * InvJac


def flow_map_jacobian(theta, grid) -> FlowMapDiff:
    """Differentials of eta = y + theta; raises if the map degenerates."""
    Dtheta = jacobian(grid, theta)
    Deta = Dtheta + np.eye(3)
    # outside the mask keep the identity so the algebra stays well-posed
    Deta = np.where(_expand(grid.mask, 5), Deta, np.eye(3))
    J = det3(Deta)
    if np.any(J[grid.mask] <= 0.0):
        jmin = float(J[grid.mask].min())
        raise DegenerateFlowError(f"flow map degenerated: min J = {jmin:.3e}")
    adj = adjugate3(Deta)
    InvJac = adj / J[..., None, None]
    cof = J[..., None, None] * InvJac
    return FlowMapDiff(grid=grid, Deta=Deta, J=J, InvJac=InvJac, cof=cof)


@dataclass
class LieDerivatives:
    grad_eta: np.ndarray   # [..., i, r] = InvJac^s_r F^i,_s
    div_eta: np.ndarray
    curl_little: np.ndarray
    curl_big: np.ndarray


def lie_operators(F, fmd: FlowMapDiff, Lambda) -> LieDerivatives:
    """Lagrangian gradient/divergence and the Lambda-twisted curls of F."""
    grid = fmd.grid
    DF = jacobian(grid, F)
    W = np.einsum("...is,...sr->...ir", DF, fmd.InvJac)
    lam = np.asarray(Lambda, dtype=float)
    if lam.ndim == 2:
        WL = np.einsum("...im,jm->...ij", W, lam)
    else:
        WL = np.einsum("...im,...jm->...ij", W, lam)
    big = WL - np.swapaxes(WL, -1, -2)
    little = np.stack([big[..., 2, 1], big[..., 0, 2], big[..., 1, 0]], axis=-1)
    div = np.einsum("...ii->...", W)
    return LieDerivatives(grad_eta=W, div_eta=div, curl_little=little, curl_big=big)


# default smooth polynomial sample fields for the identity suite

def _sample_scalar(y):
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    return y1 * y2 ** 2 + 0.5 * y3 ** 2 * y1 - 0.3 * y2 + 0.2 * y1 * y2 * y3


def _sample_tensor(y):
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    T = np.zeros(y.shape[:-1] + (3, 3))
    T[..., 0, 0] = y1 ** 2 - y2 * y3
    T[..., 0, 1] = y2 ** 2 + 0.3 * y1
    T[..., 0, 2] = y3 * y1
    T[..., 1, 0] = 0.5 * y2 * y3 + y1
    T[..., 1, 1] = y3 ** 2 - 0.2
    T[..., 1, 2] = y1 * y2
    T[..., 2, 0] = y2 - 0.4 * y3 ** 2
    T[..., 2, 1] = y1 ** 2 * y2
    T[..., 2, 2] = y3 + y1 * y2
    return T


def _sample_displacement(y):
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    th = np.zeros(y.shape[:-1] + (3,))
    th[..., 0] = 0.04 * (y1 * y2 - 0.5 * y3 ** 2)
    th[..., 1] = 0.04 * (y2 * y3 + 0.3 * y1 ** 2)
    th[..., 2] = 0.04 * (y3 * y1 - 0.2 * y2 ** 2)
    return th


def probe_points(count=48, r_lo=0.40, r_hi=0.55, seed=7):
    """Fixed sample points in an interior annulus, shared across resolutions.

    Evaluating residuals at resolution-independent points removes the O(h)
    jitter that comes from taking a sup over a lattice whose intersection
    with the annulus changes under refinement.
    """
    rng = np.random.default_rng(seed)
    pts = np.empty((count, 3))
    have = 0
    while have < count:
        cand = rng.uniform(-r_hi, r_hi, size=(4 * count, 3))
        rad = np.sqrt((cand ** 2).sum(axis=1))
        cand = cand[(rad >= r_lo) & (rad <= r_hi)]
        take = min(count - have, cand.shape[0])
        pts[have:have + take] = cand[:take]
        have += take
    return pts


def probe_eval(grid, field, pts):
    """Trilinear interpolation of a cell-centered field at probe points."""
    c = (np.asarray(pts) + 1.0) / grid.h - 0.5
    i0 = np.floor(c).astype(int)
    frac = c - i0
    i0 = np.clip(i0, 0, grid.n - 2)
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = ((frac[:, 0] if dx else 1.0 - frac[:, 0])
                       * (frac[:, 1] if dy else 1.0 - frac[:, 1])
                       * (frac[:, 2] if dz else 1.0 - frac[:, 2]))
                vals = field[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out = out + wgt.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals
    return out


def _sup(grid, pts, arr):
    return float(np.abs(probe_eval(grid, arr, pts)).max())


def commutator_suite(grid: CartesianGrid, fields=None, probes=None) -> dict:
    """Sup residuals of the discrete commutator identities at fixed probes.

    Returns {identity name: residual}; each residual is expected to shrink
    at stencil order under refinement (except the plain cartesian
    commutator, which vanishes to rounding).
    """
    y = grid.y
    r = np.where(grid.r > 0, grid.r, 1.0)
    pts = probe_points() if probes is None else probes
    f = _sample_scalar(y) if fields is None else fields.get("scalar", _sample_scalar(y))
    T = _sample_tensor(y) if fields is None else fields.get("tensor", _sample_tensor(y))
    theta = (_sample_displacement(y) if fields is None
             else fields.get("displacement", _sample_displacement(y)))

    out = {}

    # [d_r, agrad_i] f = -(1/r) agrad_i f
    res = 0.0
    for i in range(3):
        lhs = radial_derivative(grid, angular_gradient(grid, f, i)) \
            - angular_gradient(grid, radial_derivative(grid, f), i)
        rhs = -angular_gradient(grid, f, i) / r
        res = max(res, _sup(grid, pts, lhs - rhs))
    out["radial-angular"] = res

    # [d_i, d_j] f = 0
    res = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            lhs = partial(grid, partial(grid, f, j), i) \
                - partial(grid, partial(grid, f, i), j)
            res = max(res, _sup(grid, pts, lhs))
    out["cartesian-cartesian"] = res

    # [agrad_i, agrad_j] f = (y_i agrad_j - y_j agrad_i) f / r^2
    res = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            lhs = angular_gradient(grid, angular_gradient(grid, f, j), i) \
                - angular_gradient(grid, angular_gradient(grid, f, i), j)
            rhs = (y[..., i] * angular_gradient(grid, f, j)
                   - y[..., j] * angular_gradient(grid, f, i)) / r ** 2
            res = max(res, _sup(grid, pts, lhs - rhs))
    out["angular-angular"] = res

    # [d_i, agrad_j] f = -(y_j/r^2) agrad_i f + ((y_i y_j - d_ij r^2)/r^3) d_r f
    res = 0.0
    drf = radial_derivative(grid, f)
    for i in range(3):
        for j in range(3):
            lhs = partial(grid, angular_gradient(grid, f, j), i) \
                - angular_gradient(grid, partial(grid, f, i), j)
            tri = (y[..., i] * y[..., j] - (1.0 if i == j else 0.0) * r ** 2) / r ** 3
            rhs = -(y[..., j] / r ** 2) * angular_gradient(grid, f, i) + tri * drf
            res = max(res, _sup(grid, pts, lhs - rhs))
    out["cartesian-angular"] = res

    # weighted-flux commutators, q = alpha
    q = grid.params.alpha
    c = grid.params.w_coeff
    w = grid.w
    w_safe = np.where(grid.mask, w, 1.0)  # w > 0 on all masked cells
    dw_r = -2.0 * c * grid.r           # d_r w
    # divergence (w^{1+q} T^k_i),_k per row i
    def flux_div(power, tens):
        div = np.zeros(tens.shape[:-2] + (3,))
        wp = np.where(grid.mask, w, 0.0) ** power
        for i in range(3):
            acc = 0.0
            for k in range(3):
                acc = acc + partial(grid, wp * tens[..., k, i], k)
            div[..., i] = acc
        return div

    # radial flux commutator (weight power steps q -> q+1)
    base = flux_div(1.0 + q, T) / w_safe[..., None] ** q
    lhs = radial_derivative(grid, base)
    drT = radial_derivative(grid, T)
    main = flux_div(2.0 + q, drT) / w_safe[..., None] ** (1.0 + q)
    # C_i^{q+1}[T] = (d_r w - w/r) agrad_k T^k_i + (1+q) d_r(w,_k) T^k_i
    comm = np.zeros(T.shape[:-2] + (3,))
    for i in range(3):
        acc = 0.0
        for k in range(3):
            acc = acc + angular_gradient(grid, T[..., k, i], k)
            comm[..., i] = comm[..., i] + (1.0 + q) * (-2.0 * c * y[..., k] / r) * T[..., k, i]
        comm[..., i] = comm[..., i] + (dw_r - w / r) * acc
    out["flux-radial"] = _sup(grid, pts, lhs - main - comm)

    # angular flux commutator, for each tangential direction j
    res = 0.0
    for j in range(3):
        lhs = angular_gradient(grid, base, j)
        agT = angular_gradient(grid, T, j)
        main = flux_div(1.0 + q, agT) / w_safe[..., None] ** q
        comm = np.zeros(T.shape[:-2] + (3,))
        for i in range(3):
            acc = 0.0
            for k in range(3):
                acc = acc + (y[..., j] / r ** 2) * angular_gradient(grid, T[..., k, i], k) \
                    + (((1.0 if k == j else 0.0) * r ** 2 - y[..., k] * y[..., j]) / r ** 3) \
                    * radial_derivative(grid, T[..., k, i])
                agw = -2.0 * c * ((1.0 if j == k else 0.0) - y[..., j] * y[..., k] / r ** 2)
                comm[..., i] = comm[..., i] + (1.0 + q) * agw * T[..., k, i]
            comm[..., i] = comm[..., i] + w * acc
        res = max(res, _sup(grid, pts, lhs - main - comm))
    out["flux-angular"] = res

    # differentiation formulas for the exact pointwise inverse
    fmd = flow_map_jacobian(theta, grid)
    A = fmd.InvJac
    res = 0.0
    for k in range(3):
        dA = partial(grid, A, k)
        dDeta = partial(grid, fmd.Deta, k)
        rhs = -np.einsum("...ab,...bc,...cd->...ad", A, dDeta, A)
        res = max(res, _sup(grid, pts, dA - rhs))
    out["grad-inverse-cartesian"] = res

    # radial version with the angular correction [d_m, d_r] = (1/r) agrad_m
    drA = radial_derivative(grid, A)
    drth = radial_derivative(grid, theta)
    Ddrth = jacobian(grid, drth)
    corr = np.stack([angular_gradient(grid, theta, m) / r[..., None]
                     for m in range(3)], axis=-1)   # [..., s, m]
    rhs = -np.einsum("...ks,...sm,...mi->...ki", A, Ddrth, A) \
        + np.einsum("...ks,...sm,...mi->...ki", A, corr, A)
    out["grad-inverse-radial"] = _sup(grid, pts, drA - rhs)

    # angular version: [d_m, agrad_j] = -(y_j/r^2) agrad_m + tri_{mj} d_r
    res = 0.0
    drth_full = radial_derivative(grid, theta)
    for j in range(3):
        agA = angular_gradient(grid, A, j)
        agth = angular_gradient(grid, theta, j)
        Dagth = jacobian(grid, agth)
        corr = np.zeros_like(A)
        for m in range(3):
            comm_vec = -(y[..., j] / r ** 2)[..., None] * angular_gradient(grid, theta, m)
            tri_mj = (y[..., m] * y[..., j] - (1.0 if m == j else 0.0) * r ** 2) / r ** 3
            comm_vec = comm_vec + tri_mj[..., None] * drth_full
            corr[..., :, m] = comm_vec
        rhs = -np.einsum("...ks,...sm,...mi->...ki", A, Dagth, A) \
            + np.einsum("...ks,...sm,...mi->...ki", A, corr, A)
        res = max(res, _sup(grid, pts, agA - rhs))
    out["grad-inverse-angular"] = res

    return out


def commutator_ladder(params, ns=(24, 32, 48, 64), fields=None):
    """Run the identity suite on a refinement ladder and fit convergence.

    Returns {identity: {"residuals": [...], "order": slope, "ratios": [...]}}
    where order is the log-log slope of residual vs h and ratios are the
    residual drops over the h -> h/2 pairs present in the ladder.
    The cartesian-cartesian identity is exact and reported with order inf.
    """
    pts = probe_points()
    runs = []
    for n in ns:
        grid = CartesianGrid(params, n)
        runs.append(commutator_suite(grid, fields=fields, probes=pts))
    hs = np.array([2.0 / n for n in ns])
    report = {}
    for name in runs[0]:
        vals = np.array([run[name] for run in runs])
        entry = {"residuals": vals.tolist()}
        if vals.max() < 1e-12:
            entry["order"] = float("inf")
            entry["ratios"] = []
        else:
            entry["order"] = float(np.polyfit(np.log(hs), np.log(vals), 1)[0])
            ratios = []
            for i, ni in enumerate(ns):
                for j, nj in enumerate(ns):
                    if nj == 2 * ni and vals[j] > 0:
                        ratios.append(float(vals[i] / vals[j]))
            entry["ratios"] = ratios
        report[name] = entry
    return report
