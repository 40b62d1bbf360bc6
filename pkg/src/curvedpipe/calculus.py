"""Field evaluation and tensor calculus in the toroidal orthonormal frame.

Provides reference-element basis tables, batched evaluation of discrete
fields with derivatives, the velocity gradient / extra stress / total flux
tensor and its divergence F for fully developed fields, and an independent
Cartesian-map oracle that differentiates numerically through the embedding
x = ((1/delta + r cos t) cos(s delta), (1/delta + r cos t) sin(s delta), r sin t).

Gradient convention, fixed globally: rows index the direction of
differentiation, G_ij = (grad u)_ij = d_i u_j, and divergence contracts the
second index.  The oracle test pins this convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from curvedpipe.geometry import P1, P1DISC, P2, metric


def tabulate(space: str, pts: np.ndarray):
    """Reference-triangle basis values, gradients and (constant) hessians.

    Returns (vals (nq, nloc), grads (nq, nloc, 2), hess (nloc, 2, 2)).
    Local P2 numbering: vertices 0..2, then midpoint 3+k opposite vertex k.
    """
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    lam0 = 1.0 - x - y
    if space in (P1, P1DISC):
        vals = np.stack([lam0, x, y], axis=1)
        grads = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
                                (pts.shape[0], 3, 2)).copy()
        return vals, grads, np.zeros((3, 2, 2))
    if space != P2:
        raise ValueError(f"unknown space {space!r}")
    vals = np.stack([
        lam0 * (2 * lam0 - 1), x * (2 * x - 1), y * (2 * y - 1),
        4 * x * y, 4 * lam0 * y, 4 * lam0 * x,
    ], axis=1)
    zero = np.zeros_like(x)
    grads = np.stack([
        np.stack([1 - 4 * lam0, 1 - 4 * lam0], axis=1),
        np.stack([4 * x - 1, zero], axis=1),
        np.stack([zero, 4 * y - 1], axis=1),
        np.stack([4 * y, 4 * x], axis=1),
        np.stack([-4 * y, 4 * (lam0 - y)], axis=1),
        np.stack([4 * (lam0 - x), -4 * x], axis=1),
    ], axis=1)
    hess = np.array([
        [[4, 4], [4, 4]], [[4, 0], [0, 0]], [[0, 0], [0, 4]],
        [[0, 4], [4, 0]], [[0, -4], [-4, -8]], [[-8, -4], [-4, 0]],
    ], dtype=float)
    return vals, grads, hess


class ElementBasis:
    """Basis data mapped to every cell at a fixed set of reference points.

    points: (ne, nq, 2) physical (r, theta) with theta unwrapped per cell;
    vals: (nq, nloc); grad: (ne, nq, nloc, 2); hess: (ne, nloc, 2, 2);
    det: (ne,) Jacobian determinants (positive).
    """

    def __init__(self, mesh, space: str, ref_points: np.ndarray):
        ref_points = np.atleast_2d(ref_points)
        x, y = ref_points[:, 0], ref_points[:, 1]
        if np.any(x < -1e-12) or np.any(y < -1e-12) or np.any(x + y > 1 + 1e-12):
            raise ValueError("reference point outside the element")
        self.space = space
        self.vals, gref, href = tabulate(space, ref_points)
        J, Jit, det = mesh.jacobians()
        self.det = det
        self.grad = np.einsum("cde,qle->cqld", Jit, gref)
        self.hess = np.einsum("cde,lef,cgf->cldg", Jit, href, Jit)
        p0 = mesh.cell_coords[:, 0, :]
        self.points = p0[:, None, :] + np.einsum("cde,qe->cqd", J, ref_points)


def evaluate(basis: ElementBasis, conn: np.ndarray, nodal: np.ndarray, order: int = 0):
    """Evaluate a nodal field on all cells at the basis points.

    Returns val (ne, nq); with order>=1 also d1 (ne, nq, 2); with order==2
    also d2 (ne, 3) = elementwise-constant (d_rr, d_rt, d_tt).
    """
    coeffs = nodal[conn]
    val = coeffs @ basis.vals.T
    if order == 0:
        return val
    d1 = np.einsum("cl,cqld->cqd", coeffs, basis.grad)
    if order == 1:
        return val, d1
    h = np.einsum("cl,cldg->cdg", coeffs, basis.hess)
    d2 = np.stack([h[:, 0, 0], h[:, 0, 1], h[:, 1, 1]], axis=1)
    return val, d1, d2


@dataclass
class VelocitySample:
    """Pointwise fully developed flow data in the toroidal frame.

    Velocity components (u, v, w), their first derivatives d* = (d/dr, d/dt)
    and second derivatives d2* = (d/drr, d/drt, d/dtt), pressure and its
    first derivatives, at points (r, theta).  All arrays broadcast together;
    no s-derivatives exist for fully developed fields.
    """

    r: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    dw: np.ndarray
    d2u: np.ndarray
    d2v: np.ndarray
    d2w: np.ndarray
    p: np.ndarray
    dp: np.ndarray

    def __post_init__(self):
        for name in ("du", "dv", "dw", "d2u", "d2v", "d2w", "dp"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite derivatives in {name}")


def sample_state(basis2: ElementBasis, basis1: ElementBasis, conn2, conn1,
                 u, v, w, p) -> VelocitySample:
    """Sample discrete (u, v, w, p) nodal fields at the basis quadrature points."""
    uu, du, d2u = evaluate(basis2, conn2, u, order=2)
    vv, dv, d2v = evaluate(basis2, conn2, v, order=2)
    ww, dw, d2w = evaluate(basis2, conn2, w, order=2)
    pp, dp = evaluate(basis1, conn1, p, order=1)
    r = basis2.points[:, :, 0]
    t = basis2.points[:, :, 1]
    return VelocitySample(r, t, uu, vv, ww, du, dv, dw,
                          d2u[:, None, :], d2v[:, None, :], d2w[:, None, :],
                          pp, dp)


class _Jet:
    """Value with first derivatives (d/dr, d/dt); product/quotient rules."""

    __slots__ = ("v", "r", "t")

    def __init__(self, v, r, t):
        self.v, self.r, self.t = v, r, t

    def __add__(self, o):
        if isinstance(o, _Jet):
            return _Jet(self.v + o.v, self.r + o.r, self.t + o.t)
        return _Jet(self.v + o, self.r, self.t)

    __radd__ = __add__

    def __neg__(self):
        return _Jet(-self.v, -self.r, -self.t)

    def __sub__(self, o):
        return self + (-o if isinstance(o, _Jet) else -np.asarray(o))

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, _Jet):
            return _Jet(self.v * o.v, self.r * o.v + self.v * o.r,
                        self.t * o.v + self.v * o.t)
        return _Jet(self.v * o, self.r * o, self.t * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if not isinstance(o, _Jet):
            return self * (1.0 / o)
        inv2 = 1.0 / (o.v * o.v)
        return _Jet(self.v / o.v, (self.r * o.v - self.v * o.r) * inv2,
                    (self.t * o.v - self.v * o.t) * inv2)


def _jets(sample: VelocitySample, delta: float):
    """3x3 nested list of velocity-gradient jets plus metric jets."""
    r, t = sample.r, sample.theta
    ct, st = np.cos(t), np.sin(t)
    c = _Jet(delta * ct, np.zeros_like(r), -delta * st)   # B2/r, axis-safe
    s1 = _Jet(delta * st, np.zeros_like(r), delta * ct)   # B1/r
    jB = _Jet(1.0 + r * c.v, c.v, -r * s1.v)
    jr = _Jet(r, np.ones_like(r), np.zeros_like(r))

    def field_jets(f, df, d2f):
        val = _Jet(f, df[..., 0], df[..., 1])
        fr = _Jet(df[..., 0], d2f[..., 0], d2f[..., 1])
        ft = _Jet(df[..., 1], d2f[..., 1], d2f[..., 2])
        return val, fr, ft

    ju, jur, jut = field_jets(sample.u, sample.du, sample.d2u)
    jv, jvr, jvt = field_jets(sample.v, sample.dv, sample.d2v)
    jw, jwr, jwt = field_jets(sample.w, sample.dw, sample.d2w)

    G = [[jur, jvr, jwr],
         [(jut - jv) / jr, (jvt + ju) / jr, jwt / jr],
         [-jw * c / jB, jw * s1 / jB, (ju * c - jv * s1) / jB]]
    return G, (ju, jv, jw), jr, jB


def velocity_gradient(sample: VelocitySample, delta: float) -> np.ndarray:
    """Velocity gradient in the toroidal frame, shape (..., 3, 3).

    Rows are the differentiation direction (e_r, e_theta, e_s).  At r=0 the
    angular row is completed by its finite limit (requires the axis tie).
    """
    r = np.asarray(sample.r, dtype=float)
    on_axis = r == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        G, _, _, _ = _jets(sample, delta)
    shape = np.broadcast(r, sample.u).shape
    out = np.stack([np.stack([np.broadcast_to(G[i][j].v, shape)
                              for j in range(3)], axis=-1)
                    for i in range(3)], axis=-2).astype(float).copy()
    if np.any(on_axis):
        # only the theta row divides by r; patch it with the r->0 limits
        # (u_t - v)/r -> u_rt - v_r etc., finite under the axis tie
        lim = np.stack([np.broadcast_to(sample.d2u[..., 1] - sample.dv[..., 0], shape),
                        np.broadcast_to(sample.d2v[..., 1] + sample.du[..., 0], shape),
                        np.broadcast_to(sample.d2w[..., 1], shape)], axis=-1)
        out[..., 1, :] = np.where(np.broadcast_to(on_axis, shape)[..., None],
                                  lim, out[..., 1, :])
    return out


def extra_stress(gradu: np.ndarray, alpha: float) -> np.ndarray:
    """Second-grade extra stress alpha * (G^T A1 + A1^2) with A1 = G + G^T."""
    if not np.all(np.isfinite(gradu)):
        raise ValueError("non-finite velocity gradient")
    # transpose pairing and the retained A1^2 term are pinned by the
    # secondary-flow reversal benchmarks; the dual-route oracle checks both
    A1 = gradu + np.swapaxes(gradu, -1, -2)
    return alpha * (np.swapaxes(gradu, -1, -2) @ A1 + A1 @ A1)


def total_flux_tensor(sample: VelocitySample, gradu: np.ndarray, params) -> np.ndarray:
    """T = L(u) - alpha p G - Re u (x) u in the toroidal frame."""
    T = extra_stress(gradu, params.alpha)
    T = T - params.alpha * np.asarray(sample.p)[..., None, None] * gradu
    uvec = np.stack(np.broadcast_arrays(sample.u, sample.v, sample.w), axis=-1)
    return T - params.reynolds * (uvec[..., :, None] * uvec[..., None, :])


def force_divergence(sample: VelocitySample, params) -> np.ndarray:
    """F = div T in the toroidal frame for the fully developed flow, (..., 3).

    Includes the axial-pressure contribution alpha * pstar * G_is / B from
    p = pbar - pstar*s; evaluated exactly from the sample's elementwise
    derivatives (P2 velocity, P1 pressure) via first-order jets.
    """
    G, (ju, jv, jw), jr, jB = _jets(sample, params.delta)
    al, Re = params.alpha, params.reynolds
    A1 = [[G[i][j] + G[j][i] for j in range(3)] for i in range(3)]
    jp = _Jet(np.asarray(sample.p, dtype=float), sample.dp[..., 0], sample.dp[..., 1])
    U = [ju, jv, jw]
    T = [[al * sum((G[k][i] * A1[k][j] + A1[i][k] * A1[k][j] for k in range(3)),
                   _Jet(0.0, 0.0, 0.0))
          - al * jp * G[i][j] - Re * U[i] * U[j]
          for j in range(3)] for i in range(3)]

    r = jr.v
    B, B1, B2 = metric(r, sample.theta, params.delta)
    rB = r * B
    F1 = (T[0][0].r + T[0][1].t / r + (T[0][0].v - T[1][1].v) / r
          + (B2 * T[0][0].v - B1 * T[0][1].v - B2 * T[2][2].v) / rB)
    F2 = (T[1][0].r + T[1][1].t / r + (T[1][0].v + T[0][1].v) / r
          + (B2 * T[1][0].v - B1 * T[1][1].v + B1 * T[2][2].v) / rB)
    F3 = (T[2][0].r + T[2][1].t / r + T[2][0].v / r
          + (B2 * (T[0][2].v + T[2][0].v) - B1 * (T[1][2].v + T[2][1].v)) / rB)
    F = np.stack(np.broadcast_arrays(F1, F2, F3), axis=-1)
    Gs = np.stack(np.broadcast_arrays(G[0][2].v, G[1][2].v, G[2][2].v), axis=-1)
    return F + al * params.pstar * Gs / B[..., None]


class AnalyticField:
    """Closed-form (u, v, w, p) on the cross-section with exact derivatives.

    Built from sympy expressions in two symbols (r, t); provides float
    sampling for the frame formulas and arbitrary-precision callables for
    the Cartesian oracle.
    """

    def __init__(self, u, v, w, p, symbols):
        import sympy as sym

        r, t = symbols
        self._sym = (r, t)
        self._exprs = {"u": u, "v": v, "w": w, "p": p}
        self._flt = {}
        for name, expr in self._exprs.items():
            orders = [(), (r,), (t,)] if name == "p" else \
                     [(), (r,), (t,), (r, r), (r, t), (t, t)]
            self._flt[name] = [sym.lambdify((r, t), sym.diff(expr, *d) if d else expr,
                                            "numpy") for d in orders]

    def sample(self, r, theta) -> VelocitySample:
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)

        def ev(fn):
            return np.broadcast_to(np.asarray(fn(r, theta), dtype=float),
                                   np.broadcast(r, theta).shape).copy()

        out = {}
        for name in ("u", "v", "w"):
            f = self._flt[name]
            out[name] = ev(f[0])
            out["d" + name] = np.stack([ev(f[1]), ev(f[2])], axis=-1)
            out["d2" + name] = np.stack([ev(f[3]), ev(f[4]), ev(f[5])], axis=-1)
        fp = self._flt["p"]
        return VelocitySample(r, theta, out["u"], out["v"], out["w"],
                              out["du"], out["dv"], out["dw"],
                              out["d2u"], out["d2v"], out["d2w"],
                              ev(fp[0]), np.stack([ev(fp[1]), ev(fp[2])], axis=-1))

    def mp_callables(self):
        import sympy as sym

        return {name: sym.lambdify(self._sym, expr, "mpmath")
                for name, expr in self._exprs.items()}


def oracle_force(field: AnalyticField, point, params, step: float = 1e-4,
                 s: float = 0.0) -> np.ndarray:
    """Cartesian finite-difference evaluation of div T, mapped back to the frame.

    Fully numerical: frame vectors are normalized difference quotients of the
    embedding map and all differentiation is 4th-order central FD in the
    parameter space, run in extended precision so nested differences do not
    amplify rounding.  At s=0 this equals the fully developed F for any
    smooth field; for solenoidal fields it is s-independent.
    """
    from mpmath import mp, matrix, lu_solve, mpf

    fns = field.mp_callables()
    r0, t0 = point
    with mp.workdps(30):
        h = mpf(step)
        delta = mpf(repr(params.delta))
        alpha, Re = mpf(repr(params.alpha)), mpf(repr(params.reynolds))
        pstar = mpf(repr(params.pstar))

        if params.delta == 0.0:
            def X(r, t, ss):
                return matrix([r * mp.cos(t), ss, r * mp.sin(t)])
        else:
            def X(r, t, ss):
                R = 1 / delta + r * mp.cos(t)
                return matrix([R * mp.cos(ss * delta), R * mp.sin(ss * delta),
                               r * mp.sin(t)])

        stencil = ((2, mpf(-1)), (1, mpf(8)), (-1, mpf(-8)), (-2, mpf(1)))

        def fd_rows(f, xi):
            out = matrix(3, 3)
            for l in range(3):
                for sgn, wgt in stencil:
                    q = list(xi)
                    q[l] += sgn * h
                    val = f(*q)
                    for k in range(3):
                        out[l, k] += wgt * val[k] / (12 * h)
            return out

        def solve33(A, Bm):
            out = matrix(3, 3)
            for j in range(3):
                col = lu_solve(A, matrix([Bm[0, j], Bm[1, j], Bm[2, j]]))
                for i in range(3):
                    out[i, j] = col[i]
            return out

        def frame(r, t, ss):
            A = fd_rows(X, (r, t, ss))
            R = matrix(3, 3)
            for l in range(3):
                n = mp.sqrt(sum(A[l, k] ** 2 for k in range(3)))
                for k in range(3):
                    R[l, k] = A[l, k] / n
            return R

        def V(r, t, ss):
            R = frame(r, t, ss)
            comp = [fns["u"](r, t), fns["v"](r, t), fns["w"](r, t)]
            return matrix([sum(comp[l] * R[l, k] for l in range(3))
                           for k in range(3)])

        def T_at(r, t, ss):
            A = fd_rows(X, (r, t, ss))
            DV = fd_rows(V, (r, t, ss))
            G = solve33(A, DV)
            A1 = G + G.T
            GA = G.T * A1 + A1 * A1
            pval = fns["p"](r, t) - pstar * ss
            Vv = V(r, t, ss)
            out = matrix(3, 3)
            for i in range(3):
                for j in range(3):
                    out[i, j] = (alpha * GA[i, j] - alpha * pval * G[i, j]
                                 - Re * Vv[i] * Vv[j])
            return out

        xi0 = (mpf(repr(float(r0))), mpf(repr(float(t0))), mpf(repr(float(s))))
        DT = [matrix(3, 3) for _ in range(3)]
        for l in range(3):
            for sgn, wgt in stencil:
                q = list(xi0)
                q[l] += sgn * h
                Tv = T_at(*q)
                for i in range(3):
                    for j in range(3):
                        DT[l][i, j] += wgt * Tv[i, j] / (12 * h)
        A0 = fd_rows(X, xi0)
        eye = matrix([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        Ainv = solve33(A0, eye)
        divT = [sum(Ainv[j, l] * DT[l][i, j] for j in range(3) for l in range(3))
                for i in range(3)]
        R0 = frame(*xi0)
        out = np.array([float(sum(R0[i, k] * divT[k] for k in range(3)))
                        for i in range(3)])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite oracle output")
    return out


def cartesian_residual(field: AnalyticField, point, params, step: float = 1e-4) -> float:
    """Max-abs gap between the frame force divergence and the Cartesian oracle."""
    r0, t0 = point
    if r0 <= 0.05:
        raise ValueError("oracle stencil too close to the axis: need r > 0.05")
    sample = field.sample(np.asarray(r0), np.asarray(t0))
    F = force_divergence(sample, params)
    Fo = oracle_force(field, point, params, step=step)
    return float(np.max(np.abs(F - Fo)))
