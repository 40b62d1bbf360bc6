"""Weighted Stokes saddle-point system for the secondary flow (u, v, p) and
the axial equation for w.

All inner products use the plain dr dtheta measure with every geometric
weight written out, exactly as produced by multiplying the strong equations
by (rB)^2 zeta and integrating by parts:

    a(u,z)  = (rB u_r, rB z_r + (B+B2) z) + (B u_t, B z_t - B1 z)
    a1      = a(u,z) + ((B^2+B2^2) u - B1(B+B2) v + 2 B^2 v_t, z)
    a2      = a(v,z) + ((B^2+B1^2) v + B1 u - 2 B^2 u_t, z)
    a3      = a(w,z) + ((r delta)^2 w, z)
    b1(p,z) = -(rB p, rB z_r + 2(B+B2) z)
    b2(p,z) = -(rB p, B z_t - 2 B1 z)
    div     = (d(rBu)/dr + d(Bv)/dt, psi)

The zero-mean pressure condition is one Lagrange multiplier row with the
plain measure; wall Dirichlet and axis ties are eliminated through the dof
prolongations.  The first-order terms make the operators nonsymmetric; they
are assembled as written, without symmetrization.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from curvedpipe.calculus import ElementBasis, evaluate
from curvedpipe.geometry import (
    AXIS_COLLAPSE,
    AXIS_TRIG,
    P1,
    P2,
    DiscreteField,
    metric,
    reference_quadrature,
)

DEFAULT_QUAD_DEGREE = 6


def geometry_factors(basis: ElementBasis, delta: float):
    """(r, B, B1, B2, rB) at the basis quadrature points, shape (ne, nq)."""
    r = basis.points[:, :, 0]
    t = basis.points[:, :, 1]
    B, B1, B2 = metric(r, t, delta)
    return r, B, B1, B2, r * B


def scatter_matrix(local: np.ndarray, rows_conn: np.ndarray, cols_conn: np.ndarray,
                   shape) -> sp.csr_matrix:
    """Accumulate per-cell dense blocks (ne, ni, nj) into a CSR matrix."""
    ne, ni, nj = local.shape
    rows = np.repeat(rows_conn, nj, axis=1).ravel()
    cols = np.tile(cols_conn, (1, ni)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=shape)


def scatter_vector(local: np.ndarray, conn: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    np.add.at(out, conn.ravel(), local.ravel())
    return out


def local_forms(mesh, params, quad_degree: int = DEFAULT_QUAD_DEGREE) -> dict:
    """Per-element matrices of the bilinear forms, rows test / columns trial.

    Keys: "a", "a3" (P2 x P2); "b1", "b2" (P2 test x P1 trial); "a1", "a2"
    and "div" are (u-block, v-block) pairs since they act on the velocity
    pair.  a1[0] contains a plus the diagonal coupling, a1[1] the v-coupling
    of the u-equation, and symmetrically for a2.
    """
    rule = reference_quadrature(quad_degree)
    b2b = ElementBasis(mesh, P2, rule.points)
    b1b = ElementBasis(mesh, P1, rule.points)
    wd = rule.weights[None, :] * b2b.det[:, None]
    _, B, B1, B2, rB = geometry_factors(b2b, params.delta)
    r = b2b.points[:, :, 0]
    ne = mesh.n_cells
    v2 = np.broadcast_to(b2b.vals[None], (ne,) + b2b.vals.shape)
    v1 = np.broadcast_to(b1b.vals[None], (ne,) + b1b.vals.shape)
    gr2, gt2 = b2b.grad[..., 0], b2b.grad[..., 1]

    def mass(coef, test, trial):
        return np.einsum("cq,cqi,cqj->cij", wd * coef, test, trial)

    test_r = rB[..., None] * gr2 + (B + B2)[..., None] * v2
    test_t = B[..., None] * gt2 - B1[..., None] * v2
    a_loc = (np.einsum("cq,cqi,cqj->cij", wd, test_r, rB[..., None] * gr2)
             + np.einsum("cq,cqi,cqj->cij", wd, test_t, B[..., None] * gt2))

    rot = np.einsum("cq,cqi,cqj->cij", wd, 2 * B[..., None] ** 2 * v2, gt2)
    a1_u = a_loc + mass(B ** 2 + B2 ** 2, v2, v2)
    a1_v = mass(-B1 * (B + B2), v2, v2) + rot
    a2_u = mass(B1, v2, v2) - rot
    a2_v = a_loc + mass(B ** 2 + B1 ** 2, v2, v2)
    a3_loc = a_loc + mass((r * params.delta) ** 2, v2, v2)

    test_b1 = rB[..., None] * gr2 + 2 * (B + B2)[..., None] * v2
    test_b2 = B[..., None] * gt2 - 2 * B1[..., None] * v2
    b1_loc = -np.einsum("cq,cqi,cqj->cij", wd, test_b1, rB[..., None] * v1)
    b2_loc = -np.einsum("cq,cqi,cqj->cij", wd, test_b2, rB[..., None] * v1)

    # constraint rows: d(rBu)/dr = rB u_r + (B+B2) u, d(Bv)/dt = B v_t - B1 v
    div_u = np.einsum("cq,cqi,cqj->cij", wd, v1, test_r)
    div_v = np.einsum("cq,cqi,cqj->cij", wd, v1, test_t)

    return {"a": a_loc, "a1": (a1_u, a1_v), "a2": (a2_u, a2_v), "a3": a3_loc,
            "b1": b1_loc, "b2": b2_loc, "div": (div_u, div_v)}


def form_value(mesh, name: str, test_nodal: np.ndarray, trial_nodal: np.ndarray,
               params, quad_degree: int = DEFAULT_QUAD_DEGREE) -> float:
    """Global value of a scalar form: sum of z_K^T M_K x_K over elements."""
    loc = local_forms(mesh, params, quad_degree)[name]
    if isinstance(loc, tuple):
        raise ValueError("form %r couples the velocity pair; use its blocks" % name)
    from curvedpipe.geometry import _p2_nodes

    conn2 = _p2_nodes(mesh)[0]
    conn_t = conn2 if loc.shape[1] == 6 else mesh.triangles
    conn_x = conn2 if loc.shape[2] == 6 else mesh.triangles
    return float(np.einsum("ci,cij,cj->", test_nodal[conn_t], loc, trial_nodal[conn_x]))


class SaddleSystem:
    """Constrained saddle-point operator for the in-plane flow.

    Unknown layout: [(u,v) free dofs | p free dofs | zero-mean multiplier].
    The operator depends only on (mesh, delta), so it is factored once and
    reused across fixed-point iterations and continuation steps.
    """

    def __init__(self, mesh, dm_uv, dm_p, params, quad_degree: int = DEFAULT_QUAD_DEGREE):
        if dm_uv.space != P2 or dm_uv.axis_policy != AXIS_TRIG:
            raise ValueError("velocity map must be P2 with the vector-trig axis policy")
        if dm_p.space != P1 or dm_p.axis_policy != AXIS_COLLAPSE:
            raise ValueError("pressure map must be P1 continuous with axis collapse")
        self.mesh, self.dm_uv, self.dm_p = mesh, dm_uv, dm_p
        forms = local_forms(mesh, params, quad_degree)
        conn2, conn1 = dm_uv.element_nodes, dm_p.element_nodes
        n2, n1 = dm_uv.n_nodes, dm_p.n_nodes
        A = sp.bmat([
            [scatter_matrix(forms["a1"][0], conn2, conn2, (n2, n2)),
             scatter_matrix(forms["a1"][1], conn2, conn2, (n2, n2))],
            [scatter_matrix(forms["a2"][0], conn2, conn2, (n2, n2)),
             scatter_matrix(forms["a2"][1], conn2, conn2, (n2, n2))],
        ], format="csr")
        Bmat = sp.bmat([[scatter_matrix(forms["b1"], conn2, conn1, (n2, n1))],
                        [scatter_matrix(forms["b2"], conn2, conn1, (n2, n1))]],
                       format="csr")
        C = sp.bmat([[scatter_matrix(forms["div"][0], conn1, conn2, (n1, n2)),
                      scatter_matrix(forms["div"][1], conn1, conn2, (n1, n2))]],
                    format="csr")

        rule = reference_quadrature(quad_degree)
        b1b = ElementBasis(mesh, P1, rule.points)
        m_loc = np.einsum("cq,qi->ci", rule.weights[None, :] * b1b.det[:, None],
                          b1b.vals)
        m_red = dm_p.P.T @ scatter_vector(m_loc, conn1, n1)

        Puv, Pp = dm_uv.P, dm_p.P
        self.n_uv, self.n_p = Puv.shape[1], Pp.shape[1]
        K = sp.bmat([
            [(Puv.T @ A @ Puv), (Puv.T @ Bmat @ Pp), None],
            [(Pp.T @ C @ Puv), None, m_red[:, None]],
            [None, sp.csr_matrix(m_red[None, :]), None],
        ], format="csc")
        if not np.all(np.isfinite(K.data)):
            raise FloatingPointError("non-finite entries in the saddle operator")
        self.matrix = K.tocsr()
        self.lu = spla.splu(K)

    def solve(self, fu_full: np.ndarray, fv_full: np.ndarray,
              g_full: np.ndarray | None = None):
        """Solve for (u, v, p) given load vectors over the full nodal test spaces.

        g_full, if given, is a constraint datum (div(u,v), psi) = (g, psi) used
        by manufactured-solution runs; the physical problem has g = 0.
        """
        rhs = np.concatenate([
            self.dm_uv.P.T @ np.concatenate([fu_full, fv_full]),
            self.dm_p.P.T @ g_full if g_full is not None else np.zeros(self.n_p),
            [0.0],
        ])
        x = self.lu.solve(rhs)
        nb = np.linalg.norm(rhs)
        self.last_residual = float(np.linalg.norm(self.matrix @ x - rhs) / max(nb, 1.0))
        self.last_multiplier = float(x[-1])
        if self.last_residual > 1e-8:
            raise FloatingPointError("saddle solve lost accuracy")
        uv = DiscreteField.from_free(self.dm_uv, x[:self.n_uv])
        p = DiscreteField.from_free(self.dm_p, x[self.n_uv:self.n_uv + self.n_p])
        return uv, p

    def divergence_residual(self, uv: DiscreteField) -> float:
        """Norm of the constraint rows applied to (u, v), relative to the field."""
        x = uv.free()
        C = self.matrix[self.n_uv:self.n_uv + self.n_p, :self.n_uv]
        nrm = np.linalg.norm(x)
        return float(np.linalg.norm(C @ x) / (nrm if nrm > 0 else 1.0))


class AxialSystem:
    """Constrained operator for the axial velocity equation a3(w, zeta) with
    the (r^2 B p*, zeta) forcing preassembled."""

    def __init__(self, mesh, dm_w, params, quad_degree: int = DEFAULT_QUAD_DEGREE):
        if dm_w.space != P2 or dm_w.axis_policy != AXIS_COLLAPSE:
            raise ValueError("axial map must be P2 with scalar axis collapse")
        self.mesh, self.dm_w = mesh, dm_w
        forms = local_forms(mesh, params, quad_degree)
        conn = dm_w.element_nodes
        n = dm_w.n_nodes
        A_red = (dm_w.P.T @ scatter_matrix(forms["a3"], conn, conn, (n, n)) @ dm_w.P).tocsc()
        self.matrix = A_red.tocsr()
        self.lu = spla.splu(A_red)

        rule = reference_quadrature(quad_degree)
        basis = ElementBasis(mesh, P2, rule.points)
        wd = rule.weights[None, :] * basis.det[:, None]
        r, B, _, _, _ = geometry_factors(basis, params.delta)
        load = np.einsum("cq,qi->ci", wd * r ** 2 * B * params.pstar, basis.vals)
        self.pstar_load = scatter_vector(load, conn, n)

    def solve(self, extra_full: np.ndarray | None = None,
              include_pstar: bool = True) -> DiscreteField:
        rhs = self.pstar_load.copy() if include_pstar else np.zeros(self.dm_w.n_nodes)
        if extra_full is not None:
            rhs = rhs + extra_full
        b = self.dm_w.P.T @ rhs
        x = self.lu.solve(b)
        self.last_residual = float(np.linalg.norm(self.matrix @ x - b)
                                   / max(np.linalg.norm(b), 1.0))
        return DiscreteField.from_free(self.dm_w, x)


def assemble_load(mesh, dofmap, fvals: np.ndarray,
                  quad_degree: int = DEFAULT_QUAD_DEGREE) -> np.ndarray:
    """Assemble (f, zeta) over the full nodal test space, f given at the
    quadrature points of the matching rule, plain dr dtheta measure."""
    rule = reference_quadrature(quad_degree)
    space = P1 if dofmap.space in (P1, "p1disc") else P2
    basis = ElementBasis(mesh, space, rule.points)
    wd = rule.weights[None, :] * basis.det[:, None]
    local = np.einsum("cq,qi->ci", wd * fvals, basis.vals)
    return scatter_vector(local, dofmap.element_nodes, dofmap.n_nodes)


def pressure_gradient_load(mesh, pvals: np.ndarray, params,
                           quad_degree: int = DEFAULT_QUAD_DEGREE):
    """Weak pressure-gradient loads for pressure data given at quadrature
    points: gu = -(rB p, rB z_r + 2(B+B2) z), gv = -(rB p, B z_t - 2 B1 z)
    over the full P2 nodal test space.  For a P1 coefficient field these
    reproduce the assembled b1/b2 matrices exactly (same rule)."""
    from curvedpipe.geometry import _p2_nodes

    rule = reference_quadrature(quad_degree)
    basis = ElementBasis(mesh, P2, rule.points)
    wd = rule.weights[None, :] * basis.det[:, None]
    _, B, B1, B2, rB = geometry_factors(basis, params.delta)
    ne = mesh.n_cells
    v2 = np.broadcast_to(basis.vals[None], (ne,) + basis.vals.shape)
    gr2, gt2 = basis.grad[..., 0], basis.grad[..., 1]
    coef = wd * rB * pvals
    conn = _p2_nodes(mesh)[0]
    n = int(conn.max()) + 1
    gu = -np.einsum("cq,cqi->ci", coef, rB[..., None] * gr2
                    + 2 * (B + B2)[..., None] * v2)
    gv = -np.einsum("cq,cqi->ci", coef, B[..., None] * gt2
                    - 2 * B1[..., None] * v2)
    return scatter_vector(gu, conn, n), scatter_vector(gv, conn, n)


def stokes_rhs(mesh, sigma, params, dm_uv, dm_w,
               quad_degree: int = DEFAULT_QUAD_DEGREE):
    """Load vectors (sigma_1, z), (sigma_2, z) and the axial extra (sigma_3, z).

    The p* part of the axial load lives inside AxialSystem; sigma components
    come from the previous transport solve (zero fields on a cold start).
    """
    s1, s2, s3 = sigma
    if any(s.dofmap.space != "p1disc" for s in (s1, s2, s3)):
        raise ValueError("sigma fields must be P1-discontinuous")
    rule = reference_quadrature(quad_degree)
    basis1d = ElementBasis(mesh, P1, rule.points)
    conn_s = s1.dofmap.element_nodes
    vals = [evaluate(basis1d, conn_s, s.values) for s in (s1, s2, s3)]
    fu = assemble_load(mesh, dm_uv, vals[0], quad_degree)
    fv = assemble_load(mesh, dm_uv, vals[1], quad_degree)
    fw = assemble_load(mesh, dm_w, vals[2], quad_degree)
    return fu, fv, fw
