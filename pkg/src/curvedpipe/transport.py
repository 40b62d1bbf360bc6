"""Upwind discontinuous-Galerkin transport of the auxiliary stresses.

Each sigma_i solves (rB sigma, tau) + B_h(alpha u, alpha v, sigma, tau) =
(G_i, tau) over P1-discontinuous test functions, with

    B_h(u, v, s, t) = (rB u s_r + B v s_t, t)_h
                      + 1/2 ((d(rBu)/dr + d(Bv)/dt) s, t)
                      - <s+ - s-, t+>_(u,v)

and the jump bracket collecting inflow-edge integrals of the weighted normal
flux phi = rB u n_r + B v n_t.  Inflow is classified per quadrature point
(an edge may be partially inflow).  Wall edges carry phi = 0 exactly since
u = v = 0 there; axis edges have a purely radial normal and rB = 0, so the
scheme closes without any inflow boundary data.  The three components share
one matrix and one factorization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from curvedpipe.calculus import ElementBasis, evaluate, force_divergence, sample_state, tabulate
from curvedpipe.geometry import (
    EDGE_QP,
    EDGE_QW,
    P1,
    P1DISC,
    P2,
    DiscreteField,
    build_dof_map,
    metric,
)
from curvedpipe.stokes import (
    DEFAULT_QUAD_DEGREE,
    assemble_load,
    geometry_factors,
    reference_quadrature,
    scatter_matrix,
)

_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# ordered (start, end) local-vertex pairs an edge can occupy within a cell
_EDGE_PAIRS = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
_PAIR_CODE = -np.ones((3, 3), dtype=np.int64)
for _k, (_a, _b) in enumerate(_EDGE_PAIRS):
    _PAIR_CODE[_a, _b] = _k


def _edge_tables():
    """Reference basis values at the 3 Gauss points of each oriented edge."""
    p1, p2 = [], []
    for a, b in _EDGE_PAIRS:
        s = EDGE_QP[:, None]
        pts = (1.0 - s) * _REF_VERTS[a] + s * _REF_VERTS[b]
        p1.append(tabulate(P1, pts)[0])
        p2.append(tabulate(P2, pts)[0])
    return np.stack(p1), np.stack(p2)


_TAB_P1, _TAB_P2 = _edge_tables()


@dataclass(frozen=True)
class EdgeFluxData:
    """Weighted normal fluxes of the advecting field (alpha u, alpha v).

    phi[e, side, q] is the flux through edge e with the outward normal of
    that side's cell; interior sides are opposite at matching points.
    Boundary rows have side 1 masked out of `inflow`.
    """

    phi: np.ndarray      # (nE, 2, 3)
    inflow: np.ndarray   # (nE, 2, 3) bool
    lengths: np.ndarray  # (nE,) chart length of the edge
    codes: np.ndarray    # (nE, 2) oriented-pair index per side


def classify_edges(mesh, u: DiscreteField, v: DiscreteField, alpha: float,
                   delta: float) -> EdgeFluxData:
    conn2 = u.dofmap.element_nodes
    epl = mesh.edge_endpoint_local
    codes = _PAIR_CODE[epl[:, :, 0], epl[:, :, 1]]
    c0 = mesh.edge_cells[:, 0]
    a = mesh.cell_coords[c0, epl[:, 0, 0]]
    b = mesh.cell_coords[c0, epl[:, 0, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    s = EDGE_QP[None, :, None]
    pts = a[:, None, :] * (1.0 - s) + b[:, None, :] * s
    rr, tt = pts[..., 0], pts[..., 1]
    B, _, _ = metric(rr, tt, delta)
    vals2 = _TAB_P2[codes[:, 0]]
    uq = np.einsum("eqi,ei->eq", vals2, u.values[conn2[c0]])
    vq = np.einsum("eqi,ei->eq", vals2, v.values[conn2[c0]])
    n = mesh.edge_normals[:, 0, :]
    phi0 = alpha * (rr * B * uq * n[:, 0:1] + B * vq * n[:, 1:2])
    phi = np.stack([phi0, -phi0], axis=1)
    valid = (mesh.edge_cells != -1)[:, :, None]
    return EdgeFluxData(phi=phi, inflow=(phi < 0.0) & valid,
                        lengths=lengths, codes=codes)


@dataclass
class TransportMatrix:
    """Shared operator for the three sigma solves at one velocity iterate."""

    matrix: sp.csr_matrix
    dofmap: object
    advection_scale: float
    _lu: object = field(default=None, repr=False)

    def factor(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix.tocsc())
            except RuntimeError as err:
                raise RuntimeError(
                    "singular transport operator (advection scale alpha*|u| = "
                    f"{self.advection_scale:.3e})") from err
        return self._lu


def _volume_blocks(mesh, u, v, alpha, delta, quad_degree, adjoint=False):
    rule = reference_quadrature(quad_degree)
    basis2 = ElementBasis(mesh, P2, rule.points)
    basis1 = ElementBasis(mesh, P1, rule.points)
    wd = rule.weights[None, :] * basis2.det[:, None]
    _, B, B1, B2, rB = geometry_factors(basis2, delta)
    conn2 = u.dofmap.element_nodes
    uu, du = evaluate(basis2, conn2, u.values, order=1)
    vv, dv = evaluate(basis2, conn2, v.values, order=1)
    adv_r = alpha * rB * uu
    adv_t = alpha * B * vv
    divw = alpha * (rB * du[..., 0] + (B + B2) * uu + B * dv[..., 1] - B1 * vv)
    v1 = basis1.vals
    g1 = basis1.grad
    mass = np.einsum("cq,qi,qj->cij", wd * rB, v1, v1)
    stream = adv_r[..., None] * g1[..., 0] + adv_t[..., None] * g1[..., 1]
    if not adjoint:
        local = (mass + np.einsum("cq,qi,cqj->cij", wd, v1, stream)
                 + np.einsum("cq,qi,qj->cij", 0.5 * wd * divw, v1, v1))
    else:
        local = (mass - np.einsum("cq,cqi,qj->cij", wd, stream, v1)
                 - np.einsum("cq,qi,qj->cij", 0.5 * wd * divw, v1, v1))
    return local, float(abs(alpha) * max(np.abs(uu).max(), np.abs(vv).max()))


def _edge_blocks(mesh, edges: EdgeFluxData, conn_s, n_dofs, adjoint=False):
    interior = np.nonzero(mesh.edge_cells[:, 1] != -1)[0]
    rows, cols, vals = [], [], []

    def add(local, row_cells, col_cells):
        ni = local.shape[1]
        rows.append(np.repeat(conn_s[row_cells], local.shape[2], axis=1).ravel())
        cols.append(np.tile(conn_s[col_cells], (1, ni)).ravel())
        vals.append(local.ravel())

    for side in (0, 1):
        cells_k = mesh.edge_cells[interior, side]
        cells_n = mesh.edge_cells[interior, 1 - side]
        tau_k = _TAB_P1[edges.codes[interior, side]]
        tau_n = _TAB_P1[edges.codes[interior, 1 - side]]
        phis = edges.phi[interior, side]
        w = EDGE_QW[None, :] * edges.lengths[interior, None]
        if not adjoint:
            coeff = np.where(phis < 0.0, -phis, 0.0) * w
            add(np.einsum("eq,eqi,eqj->eij", coeff, tau_k, tau_k), cells_k, cells_k)
            add(-np.einsum("eq,eqi,eqj->eij", coeff, tau_k, tau_n), cells_k, cells_n)
        else:
            # <s-, t+ - t-> with the signed (negative) inflow weight
            coeff = np.where(phis < 0.0, phis, 0.0) * w
            add(np.einsum("eq,eqi,eqj->eij", coeff, tau_k, tau_n), cells_k, cells_n)
            add(-np.einsum("eq,eqi,eqj->eij", coeff, tau_n, tau_n), cells_n, cells_n)
    data = np.concatenate(vals) if vals else np.zeros(0)
    ij = (np.concatenate(rows), np.concatenate(cols)) if rows else (np.zeros(0, int),) * 2
    return sp.csr_matrix((data, ij), shape=(n_dofs, n_dofs))


def assemble_transport(mesh, u: DiscreteField, v: DiscreteField, alpha: float,
                       delta: float, edges: EdgeFluxData | None = None,
                       quad_degree: int = DEFAULT_QUAD_DEGREE) -> TransportMatrix:
    if edges is None:
        edges = classify_edges(mesh, u, v, alpha, delta)
    dm = build_dof_map(mesh, P1DISC)
    local, scale = _volume_blocks(mesh, u, v, alpha, delta, quad_degree)
    mat = scatter_matrix(local, dm.element_nodes, dm.element_nodes,
                         (dm.n_nodes, dm.n_nodes))
    mat = mat + _edge_blocks(mesh, edges, dm.element_nodes, dm.n_nodes)
    return TransportMatrix(matrix=mat.tocsr(), dofmap=dm, advection_scale=scale)


def _assemble_transport_ibp(mesh, u, v, alpha, delta, edges=None,
                            quad_degree=DEFAULT_QUAD_DEGREE) -> sp.csr_matrix:
    """Integrated-by-parts form of the same operator; verification twin of
    assemble_transport, equal to it up to quadrature exactness."""
    if edges is None:
        edges = classify_edges(mesh, u, v, alpha, delta)
    dm = build_dof_map(mesh, P1DISC)
    local, _ = _volume_blocks(mesh, u, v, alpha, delta, quad_degree, adjoint=True)
    mat = scatter_matrix(local, dm.element_nodes, dm.element_nodes,
                         (dm.n_nodes, dm.n_nodes))
    return (mat + _edge_blocks(mesh, edges, dm.element_nodes, dm.n_nodes,
                               adjoint=True)).tocsr()


def assemble_G(mesh, state, params, quad_degree: int = DEFAULT_QUAD_DEGREE):
    """Load vectors (G_i, tau) over the P1-discontinuous test space.

    F comes from the state's (u, v, w, p); the sigma entries are the previous
    iterate's, making the fixed-point coupling fully explicit.
    """
    rule = reference_quadrature(quad_degree)
    basis2 = ElementBasis(mesh, P2, rule.points)
    basis1 = ElementBasis(mesh, P1, rule.points)
    conn2 = state.u.dofmap.element_nodes
    conn1 = state.p.dofmap.element_nodes
    sample = sample_state(basis2, basis1, conn2, conn1,
                          state.u.values, state.v.values,
                          state.w.values, state.p.values)
    F = force_divergence(sample, params)
    _, B, B1, B2, rB = geometry_factors(basis2, params.delta)
    dm_s = state.sigma[0].dofmap
    s1, s2, s3 = (evaluate(basis1, dm_s.element_nodes, f.values)
                  for f in state.sigma)
    al = params.alpha
    uu, vv, ww = sample.u, sample.v, sample.w
    c = 2.0 * ((B + B2) * uu - B1 * vv)
    g1 = rB ** 3 * F[..., 0] + al * (c * s1 + B * vv * s2 + B2 * ww * s3)
    g2 = rB ** 3 * F[..., 1] + al * (c * s2 - B * vv * s1 - B1 * ww * s3)
    g3 = rB ** 3 * F[..., 2] + al * (c * s3 + (B1 * s2 - B2 * s1) * ww)
    return tuple(assemble_load(mesh, dm_s, g, quad_degree) for g in (g1, g2, g3))


def solve_transport(matrix: TransportMatrix, rhs):
    """Back-substitute the three G_i loads against the shared factorization."""
    lu = matrix.factor()
    out = []
    for b in rhs:
        x = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise RuntimeError(
                "singular transport operator (advection scale alpha*|u| = "
                f"{matrix.advection_scale:.3e})")
        out.append(DiscreteField(matrix.dofmap, x))
    return tuple(out)
