"""Upwind DG transport tests.

The advecting fields here are artificial test data (interpolated directly
into nodal values, ignoring boundary conditions) unless stated otherwise;
the radial-advection study uses a 1-D ODE solution as its oracle.
"""
from collections import namedtuple

import numpy as np
import pytest
import scipy.sparse as sp

from curvedpipe.calculus import ElementBasis, evaluate
from curvedpipe.geometry import (
    AXIS_COLLAPSE,
    P1,
    P1DISC,
    P2,
    TAG_AXIS,
    TAG_WALL,
    DiscreteField,
    FlowParams,
    build_dof_map,
    build_mesh,
    metric,
    reference_quadrature,
)
from curvedpipe.stokes import assemble_load
from curvedpipe.transport import (
    TransportMatrix,
    _assemble_transport_ibp,
    assemble_G,
    assemble_transport,
    classify_edges,
    solve_transport,
)

State = namedtuple("State", "u v w p sigma")


def plain_field(mesh, fn=None):
    dm = build_dof_map(mesh, P2)
    vals = np.zeros(dm.n_nodes) if fn is None else fn(dm.node_coords[:, 0],
                                                      dm.node_coords[:, 1])
    return DiscreteField(dm, vals)


@pytest.fixture(scope="module")
def mesh8():
    return build_mesh(8, 24)


@pytest.fixture(scope="module")
def swirl(mesh8):
    # divergence-free at delta=0: (u, v) = (0, r(1-r)), exactly P2
    u = plain_field(mesh8)
    v = plain_field(mesh8, lambda r, t: r * (1 - r))
    return u, v


# ------------------------------------------------------------ classification

class TestClassifyEdges:
    def test_alpha_zero_no_inflow(self, mesh8):
        u = plain_field(mesh8, lambda r, t: np.ones_like(r))
        v = plain_field(mesh8)
        ed = classify_edges(mesh8, u, v, alpha=0.0, delta=0.0)
        assert not ed.inflow.any()
        assert np.abs(ed.phi).max() == 0.0

    def test_unit_radial_field_flux(self, mesh8):
        # interior edge at r=0.5 with normal (-1, 0): phi = 0.5*1*(-1) = -0.5
        u = plain_field(mesh8, lambda r, t: np.ones_like(r))
        v = plain_field(mesh8)
        ed = classify_edges(mesh8, u, v, alpha=1.0, delta=0.0)
        hit = 0
        for e in range(mesh8.n_edges):
            if mesh8.edge_cells[e, 1] == -1:
                continue
            for s in range(2):
                c = mesh8.edge_cells[e, s]
                la, lb = mesh8.edge_endpoint_local[e, s]
                on_half = (abs(mesh8.cell_coords[c, la, 0] - 0.5) < 1e-14
                           and abs(mesh8.cell_coords[c, lb, 0] - 0.5) < 1e-14)
                if on_half and abs(mesh8.edge_normals[e, s, 0] + 1.0) < 1e-14:
                    assert ed.phi[e, s] == pytest.approx([-0.5] * 3, abs=1e-14)
                    assert ed.inflow[e, s].all()
                    hit += 1
        assert hit == 24

    def test_axis_edges_carry_exact_zero(self, mesh8):
        u = plain_field(mesh8, lambda r, t: np.ones_like(r))
        v = plain_field(mesh8, lambda r, t: np.cos(t))
        ed = classify_edges(mesh8, u, v, alpha=1.0, delta=0.3)
        ax = mesh8.edge_tag == TAG_AXIS
        assert np.abs(ed.phi[ax]).max() == 0.0
        assert not ed.inflow[ax].any()

    def test_wall_edges_zero_for_dirichlet_fields(self, mesh8, swirl):
        u, v = swirl
        ed = classify_edges(mesh8, u, v, alpha=0.7, delta=0.2)
        wall = mesh8.edge_tag == TAG_WALL
        assert np.abs(ed.phi[wall]).max() == 0.0

    def test_interior_sides_opposite(self, mesh8, swirl):
        u, v = swirl
        ed = classify_edges(mesh8, u, v, alpha=0.7, delta=0.2)
        interior = mesh8.edge_cells[:, 1] != -1
        assert np.array_equal(ed.phi[interior, 1], -ed.phi[interior, 0])

    def test_negating_alpha_flips_upwind(self, mesh8, swirl):
        u, v = swirl
        ed = classify_edges(mesh8, u, v, alpha=0.7, delta=0.2)
        edm = classify_edges(mesh8, u, v, alpha=-0.7, delta=0.2)
        valid = (mesh8.edge_cells != -1)[:, :, None]
        nz = (np.abs(ed.phi) > 1e-14) & valid
        assert nz.any()
        assert np.array_equal(ed.inflow[nz], ~edm.inflow[nz])


# ----------------------------------------------------------------- operator

class TestTransportMatrix:
    def test_alpha_zero_weighted_block_mass(self, mesh8, swirl):
        u, v = swirl
        tm = assemble_transport(mesh8, u, v, alpha=0.0, delta=0.2)
        M = tm.matrix.toarray()
        ne = mesh8.n_cells
        eigs = []
        for c in range(ne):
            blk = M[3 * c:3 * c + 3, 3 * c:3 * c + 3].copy()
            eigs.append(np.linalg.eigvalsh(0.5 * (blk + blk.T)))
            M[3 * c:3 * c + 3, 3 * c:3 * c + 3] = 0.0
        eigs = np.concatenate(eigs)
        assert np.abs(M).max() == 0.0          # block diagonal
        assert eigs.min() > 0.0                # SPD
        assert eigs.max() / eigs.min() < 1e3   # mild conditioning

    def test_bh_positive_semidefinite(self, mesh8, swirl):
        u, v = swirl
        ed = classify_edges(mesh8, u, v, 0.7, 0.0)
        bh = (assemble_transport(mesh8, u, v, 0.7, 0.0, ed).matrix
              - assemble_transport(mesh8, u, v, 0.0, 0.0).matrix).toarray()
        lam = np.linalg.eigvalsh(0.5 * (bh + bh.T))
        assert lam.min() >= -1e-12

    def test_two_forms_agree(self, mesh8, swirl):
        u, v = swirl
        ed = classify_edges(mesh8, u, v, 0.7, 0.0)
        m1 = assemble_transport(mesh8, u, v, 0.7, 0.0, ed).matrix
        m2 = _assemble_transport_ibp(mesh8, u, v, 0.7, 0.0, ed)
        scale = np.abs(m1.data).max()
        assert np.abs((m1 - m2).toarray()).max() <= 1e-10 * scale

    def test_locality(self, mesh8, swirl):
        u, v = swirl
        tm = assemble_transport(mesh8, u, v, 0.7, 0.2)
        adj = {c: {c} for c in range(mesh8.n_cells)}
        for e in range(mesh8.n_edges):
            c0, c1 = mesh8.edge_cells[e]
            if c1 != -1:
                adj[c0].add(int(c1))
                adj[int(c1)].add(int(c0))
        M = tm.matrix.tocsr()
        for c in range(mesh8.n_cells):
            for row in range(3 * c, 3 * c + 3):
                cols = M.indices[M.indptr[row]:M.indptr[row + 1]]
                assert set(cols // 3) <= adj[c]

    def test_round_trip(self, mesh8, swirl):
        u, v = swirl
        tm = assemble_transport(mesh8, u, v, 0.7, 0.2)
        rng = np.random.default_rng(7)
        sstar = rng.normal(size=3 * mesh8.n_cells)
        back, = solve_transport(tm, [tm.matrix @ sstar])
        assert np.abs(back.values - sstar).max() <= 1e-10

    def test_alpha_zero_solve_is_elementwise_projection(self, mesh8, swirl):
        u, v = swirl
        tm = assemble_transport(mesh8, u, v, 0.0, 0.2)
        rng = np.random.default_rng(3)
        rhs = rng.normal(size=3 * mesh8.n_cells)
        sol, = solve_transport(tm, [rhs])
        M = tm.matrix
        for c in (0, 5, 100):
            blk = M[3 * c:3 * c + 3, 3 * c:3 * c + 3].toarray()
            local = np.linalg.solve(blk, rhs[3 * c:3 * c + 3])
            assert np.allclose(sol.values[3 * c:3 * c + 3], local, atol=1e-12)

    def test_singular_matrix_reports_advection_scale(self, mesh8):
        dm = build_dof_map(mesh8, P1DISC)
        bad = TransportMatrix(matrix=sp.csr_matrix((dm.n_nodes, dm.n_nodes)),
                              dofmap=dm, advection_scale=1.25)
        with pytest.raises(RuntimeError, match="advection scale"):
            solve_transport(bad, [np.zeros(dm.n_nodes)])


# ------------------------------------------------------- radial advection MMS

class TestRadialAdvection:
    ALPHA = 0.5

    @staticmethod
    def exact(r):
        return np.cos(2 * r) + r ** 3

    @staticmethod
    def exact_d(r):
        return -2 * np.sin(2 * r) + 3 * r ** 2

    def solve_on(self, nr, nt):
        # sigma + alpha U sigma' = g at delta=0, advected by U(r) = 1 + r^2/2
        # (positive, so the wall is pure outflow); the scheme's half-divergence
        # term is accounted for in the load since this U is not solenoidal
        mesh = build_mesh(nr, nt)
        U = lambda r: 1.0 + 0.5 * r ** 2
        uf = plain_field(mesh, lambda r, t: U(r))
        vf = plain_field(mesh)
        tm = assemble_transport(mesh, uf, vf, self.ALPHA, 0.0)
        rule = reference_quadrature(6)
        basis1 = ElementBasis(mesh, P1, rule.points)
        rr = basis1.points[..., 0]
        gg = self.exact(rr) + self.ALPHA * U(rr) * self.exact_d(rr)
        load_vals = rr * gg + 0.5 * self.ALPHA * (U(rr) + rr * rr) * self.exact(rr)
        dm_s = build_dof_map(mesh, P1DISC)
        sol, = solve_transport(tm, [assemble_load(mesh, dm_s, load_vals)])
        vals = evaluate(basis1, dm_s.element_nodes, sol.values)
        wd = rule.weights[None, :] * basis1.det[:, None]
        return float(np.sqrt(np.einsum("cq,cq->", wd, (vals - self.exact(rr)) ** 2)))

    def test_converges_to_ode_solution(self):
        errs = np.array([self.solve_on(8, 24), self.solve_on(16, 48),
                         self.solve_on(32, 96)])
        rates = np.log2(errs[:-1] / errs[1:])
        assert rates.min() >= 1.4


# ------------------------------------------------------------------ G loads

class TestAssembleG:
    def make_state(self, mesh, w_vals=None, sigma_vals=None):
        dm2 = build_dof_map(mesh, P2)
        dm_p = build_dof_map(mesh, P1, AXIS_COLLAPSE)
        dm_s = build_dof_map(mesh, P1DISC)
        z = np.zeros(dm2.n_nodes)
        sigma = []
        for k in range(3):
            f = DiscreteField.zeros(dm_s)
            if sigma_vals is not None:
                f.values[:] = sigma_vals[k]
            sigma.append(f)
        return State(DiscreteField(dm2, z.copy()), DiscreteField(dm2, z.copy()),
                     DiscreteField(dm2, w_vals if w_vals is not None else z.copy()),
                     DiscreteField(dm_p, np.zeros(dm_p.n_nodes)), tuple(sigma))

    def test_zero_state_zero_loads(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        G = assemble_G(mesh8, self.make_state(mesh8), params)
        assert all(not g.any() for g in G)

    def test_creeping_newtonian_vanishes_exactly(self, mesh8):
        dm2 = build_dof_map(mesh8, P2)
        w = 1.0 - dm2.node_coords[:, 0] ** 2
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        G = assemble_G(mesh8, self.make_state(mesh8, w_vals=w), params)
        assert all(not g.any() for g in G)

    def test_centrifugal_matches_analytic_force(self, mesh8):
        # alpha=0, Re>0, w=1-r^2: only -Re div(u x u) survives, whose frame
        # components (Re w^2 delta cos/B, -Re w^2 delta sin/B, 0) are pinned
        # against the Cartesian oracle in the calculus tests
        dm2 = build_dof_map(mesh8, P2)
        w = 1.0 - dm2.node_coords[:, 0] ** 2
        params = FlowParams(delta=0.2, reynolds=3.0, alpha=0.0)
        G = assemble_G(mesh8, self.make_state(mesh8, w_vals=w), params)
        rule = reference_quadrature(6)
        basis = ElementBasis(mesh8, P2, rule.points)
        rr, tt = basis.points[..., 0], basis.points[..., 1]
        B, _, _ = metric(rr, tt, params.delta)
        dm_s = build_dof_map(mesh8, P1DISC)
        w2 = (1 - rr ** 2) ** 2
        ref1 = assemble_load(mesh8, dm_s, (rr * B) ** 3 * 3.0 * w2 * 0.2 * np.cos(tt) / B)
        ref2 = assemble_load(mesh8, dm_s, -(rr * B) ** 3 * 3.0 * w2 * 0.2 * np.sin(tt) / B)
        assert np.abs(G[0] - ref1).max() <= 1e-12
        assert np.abs(G[1] - ref2).max() <= 1e-12
        assert np.abs(G[2]).max() == 0.0

    def test_sigma_coupling_terms(self, mesh8):
        # with F=0 fields (zero velocity) and alpha nonzero the loads reduce
        # to the explicit sigma couplings; zero velocity kills all of them
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.3)
        state = self.make_state(mesh8, sigma_vals=(1.0, 2.0, -1.0))
        G = assemble_G(mesh8, state, params)
        assert all(not g.any() for g in G)

    def test_sigma_coupling_with_axial_motion(self, mesh8):
        # w nonzero couples sigma_3 into G1/G2 through B2, B1 weights;
        # differencing against the sigma=0 state removes the stress
        # divergence, which does not depend on sigma
        dm2 = build_dof_map(mesh8, P2)
        w = 1.0 - dm2.node_coords[:, 0] ** 2
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.3)
        G = assemble_G(mesh8, self.make_state(mesh8, w_vals=w,
                                              sigma_vals=(1.0, 2.0, 1.0)), params)
        G0 = assemble_G(mesh8, self.make_state(mesh8, w_vals=w), params)
        rule = reference_quadrature(6)
        basis = ElementBasis(mesh8, P2, rule.points)
        rr, tt = basis.points[..., 0], basis.points[..., 1]
        B, B1, B2 = metric(rr, tt, params.delta)
        dm_s = build_dof_map(mesh8, P1DISC)
        wq = 1 - rr ** 2
        ref1 = assemble_load(mesh8, dm_s, 0.3 * B2 * wq)
        ref2 = assemble_load(mesh8, dm_s, -0.3 * B1 * wq)
        ref3 = assemble_load(mesh8, dm_s, 0.3 * (2 * B1 - B2) * wq)
        assert np.allclose(G[0] - G0[0], ref1, atol=1e-13)
        assert np.allclose(G[1] - G0[1], ref2, atol=1e-13)
        assert np.allclose(G[2] - G0[2], ref3, atol=1e-13)
