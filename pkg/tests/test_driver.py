"""Fixed-point driver, continuation marching and residual diagnostics."""
import numpy as np
import pytest
import scipy.sparse as sp

from curvedpipe.driver import (
    ContinuationSchedule,
    Workspace,
    continuation_solve,
    divergence_residual,
    equivalence_residual,
    fixed_point,
    solve_sparse,
)
from curvedpipe.geometry import (
    AXIS_COLLAPSE,
    P1,
    P1DISC,
    P2,
    DiscreteField,
    FlowParams,
    build_dof_map,
    build_mesh,
)
from curvedpipe.postprocess import recover_stream_function, vortex_census
from curvedpipe.stokes import AxialSystem


@pytest.fixture(scope="module")
def mesh8():
    return build_mesh(8, 24)


@pytest.fixture(scope="module")
def newtonian5(mesh8):
    params = FlowParams(delta=0.2, reynolds=5.0, alpha=0.0)
    ws = Workspace(mesh8, params)
    state, report = fixed_point(mesh8, params, workspace=ws)
    return params, ws, state, report


# ----------------------------------------------------------------- solve_sparse

class TestSolveSparse:
    def test_identity_returns_rhs(self):
        e1 = np.zeros(7)
        e1[0] = 1.0
        x = solve_sparse(sp.eye(7, format="csr"), e1)
        assert np.array_equal(x, e1)

    def test_zero_rhs_gives_zero(self, mesh8):
        dm_w = build_dof_map(mesh8, P2, AXIS_COLLAPSE)
        ax = AxialSystem(mesh8, dm_w, FlowParams(delta=0.2, reynolds=0.0, alpha=0.0))
        x = solve_sparse(ax.matrix, np.zeros(ax.matrix.shape[0]))
        assert np.all(x == 0.0)

    def test_axial_straight_gives_poiseuille(self, mesh8):
        # p* = 4 makes the exact profile w = 1 - r^2, which lies in the
        # parametric P2 space, so the discrete solution is exact
        dm_w = build_dof_map(mesh8, P2, AXIS_COLLAPSE)
        ax = AxialSystem(mesh8, dm_w, FlowParams(delta=0.0, reynolds=0.0, alpha=0.0))
        x = solve_sparse(ax.matrix, dm_w.P.T @ ax.pstar_load)
        w = dm_w.expand(x)
        exact = 1.0 - dm_w.node_coords[:, 0] ** 2
        assert np.max(np.abs(w - exact)) <= 1e-10

    def test_structural_singularity_names_rows(self):
        A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0],
                                    [0.0, 0.0, 0.0],
                                    [0.0, 0.0, 2.0]]))
        with pytest.raises(RuntimeError, match=r"singular system.*rows \[1\]"):
            solve_sparse(A, np.ones(3))

    def test_numerical_singularity_reported(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(RuntimeError, match="singular system"):
            solve_sparse(A, np.array([1.0, 2.0]))


# ------------------------------------------------------------------ fixed_point

class TestFixedPoint:
    def test_trivial_converges_in_one_iteration(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        state, report = fixed_point(mesh8, params)
        assert report.converged
        assert report.iterations == 1
        assert report.reason == "tolerance reached"
        assert np.all(state.u.values == 0.0)
        assert np.all(state.v.values == 0.0)
        assert all(np.all(s.values == 0.0) for s in state.sigma)
        assert state.w.values.max() > 0.9  # near-Poiseuille axial flow

    def test_validation_errors(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        with pytest.raises(ValueError, match="tol"):
            fixed_point(mesh8, params, tol=0.0)
        with pytest.raises(ValueError, match="max_iter"):
            fixed_point(mesh8, params, max_iter=0)

    def test_report_invariants(self, newtonian5):
        _, _, _, report = newtonian5
        assert report.converged
        assert len(report.history) == report.iterations
        assert report.residuals[-1] <= 1e-8
        assert all(np.isfinite(r) for r in report.residuals)

    def test_warm_restart_within_two_iterations(self, mesh8, newtonian5):
        params, ws, state, _ = newtonian5
        _, report = fixed_point(mesh8, params, init=state, workspace=ws)
        assert report.converged
        assert report.iterations <= 2

    def test_non_convergence_reported_not_raised(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=5.0, alpha=0.0)
        state, report = fixed_point(mesh8, params, max_iter=2)
        assert not report.converged
        assert report.iterations == 2
        assert "no convergence within 2 iterations" in report.reason
        assert state is not None

    def test_newtonian_vortex_pair(self, mesh8, newtonian5):
        params, _, state, _ = newtonian5
        psi = recover_stream_function(mesh8, state.u, state.v, params.delta)
        census = vortex_census(mesh8, psi)
        assert (census.positive, census.negative) == (1, 1)
        top = max(census.peaks, key=lambda p: p[0])
        assert 0.0 < top[1][1] < np.pi  # positive vortex in the upper half
        lo, hi = psi.values.min(), psi.values.max()
        assert abs(hi + lo) <= 1e-6 * max(abs(hi), abs(lo))

    def test_deterministic_iterates(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=5.0, alpha=0.1)
        a, _ = fixed_point(mesh8, params)
        b, _ = fixed_point(mesh8, params)
        assert np.array_equal(a.u.values, b.u.values)
        assert np.array_equal(a.v.values, b.v.values)
        assert np.array_equal(a.w.values, b.w.values)
        assert np.array_equal(a.p.values, b.p.values)
        assert all(np.array_equal(x.values, y.values)
                   for x, y in zip(a.sigma, b.sigma))


# ----------------------------------------------------------------- continuation

class TestSchedule:
    def test_trivial_target_is_single_waypoint(self):
        s = ContinuationSchedule.build(0.0, 0.0)
        assert s.waypoints == ((0.0, 0.0),)

    def test_default_steps_land_exactly_on_target(self):
        s = ContinuationSchedule.build(5.0, -0.5)
        assert s.waypoints[0] == (0.0, 0.0)
        assert s.waypoints[-1] == (5.0, -0.5)
        re_leg = [w for w in s.waypoints if w[1] == 0.0]
        al_leg = [w for w in s.waypoints if w[1] != 0.0]
        assert [w[0] for w in re_leg] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        assert all(w[0] == 5.0 for w in al_leg)
        assert np.allclose([w[1] for w in al_leg], -0.05 * np.arange(1, 11))

    def test_hops_change_one_parameter_within_step(self):
        s = ContinuationSchedule.build(3.3, -0.12)
        hops = np.diff(np.array(s.waypoints), axis=0)
        assert np.all(np.sum(hops != 0.0, axis=1) == 1)
        assert np.all(np.abs(hops[:, 0]) <= 1.0 + 1e-12)
        assert np.all(np.abs(hops[:, 1]) <= 0.05 + 1e-12)
        assert s.waypoints[-1] == (3.3, -0.12)

    def test_warm_start_begins_at_supplied_parameters(self):
        s = ContinuationSchedule.build(5.0, -0.5, start=(2.5, -0.1))
        assert s.waypoints[0] == (2.5, -0.1)
        assert s.waypoints[-1] == (5.0, -0.5)
        re_leg = [w for w in s.waypoints if w[0] != 5.0]
        assert all(w[1] == -0.1 for w in re_leg)

    def test_mismatched_schedule_rejected(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=2.0, alpha=0.0)
        bad = ContinuationSchedule.build(1.0, 0.0)
        with pytest.raises(ValueError, match="schedule ends at"):
            continuation_solve(mesh8, params, schedule=bad)


@pytest.fixture(scope="module")
def newtonian_march(mesh8):
    params = FlowParams(delta=0.2, reynolds=5.0, alpha=0.0)
    return continuation_solve(mesh8, params), params


class TestContinuation:
    def test_trivial_target_single_record(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        state, records = continuation_solve(mesh8, params)
        assert len(records) == 1
        assert records[0].converged
        assert records[0].iterations == 1
        assert np.all(state.u.values == 0.0)

    def test_records_cover_all_waypoints(self, newtonian_march):
        (state, records), params = newtonian_march
        visited = [(r.params.reynolds, r.params.alpha) for r in records]
        assert visited == [(float(k), 0.0) for k in range(6)]
        assert all(r.converged for r in records)
        assert records[0].iterations == 1
        assert state.params == params

    def test_extrema_strictly_increase_with_reynolds(self, newtonian_march):
        (_, records), _ = newtonian_march
        peaks = [abs(r.extrema.psi_max) for r in records[1:]]
        assert all(b > a for a, b in zip(peaks, peaks[1:]))

    def test_warm_start_skips_current_parameters(self, mesh8, newtonian5):
        params5, ws, state5, _ = newtonian5
        target = FlowParams(delta=0.2, reynolds=5.0, alpha=0.1)
        state, records = continuation_solve(mesh8, target, init=state5,
                                            workspace=ws)
        visited = [(r.params.reynolds, r.params.alpha) for r in records]
        assert visited == [(5.0, 0.05), (5.0, 0.1)]
        assert all(r.converged for r in records)
        assert state.params == target

    def test_exhausted_halvings_mark_failing_waypoint(self, mesh8):
        # max_iter=2 lets the trivial waypoint pass but no inertial one,
        # so the retry budget drains and partial results come back
        params = FlowParams(delta=0.2, reynolds=2.0, alpha=0.0)
        state, records = continuation_solve(mesh8, params, max_iter=2)
        assert records[0].converged  # (0, 0)
        assert not records[-1].converged
        assert records[-1].params.reynolds == 1.0
        assert records[-1].halvings > 4
        assert records[-1].extrema is not None  # last attempt still probed
        assert len(records) == 2  # march stops at the failure
        assert state.params.reynolds == 0.0  # last good state


# ------------------------------------------------------------------- residuals

class TestDivergenceResidual:
    def test_zero_state(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        state, _ = fixed_point(mesh8, params)
        assert divergence_residual(state) == 0.0

    def test_converged_state_below_gate(self, newtonian5):
        _, _, state, _ = newtonian5
        assert divergence_residual(state) <= 1e-10

    def test_manufactured_nonsolenoidal_positive(self, mesh8):
        from curvedpipe.driver import SolverState

        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        dm = build_dof_map(mesh8, P2)
        dm_w = build_dof_map(mesh8, P2, AXIS_COLLAPSE)
        dm_p = build_dof_map(mesh8, P1, AXIS_COLLAPSE)
        dm_s = build_dof_map(mesh8, P1DISC)
        u = DiscreteField(dm, dm.node_coords[:, 0].copy())  # u = r, pure source
        state = SolverState(mesh8, params, u, DiscreteField.zeros(dm),
                            DiscreteField.zeros(dm_w), DiscreteField.zeros(dm_p),
                            tuple(DiscreteField.zeros(dm_s) for _ in range(3)))
        assert divergence_residual(state) > 1e-3


class TestEquivalenceResidual:
    def test_rest_state_machine_zero(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=0.0, alpha=0.0)
        state, _ = fixed_point(mesh8, params)
        assert equivalence_residual(state) <= 1e-12

    def test_newtonian_matches_stokes_residual(self, newtonian5):
        # alpha = 0 makes pi = p, so this is the plain momentum residual
        # (measured 1.2e-11 here)
        _, _, state, _ = newtonian5
        assert equivalence_residual(state) <= 1e-8

    def test_inertial_viscoelastic_within_calibration(self, mesh8):
        params = FlowParams(delta=0.2, reynolds=5.0, alpha=0.1)
        state, report = fixed_point(mesh8, params)
        assert report.converged
        assert equivalence_residual(state) <= 1e-6
