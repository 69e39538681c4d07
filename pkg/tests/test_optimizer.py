import numpy as np
import pytest
from oracles import (
    cost_by_integration,
    expm_oracle,
    propagate_switched,
    riccati_factor_by_integration,
)

from modesched._integrate import METER
from modesched.model import (
    ModeSchedule,
    RealControl,
    SwitchingControl,
    schedule_from_control,
    uniform_grid,
)
from modesched.optimizer import (
    MultCounter,
    SiomsParams,
    backtrack,
    cost_of_schedule,
    eval_costate_factor,
    eval_state,
    insertion_gradient,
    optimality_measure,
    precompute_switch_points,
    project,
    solve,
    _make_quad_cache,
    schedule_cost,
)

QSM = np.diag([1.0, 0.1])


def q_fn(_t):
    return QSM


class TestPrecomputeSwitchPoints:
    def test_single_segment_counts_nothing(self, spring_tables):
        counter = MultCounter()
        sp = precompute_switch_points(spring_tables, ModeSchedule((2,), (), 0.0, 2.0),
                                      np.array([1.0, 0.0]), np.zeros((2, 2)), counter)
        assert counter.count == 0
        assert np.array_equal(sp.states[0], [1.0, 0.0])

    @pytest.mark.parametrize("M", [2, 3, 5])
    def test_counts_4_M_minus_1(self, spring_tables, M):
        taus = tuple(np.linspace(0.3, 1.7, M - 1))
        sigma = tuple(2 - (i % 2) for i in range(M))
        counter = MultCounter()
        precompute_switch_points(spring_tables, ModeSchedule(sigma, taus, 0.0, 2.0),
                                 np.array([1.0, 0.0]), np.zeros((2, 2)), counter)
        assert counter.count == 4 * (M - 1)

    def test_switch_state_matches_plant_oracle(self, spring, spring_tables):
        system, _, _ = spring
        sched = ModeSchedule((2, 1), (1.0,), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, np.zeros((2, 2)))
        want = propagate_switched(system, ModeSchedule((2,), (), 0.0, 1.0), system.x0)
        assert np.max(np.abs(sp.states[1] - want)) <= 1e-7

    def test_terminal_P_is_P1(self, spring_tables, toy_cost):
        sched = ModeSchedule((1, 2), (0.8,), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, np.array([1.0, 0.0]),
                                      toy_cost.P1)
        assert np.array_equal(sp.P[-1], toy_cost.P1)


class TestEvalState:
    def test_boundary_returns_x0_exactly(self, spring_tables):
        sched = ModeSchedule((2, 1), (0.7,), 0.0, 2.0)
        x0 = np.array([1.0, 0.0])
        got = eval_state(spring_tables, sched, 0.0, x0=x0, P1=np.zeros((2, 2)))
        assert np.array_equal(got, x0)

    def test_single_mode_matches_expm(self, spring_tables):
        x0 = np.array([1.0, 0.0])
        sched = ModeSchedule((1,), (), 0.0, 2.0)
        t = 1.234
        want = expm_oracle([[0, 1], [-30, -2]], t) @ x0
        got = eval_state(spring_tables, sched, t, x0=x0, P1=np.zeros((2, 2)))
        assert np.max(np.abs(got - want)) <= 1e-7

    def test_switched_matches_plant_oracle(self, spring, spring_tables):
        system, _, _ = spring
        sched = ModeSchedule((2, 1), (0.7,), 0.0, 2.0)
        got = eval_state(spring_tables, sched, 1.5, x0=system.x0, P1=np.zeros((2, 2)))
        want = propagate_switched(system, sched.restrict(0.0, 1.5), system.x0)
        assert np.max(np.abs(got - want)) <= 1e-6

    def test_counts_two_per_point(self, spring_tables):
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        counter = MultCounter()
        eval_state(spring_tables, sched, np.linspace(0, 2, 11),
                   x0=np.array([1.0, 0.0]), P1=np.zeros((2, 2)), counter=counter)
        assert counter.count == 22


class TestEvalCostateFactor:
    def test_terminal_value_exact(self, spring_tables, toy_cost):
        sched = ModeSchedule((1, 2), (0.9,), 0.0, 2.0)
        got = eval_costate_factor(spring_tables, sched, 2.0,
                                  x0=np.array([1.0, 0.0]), P1=toy_cost.P1)
        assert np.array_equal(got, toy_cost.P1)

    def test_symmetric_at_random_times(self, spring_tables):
        sched = ModeSchedule((2, 1, 2), (0.5, 1.2), 0.0, 2.0)
        rng = np.random.default_rng(5)
        ts = rng.uniform(0, 2, 20)
        P = eval_costate_factor(spring_tables, sched, ts,
                                x0=np.array([1.0, 0.0]), P1=np.zeros((2, 2)))
        assert np.max(np.abs(P - np.swapaxes(P, -1, -2))) <= 1e-8

    def test_single_mode_matches_backward_integration(self, spring, spring_tables):
        system, _, _ = spring
        sched = ModeSchedule((1,), (), 0.0, 2.0)
        t = 0.6
        got = eval_costate_factor(spring_tables, sched, t,
                                  x0=np.array([1.0, 0.0]), P1=np.zeros((2, 2)))
        want = riccati_factor_by_integration(system, sched, q_fn, np.zeros((2, 2)), t)
        assert np.max(np.abs(got - want)) <= 1e-6

    def test_switched_matches_backward_integration(self, spring, spring_tables):
        system, _, _ = spring
        sched = ModeSchedule((2, 1), (1.1,), 0.0, 2.0)
        t = 0.4
        got = eval_costate_factor(spring_tables, sched, t,
                                  x0=np.array([1.0, 0.0]), P1=np.zeros((2, 2)))
        want = riccati_factor_by_integration(system, sched, q_fn, np.zeros((2, 2)), t)
        assert np.max(np.abs(got - want)) <= 1e-6


class TestInsertionGradient:
    def test_active_mode_entry_is_zero(self, spring, spring_tables):
        system, _, _ = spring
        rng = np.random.default_rng(11)
        for _ in range(100):
            m = int(rng.integers(1, 5))
            taus = np.sort(rng.uniform(0.1, 1.9, m - 1))
            sigma = [int(rng.integers(1, 3))]
            while len(sigma) < m:
                cand = int(rng.integers(1, 3))
                if cand != sigma[-1]:
                    sigma.append(cand)
            taus = taus[: len(sigma) - 1]
            sched = ModeSchedule(tuple(sigma), tuple(taus), 0.0, 2.0)
            sp = precompute_switch_points(spring_tables, sched, system.x0, np.zeros((2, 2)))
            for t in rng.uniform(0, 2, 10):
                d = insertion_gradient(spring_tables, system, sp, float(t))
                active = sched.mode_at(float(t))
                assert d[active - 1] == 0.0

    def test_matches_finite_difference_at_u0(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, cost.P1)
        t = 0.3
        lam = 1e-4
        d = insertion_gradient(spring_tables, system, sp, t)
        j_base = cost_by_integration(system, sched, system.x0, q_fn, cost.P1)
        pert = ModeSchedule((2, 1, 2), (t, t + lam), 0.0, 2.0)
        j_pert = cost_by_integration(system, pert, system.x0, q_fn, cost.P1)
        fd = (j_pert - j_base) / lam
        assert d[0] == pytest.approx(fd, rel=0.02)

    def test_first_order_convergence(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2, 1), (0.9,), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, cost.P1)
        t = 1.4
        d = insertion_gradient(spring_tables, system, sp, t)[1]  # insert mode 2
        j_base = cost_by_integration(system, sched, system.x0, q_fn, cost.P1)
        errs = []
        for lam in (1e-3, 1e-4):
            pert = ModeSchedule((2, 1, 2, 1), (0.9, t, t + lam), 0.0, 2.0)
            fd = (cost_by_integration(system, pert, system.x0, q_fn, cost.P1) - j_base) / lam
            errs.append(abs(d - fd))
        assert errs[1] <= errs[0] / 5  # error shrinks linearly with lambda

    def test_descent_direction_exists_at_u0(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, cost.P1)
        d = insertion_gradient(spring_tables, system, sp, np.linspace(0, 2, 500))
        assert np.min(d[:, 0]) < 0

    def test_counts_nine_per_point(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, cost.P1)
        counter = MultCounter()
        insertion_gradient(spring_tables, system, sp, np.linspace(0, 2, 7), counter)
        assert counter.count == 63


class TestProjection:
    def test_argmax(self):
        grid = np.array([0.0, 1.0])
        u = project(RealControl(grid=grid, values=[[0.2, 0.7], [0.9, 0.3]]))
        assert list(u.active) == [2, 1]

    def test_idempotent_on_feasible(self):
        grid = uniform_grid(0.0, 1.0, 0.25)
        u = SwitchingControl.constant(grid, 2, 3)
        again = project(RealControl(grid=grid, values=u.values))
        assert np.array_equal(again.active, u.active)
        assert np.array_equal(project(RealControl(grid=grid, values=again.values)).active,
                              again.active)

    def test_tie_breaks_to_lowest_index(self):
        grid = np.array([0.0, 1.0])
        u = project(RealControl(grid=grid, values=[[0.5, 0.5], [0.1, 0.1]]))
        assert list(u.active) == [1, 1]


class TestCost:
    def test_zero_cost_is_zero(self, spring, spring_tables):
        system, _, _ = spring
        from modesched.model import QuadraticCost

        zero = QuadraticCost.from_entries(Q=[["0", "0"], ["0", "0"]],
                                          P1=np.zeros((2, 2)), t0=0.0, tM=2.0)
        tabs_zero = __import__("modesched.transition", fromlist=["build_tables"]).build_tables(
            system, zero, 0.0, 2.0, spacing=5e-3)
        J = cost_of_schedule(tabs_zero, ModeSchedule((2,), (), 0.0, 2.0), zero, system.x0)
        assert J == 0.0

    def test_spring_initial_cost(self, spring, spring_tables):
        system, cost, _ = spring
        J0 = cost_of_schedule(spring_tables, ModeSchedule((2,), (), 0.0, 2.0),
                              cost, system.x0)
        assert J0 == pytest.approx(0.98, abs=0.02)

    def test_matches_fine_quadrature_oracle(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((1,), (), 0.0, 2.0)
        J = cost_of_schedule(spring_tables, sched, cost, system.x0)
        want = cost_by_integration(system, sched, system.x0, q_fn, cost.P1)
        assert J == pytest.approx(want, rel=1e-6)


class TestOptimalityMeasure:
    def test_zero_state_gives_zero(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, np.zeros(2), cost.P1)
        times = np.linspace(0, 2, 50)
        d = insertion_gradient(spring_tables, system, sp, times)
        theta, _, _, _ = optimality_measure(d, times)
        assert theta == 0.0

    def test_negative_at_initial_control(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, cost.P1)
        times = np.linspace(0, 2, 200)
        d = insertion_gradient(spring_tables, system, sp, times)
        theta, i0, t0, _ = optimality_measure(d, times)
        assert theta < 0
        assert i0 == 1  # only the inactive mode can be negative
        # dense-sampling oracle: the grid minimum tracks the true minimum
        dense = insertion_gradient(spring_tables, system, sp, np.linspace(0, 2, 5000))
        assert np.min(dense) <= theta <= np.min(dense) * 0.99

    def test_refinement_never_worsens(self, spring, spring_tables):
        system, cost, _ = spring
        sched = ModeSchedule((2,), (), 0.0, 2.0)
        sp = precompute_switch_points(spring_tables, sched, system.x0, cost.P1)
        times = np.linspace(0, 2, 50)
        d = insertion_gradient(spring_tables, system, sp, times)
        theta_plain, _, _, _ = optimality_measure(d, times)
        theta_ref, _, _, extra = optimality_measure(
            d, times, spring_tables, system, sp, refine_steps=16)
        assert theta_ref <= theta_plain
        assert extra == 18


class TestBacktrack:
    def _setup(self, spring, spring_tables):
        system, cost, _ = spring
        grid = uniform_grid(0.0, 2.0, 1e-3)
        u = SwitchingControl.constant(grid, 2, 2)
        sched = schedule_from_control(u)
        quad = _make_quad_cache(cost, 0.0, 2.0, 1001)
        sp = precompute_switch_points(spring_tables, sched, system.x0, quad.P1)
        J = schedule_cost(spring_tables, sp, quad)
        lam_times = np.linspace(0, 2, 200)
        d = insertion_gradient(spring_tables, system, sp, lam_times)
        theta = float(np.min(d))
        d_ctrl = np.empty((grid.size, 2))
        for i in range(2):
            d_ctrl[:, i] = np.interp(grid, lam_times, d[:, i])
        return system, cost, u, quad, sp, J, d_ctrl, theta

    def test_accepts_descent_step(self, spring, spring_tables):
        system, cost, u, quad, sp, J, d_ctrl, theta = self._setup(spring, spring_tables)
        res = backtrack(spring_tables, u, d_ctrl, theta, J, quad, system.x0,
                        SiomsParams(), min(10 / abs(theta), 100.0))
        assert res.accepted
        assert res.cost < J

    def test_gamma_ladder_is_monotone(self, spring, spring_tables):
        params = SiomsParams()
        gammas = [2.5 * params.beta ** m for m in range(6)]
        assert all(a > b for a, b in zip(gammas, gammas[1:]))

    def test_zero_slope_degenerates_to_simple_decrease(self, spring, spring_tables):
        system, cost, u, quad, sp, J, d_ctrl, theta = self._setup(spring, spring_tables)
        res = backtrack(spring_tables, u, d_ctrl, theta, J, quad, system.x0,
                        SiomsParams(c_armijo=0.0), min(10 / abs(theta), 100.0))
        assert res.accepted
        assert res.cost <= J

    def test_failure_signal_when_no_step_exists(self, spring, spring_tables):
        system, cost, u, quad, sp, J, d_ctrl, theta = self._setup(spring, spring_tables)
        # a gamma ladder entirely below the insertion threshold cannot change
        # the control, so backtracking must report failure
        res = backtrack(spring_tables, u, d_ctrl, theta, J, quad, system.x0,
                        SiomsParams(m_max=3), gamma0=1e-6)
        assert not res.accepted

    def test_requires_negative_theta(self, spring, spring_tables):
        system, cost, u, quad, sp, J, d_ctrl, theta = self._setup(spring, spring_tables)
        with pytest.raises(ValueError):
            backtrack(spring_tables, u, d_ctrl, 0.0, J, quad, system.x0,
                      SiomsParams(), 1.0)


class TestSolve:
    def test_spring_mass_bands(self, spring, spring_tables, spring_u0):
        system, cost, _ = spring
        report = solve(system, cost, spring_u0, SiomsParams(max_iter=30),
                       tables=spring_tables)
        assert report.iterations[0].J == pytest.approx(0.98, abs=0.02)
        j10 = report.iterations[10].J if len(report.iterations) > 10 else report.final_cost
        assert j10 <= 0.5
        assert 0.33 <= report.final_cost <= 0.45

    def test_zero_integration_during_iterations(self, spring, spring_tables, spring_u0):
        system, cost, _ = spring
        before = METER.snapshot()
        report = solve(system, cost, spring_u0, SiomsParams(max_iter=5),
                       tables=spring_tables)
        assert report.integration_calls_iterative == 0
        assert report.integration_steps_iterative == 0
        assert METER.snapshot() == before

    def test_cost_non_increasing(self, spring, spring_tables, spring_u0):
        system, cost, _ = spring
        report = solve(system, cost, spring_u0, SiomsParams(max_iter=30),
                       tables=spring_tables)
        js = [r.J for r in report.iterations]
        assert all(a >= b - 1e-12 for a, b in zip(js, js[1:]))

    def test_mult_count_identity(self, spring, spring_tables, spring_u0):
        system, cost, _ = spring
        report = solve(system, cost, spring_u0,
                       SiomsParams(max_iter=6, refine_steps=0), tables=spring_tables)
        for r in report.iterations:
            assert r.mults == 4 * (r.M - 1) + 9 * r.lambda_used
            assert r.lambda_used == 200

    def test_zero_state_terminates_immediately(self, spring, spring_tables, spring_u0):
        system, cost, _ = spring
        report = solve(system, cost, spring_u0, SiomsParams(max_iter=10),
                       tables=spring_tables, x0=np.zeros(2))
        assert report.accepted_steps == 0
        assert report.final_theta == 0.0
        assert report.termination == "theta_tol"
        assert np.array_equal(report.final_control.active, spring_u0.active)

    def test_eval_invariant_to_table_resolution(self, spring, spring_u0):
        from modesched.transition import build_tables

        system, cost, _ = spring
        sched = ModeSchedule((2, 1, 2), (0.61, 1.37), 0.0, 2.0)
        ts = np.linspace(0, 2, 41)
        got = {}
        for cells in (100, 1600, 20000):
            tabs = build_tables(system, cost, 0.0, 2.0, spacing=2.0 / cells)
            got[cells] = eval_state(tabs, sched, ts, x0=system.x0, P1=cost.P1)
        assert np.max(np.abs(got[100] - got[20000])) <= 1e-4
        assert np.max(np.abs(got[1600] - got[20000])) <= 1e-7
