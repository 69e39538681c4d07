import numpy as np
import pytest
from oracles import damped_oscillator

from modesched.model import ModeSchedule
from modesched.optimizer import eval_state
from modesched.plant import PlantConfig, propagate, trajectory_cost


class TestPropagate:
    def test_zero_state_stays_zero(self, spring):
        system, _, _ = spring
        sched = ModeSchedule((1, 2), (1.0,), 0.0, 2.0)
        _, xs = propagate(PlantConfig(system=system), np.zeros(2), sched, 0.0, 2.0)
        assert np.max(np.abs(xs)) == 0.0

    def test_matches_closed_form_oscillator(self, spring):
        system, _, _ = spring
        sched = ModeSchedule((1,), (), 0.0, 2.0)
        ts, xs = propagate(PlantConfig(system=system), np.array([1.0, 0.0]), sched, 0.0, 2.0)
        q, qdot = damped_oscillator(k=30.0, d=2.0, m=1.0, x0=1.0, v0=0.0, t=ts)
        assert np.max(np.abs(xs[:, 0] - q)) <= 1e-8
        assert np.max(np.abs(xs[:, 1] - qdot)) <= 1e-8

    def test_agrees_with_table_evaluation(self, spring, spring_tables):
        system, cost, _ = spring
        rng = np.random.default_rng(9)
        for _ in range(5):
            taus = tuple(np.sort(rng.uniform(0.2, 1.8, 2)))
            sched = ModeSchedule((2, 1, 2), taus, 0.0, 2.0)
            ts, xs = propagate(PlantConfig(system=system), system.x0, sched, 0.0, 2.0)
            idx = rng.integers(0, ts.size, 7)
            want = eval_state(spring_tables, sched, ts[idx], x0=system.x0, P1=cost.P1)
            assert np.max(np.abs(xs[idx] - want)) <= 1e-6

    def test_step_halving_convergence(self, spring, cart):
        for system, _, sc in (spring, cart):
            sched = ModeSchedule((2, 1), (0.9,), 0.0, 2.0)
            x0 = np.asarray(sc.x0)
            _, xs1 = propagate(PlantConfig(system=system, fine_step=1e-3), x0, sched, 0.0, 2.0)
            _, xs2 = propagate(PlantConfig(system=system, fine_step=5e-4), x0, sched, 0.0, 2.0)
            assert np.max(np.abs(xs1[-1] - xs2[-1])) < 1e-9

    def test_splits_exactly_at_switch_times(self, spring):
        system, _, _ = spring
        tau = 0.777123
        sched = ModeSchedule((1, 2), (tau,), 0.0, 2.0)
        ts, _ = propagate(PlantConfig(system=system), np.array([1.0, 0.0]), sched, 0.0, 2.0)
        assert tau in ts

    def test_rejects_coarse_fine_step(self, spring):
        system, _, _ = spring
        with pytest.raises(ValueError):
            PlantConfig(system=system, fine_step=5e-3)


class TestTrajectoryCost:
    def test_constant_state_quadrature(self, toy_cost):
        times = np.linspace(0.0, 1.5, 2001)
        states = np.tile([1.0, 0.0], (times.size, 1))
        J = trajectory_cost(toy_cost, times, states)
        # integrand is 0.5 * 1 over 1.5 s plus terminal 0.5 * 0.5
        assert J == pytest.approx(0.5 * 1.5 + 0.25, rel=1e-9)


class TestMonteCarlo:
    @pytest.fixture(scope="class")
    def small_result(self, cart):
        from modesched.plant import monte_carlo

        _, _, sc = cart
        return monte_carlo(sc, n_runs=3, seed=123)

    def test_zero_noise_width_is_degenerate(self, cart):
        from modesched.plant import monte_carlo

        _, _, sc = cart
        result = monte_carlo(sc, n_runs=3, seed=5, noise_low=0.0, noise_high=0.0)
        # every run is bit-identical; std is zero up to the mean's rounding
        assert np.all(result.open_costs == result.open_costs[0])
        assert np.all(result.closed_costs == result.closed_costs[0])
        assert result.open_std <= 1e-12
        assert result.closed_std <= 1e-12

    def test_seeded_runs_are_reproducible(self, cart, small_result):
        from modesched.plant import monte_carlo

        _, _, sc = cart
        again = monte_carlo(sc, n_runs=3, seed=123)
        assert np.array_equal(small_result.open_costs, again.open_costs)
        assert np.array_equal(small_result.closed_costs, again.closed_costs)
        assert np.array_equal(small_result.noise, again.noise)

    def test_histogram_covers_all_runs(self, small_result):
        hist = small_result.histogram(bins=20)
        assert len(hist["edges"]) == 21
        assert sum(hist["open"]) == small_result.open_costs.size
        assert sum(hist["closed"]) == small_result.closed_costs.size
