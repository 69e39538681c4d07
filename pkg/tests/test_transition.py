import numpy as np
import pytest

from modesched._integrate import METER
from modesched.errors import NumericalError, TableRangeError
from modesched.model import QuadraticCost, SwitchedLinearSystem
from modesched.transition import (
    build_atm,
    build_stm,
    build_tables,
    load_tables,
    save_tables,
    tables_cache_key,
    window_advance,
)

from oracles import expm_oracle, stm_by_integration

A1 = np.array([[0.0, 1.0], [-30.0, -2.0]])
A2 = np.array([[0.0, 1.0], [-70.0, -2.0]])
QSM = np.diag([1.0, 0.1])


class TestBoundaries:
    def test_stm_identity_at_start(self, spring_tables):
        for j in (1, 2):
            assert np.array_equal(spring_tables.stm_at(j, 0.0), np.eye(2))

    def test_atm_zero_at_end(self, spring_tables):
        for j in (1, 2):
            assert np.array_equal(spring_tables.atm_at(j, 2.0), np.zeros((2, 2)))

    def test_out_of_range_query(self, spring_tables):
        with pytest.raises(TableRangeError):
            spring_tables.stm_at(1, 2.5)
        with pytest.raises(TableRangeError):
            spring_tables.stm_between(1, -0.5, 1.0)


class TestStmAccuracy:
    def test_matches_matrix_exponential(self, spring_tables):
        assert np.max(np.abs(spring_tables.stm_at(1, 0.5) - expm_oracle(A1, 0.5))) < 1e-8

    def test_off_grid_interpolation(self, spring_tables):
        t = 0.50037
        assert np.max(np.abs(spring_tables.stm_at(1, t) - expm_oracle(A1, t))) < 1e-8

    def test_inverse_residual_at_samples(self, spring_tables):
        for j in (1, 2):
            seg = spring_tables.stm[j - 1].segments[0]
            res = np.max(np.abs(seg.phi @ seg.phi_inv - np.eye(2)))
            assert res <= 1e-8

    def test_semigroup_residual(self, spring_tables):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(50):
            t1, t2 = rng.uniform(0.0, 2.0, 2)
            lhs = spring_tables.stm_at(2, t1)
            rhs = spring_tables.stm_between(2, t1, t2) @ spring_tables.stm_at(2, t2)
            worst = max(worst, np.max(np.abs(lhs - rhs)))
        assert worst <= 1e-8

    def test_between_self_is_identity(self, spring_tables):
        assert np.max(np.abs(spring_tables.stm_between(1, 0.7, 0.7) - np.eye(2))) <= 1e-9

    def test_between_reverses_as_inverse(self, spring_tables):
        fwd = spring_tables.stm_between(2, 1.1, 0.3)
        bwd = spring_tables.stm_between(2, 0.3, 1.1)
        assert np.max(np.abs(fwd @ bwd - np.eye(2))) <= 1e-7

    def test_between_matches_reintegration(self, spring, spring_tables):
        system, _, _ = spring
        got = spring_tables.stm_between(2, 1.1, 0.3)
        want = stm_by_integration(system, 2, 0.3, 1.1)
        assert np.max(np.abs(got - want)) <= 1e-7

    def test_state_reproduction_property(self, spring, spring_tables):
        # x(t) = phi(t, tau) x(tau) vs direct integration of mode 1
        system, _, _ = spring
        rng = np.random.default_rng(3)
        for _ in range(5):
            tau, t = np.sort(rng.uniform(0.0, 2.0, 2))
            x_tau = rng.standard_normal(2)
            got = spring_tables.stm_between(1, t, tau) @ x_tau
            want = stm_by_integration(system, 1, tau, t) @ x_tau
            assert np.max(np.abs(got - want)) <= 1e-7


class TestAtm:
    def test_zero_running_cost_gives_zero(self, spring):
        system, _, _ = spring
        zero_cost = QuadraticCost.from_entries(
            Q=[["0", "0"], ["0", "0"]], P1=np.zeros((2, 2)), t0=0.0, tM=2.0)
        tabs = build_tables(system, zero_cost, 0.0, 2.0, spacing=5e-3)
        for j in (1, 2):
            assert np.max(np.abs(tabs.atm_samples[j - 1])) == 0.0

    def test_symmetry_of_samples(self, spring_tables):
        for j in (1, 2):
            psi = spring_tables.atm_samples[j - 1]
            assert np.max(np.abs(psi - np.swapaxes(psi, -1, -2))) <= 1e-9

    def test_composition_residual(self, spring_tables):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(50):
            t1, t2, t3 = np.sort(rng.uniform(0.0, 2.0, 3))
            phi21 = spring_tables.stm_between(1, t2, t1)
            lhs = spring_tables.atm_between(1, t1, t3)
            rhs = spring_tables.atm_between(1, t1, t2) + \
                phi21.T @ spring_tables.atm_between(1, t2, t3) @ phi21
            worst = max(worst, np.max(np.abs(lhs - rhs)))
        assert worst <= 1e-8

    def test_riccati_carry_property(self, spring, spring_tables):
        # P(t) = psi(t, tau) + phi(tau, t)' P(tau) phi(tau, t) against naive
        # backward integration over [t, tau] for a single mode
        from oracles import rk4

        system, _, _ = spring
        t, tau = 0.4, 1.3
        P_tau = np.array([[0.8, 0.1], [0.1, 0.3]])

        def back(tt, p):
            P = p.reshape(2, 2)
            A = system.mode_matrix(1, float(tt))
            return (-A.T @ P - P @ A - QSM).reshape(-1)

        want = rk4(back, P_tau.reshape(-1), tau, t, 9000).reshape(2, 2)
        phi = spring_tables.stm_between(1, tau, t)
        got = spring_tables.atm_between(1, t, tau) + phi.T @ P_tau @ phi
        assert np.max(np.abs(got - want)) <= 1e-7


class TestBuilders:
    def test_build_stm_matches_tables(self, spring, spring_tables):
        system, _, _ = spring
        phis = build_stm(system, 0.0, 2.0)
        for j in (1, 2):
            assert np.allclose(phis[j - 1], spring_tables.stm[j - 1].segments[0].phi,
                               atol=1e-12)

    def test_build_atm_matches_tables(self, spring, spring_tables):
        system, cost, _ = spring
        psis = build_atm(system, cost, 0.0, 2.0)
        for j in (1, 2):
            assert np.allclose(psis[j - 1], spring_tables.atm_samples[j - 1], atol=1e-12)


class TestSampleCountIndependence:
    def test_halving_changes_only_interpolation(self, spring):
        system, cost, _ = spring
        t_query = 0.7137
        errs = {}
        for cells in (100, 1000):
            tabs = build_tables(system, cost, 0.0, 2.0, spacing=2.0 / cells)
            errs[cells] = np.max(np.abs(tabs.stm_at(2, t_query) - expm_oracle(A2, t_query)))
        # both resolutions stay at interpolation-level error, far below any
        # integration-step effect
        assert errs[100] <= 1e-4
        assert errs[1000] <= 1e-8


class TestConditioningGuard:
    def test_unstable_mode_is_anchored_and_correct(self):
        system = SwitchedLinearSystem.from_entries(modes=[[["3"]]], x0=[1.0])
        cost = QuadraticCost.from_entries(Q=[["1"]], P1=[[0.0]], t0=0.0, tM=8.0)
        tabs = build_tables(system, cost, 0.0, 8.0, spacing=1e-2)
        assert tabs.stm[0].anchored
        # relative queries still work across anchors
        got = tabs.stm_between(1, 5.0, 1.0)
        assert got[0, 0] == pytest.approx(np.exp(3 * 4.0), rel=1e-7)
        got = tabs.stm_between(1, 1.0, 5.0)
        assert got[0, 0] == pytest.approx(np.exp(-3 * 4.0), rel=1e-7)
        with pytest.raises(NumericalError):
            tabs.stm_at(1, 4.0)
        with pytest.raises(NumericalError):
            build_stm(system, 0.0, 8.0, spacing=1e-2)


class TestWindowAdvance:
    def test_zero_delta_is_identity(self, spring, spring_tables):
        system, cost, _ = spring
        assert window_advance(spring_tables, system, cost, 0.0) is spring_tables

    def test_matches_fresh_build(self, cart):
        system, cost, _ = cart
        tabs = build_tables(system, cost, 0.0, 3.0, spacing=5e-3)
        adv = window_advance(tabs, system, cost, 0.5)
        fresh = build_tables(system, cost, 0.5, 3.5, spacing=5e-3)
        for j in range(1, 4):
            d_phi = np.max(np.abs(adv.stm[j - 1].segments[0].phi -
                                  fresh.stm[j - 1].segments[0].phi))
            d_psi = np.max(np.abs(adv.atm_samples[j - 1] - fresh.atm_samples[j - 1]))
            assert d_phi <= 1e-6
            assert d_psi <= 1e-6

    def test_two_small_advances_equal_one_big(self, spring, spring_tables):
        system, cost, _ = spring
        a = window_advance(window_advance(spring_tables, system, cost, 0.1),
                           system, cost, 0.1)
        b = window_advance(spring_tables, system, cost, 0.2)
        for j in (1, 2):
            assert np.max(np.abs(a.stm[j - 1].segments[0].phi -
                                 b.stm[j - 1].segments[0].phi)) <= 1e-6
            assert np.max(np.abs(a.atm_samples[j - 1] - b.atm_samples[j - 1])) <= 1e-6

    def test_integration_covers_only_the_tail(self, spring, spring_tables):
        system, cost, _ = spring
        before = METER.snapshot()
        window_advance(spring_tables, system, cost, 0.1)
        steps = METER.snapshot()[1] - before[1]
        cells = round(0.1 / spring_tables.spacing)
        substeps = round(spring_tables.spacing / spring_tables.fine_step)
        assert steps == 2 * system.N * cells * substeps

    def test_rejects_non_cell_delta(self, spring, spring_tables):
        system, cost, _ = spring
        with pytest.raises(ValueError):
            window_advance(spring_tables, system, cost, 0.00123456)


class TestCache:
    def test_round_trip(self, spring, spring_tables, tmp_path):
        system, cost, _ = spring
        key = tables_cache_key(system, cost, 0.0, 2.0, spring_tables.spacing,
                               spring_tables.fine_step, "cubic")
        path = tmp_path / "tables.npz"
        assert save_tables(path, spring_tables, key)
        loaded = load_tables(path, key)
        assert loaded is not None
        assert np.array_equal(loaded.stm[0].segments[0].phi,
                              spring_tables.stm[0].segments[0].phi)
        assert np.array_equal(loaded.atm_samples[1], spring_tables.atm_samples[1])

    def test_stale_hash_ignored(self, spring, spring_tables, tmp_path):
        system, cost, _ = spring
        key = tables_cache_key(system, cost, 0.0, 2.0, spring_tables.spacing,
                               spring_tables.fine_step, "cubic")
        path = tmp_path / "tables.npz"
        save_tables(path, spring_tables, key)
        assert load_tables(path, "different-key") is None
        assert load_tables(tmp_path / "missing.npz", key) is None
