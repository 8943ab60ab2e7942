import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otrom.measures import DiscreteMeasure, cost_matrix, unit_grid
from otrom.sinkhorn import (
    SinkhornParams,
    StabilizationRequiredError,
    entropic_barycenter,
    exact_ot_1d,
    exact_ot_bruteforce,
    grid_transport_costs,
    sinkhorn_distance,
    sinkhorn_divergence,
    sinkhorn_plan,
)


def atoms_1d(points, weights=None):
    pts = np.asarray(points, dtype=float)[:, None]
    if weights is None:
        weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return DiscreteMeasure(support=pts, weights=weights)


def random_measure_1d(rng, n):
    return atoms_1d(rng.random(n), rng.dirichlet(np.ones(n)))


class TestSinkhornPlan:
    def test_single_atom(self):
        sol = sinkhorn_plan([1.0], [1.0], np.array([[0.0]]), SinkhornParams(epsilon=1.0))
        np.testing.assert_allclose(sol.plan, [[1.0]])
        assert sol.iterations == 1

    def test_large_epsilon_gives_independent_coupling(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        sol = sinkhorn_plan([0.5, 0.5], [0.5, 0.5], C, SinkhornParams(epsilon=100.0))
        np.testing.assert_allclose(sol.plan, np.full((2, 2), 0.25), atol=1e-2)

    def test_small_epsilon_matches_bruteforce(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        a = np.array([0.5, 0.5])
        sol = sinkhorn_plan(a, a, C, SinkhornParams(epsilon=0.01))
        np.testing.assert_allclose(sol.plan, np.diag(a), atol=1e-4)
        exact = exact_ot_bruteforce(a, a, C)
        assert sol.reg_cost == pytest.approx(exact, abs=1e-4)

    def test_marginals_feasible_within_tol(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n, m = rng.integers(2, 6, size=2)
            a = rng.dirichlet(np.ones(n))
            b = rng.dirichlet(np.ones(m))
            C = rng.random((n, m))
            sol = sinkhorn_plan(a, b, C, SinkhornParams(epsilon=0.05, tol=1e-9))
            assert sol.marginal_err <= 1e-9
            assert np.abs(sol.plan.sum(axis=1) - a).sum() <= 2e-9
            assert np.abs(sol.plan.sum(axis=0) - b).sum() <= 2e-9
            assert (sol.plan >= 0.0).all()

    def test_kkt_scaling_form(self):
        rng = np.random.default_rng(4)
        a = rng.dirichlet(np.ones(4))
        b = rng.dirichlet(np.ones(3))
        C = rng.random((4, 3))
        eps = 0.5
        sol = sinkhorn_plan(a, b, C, SinkhornParams(epsilon=eps, log_domain=False))
        K = np.exp(-C / eps)
        rebuilt = sol.dual_u[:, None] * K * sol.dual_v[None, :]
        np.testing.assert_allclose(sol.plan, rebuilt, rtol=1e-12)

    def test_log_and_direct_agree(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.dirichlet(np.ones(4))
            b = rng.dirichlet(np.ones(5))
            C = rng.random((4, 5))
            p_direct = sinkhorn_plan(a, b, C, SinkhornParams(epsilon=0.08, log_domain=False, tol=1e-12))
            p_log = sinkhorn_plan(a, b, C, SinkhornParams(epsilon=0.08, log_domain=True, tol=1e-12))
            np.testing.assert_allclose(p_direct.plan, p_log.plan, atol=1e-8)

    def test_direct_mode_underflow_raises(self):
        C = np.array([[1.0, 2.0], [3.0, 1.5]]) * 1e6
        with pytest.raises(StabilizationRequiredError):
            sinkhorn_plan([0.5, 0.5], [0.5, 0.5], C,
                          SinkhornParams(epsilon=1e-3, log_domain=False))

    def test_zero_weight_atoms_are_handled(self):
        a = np.array([0.0, 1.0])
        b = np.array([0.5, 0.5])
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        sol = sinkhorn_plan(a, b, C, SinkhornParams(epsilon=0.05))
        assert sol.plan[0].sum() == pytest.approx(0.0, abs=1e-12)

    def test_dual_objective_nondecreasing(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            n, m = rng.integers(2, 7, size=2)
            a = rng.dirichlet(np.ones(n))
            b = rng.dirichlet(np.ones(m))
            C = rng.random((n, m))
            sol = sinkhorn_plan(a, b, C, SinkhornParams(
                epsilon=0.02, record_trace=True, epsilon_scaling=False))
            assert (np.diff(sol.dual_trace) >= -1e-10).all()

    def test_invalid_weights_rejected(self):
        C = np.zeros((2, 2))
        from otrom.measures import MeasureError
        with pytest.raises(MeasureError):
            sinkhorn_plan([0.7, 0.7], [0.5, 0.5], C, SinkhornParams(epsilon=1.0))


class TestSinkhornDistance:
    def test_identical_atoms_cost_zero(self):
        m = atoms_1d([0.0], [1.0])
        assert sinkhorn_distance(m, m, 2.0, SinkhornParams(epsilon=1.0)) == pytest.approx(0.0)

    def test_two_diracs_squared_distance(self):
        mu = atoms_1d([0.0], [1.0])
        nu = atoms_1d([3.0], [1.0])
        d = sinkhorn_distance(mu, nu, 2.0, SinkhornParams(epsilon=9e-3))
        exact = exact_ot_1d(mu, nu, 2.0)
        assert exact == pytest.approx(9.0)
        assert d == pytest.approx(exact, rel=1e-2)

    def test_matched_uniform_pair_cost_near_zero(self):
        mu = atoms_1d([0.0, 1.0])
        d = sinkhorn_distance(mu, mu, 2.0, SinkhornParams(epsilon=0.01))
        assert exact_ot_bruteforce(mu.weights, mu.weights,
                                   cost_matrix(mu, mu, 2.0)) == pytest.approx(0.0)
        assert 0.0 <= d <= 0.05

    def test_entropic_cost_dominates_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(15):
            mu = random_measure_1d(rng, 4)
            nu = random_measure_1d(rng, 4)
            exact = exact_ot_1d(mu, nu, 2.0)
            d = sinkhorn_distance(mu, nu, 2.0, SinkhornParams(epsilon=0.01))
            assert d >= exact - 1e-8

    def test_bias_decreases_with_epsilon(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            mu = random_measure_1d(rng, 4)
            nu = random_measure_1d(rng, 4)
            C = cost_matrix(mu, nu, 2.0)
            exact = exact_ot_1d(mu, nu, 2.0)
            scale = float(np.mean(C.entries))
            gaps = [
                abs(sinkhorn_distance(mu, nu, 2.0, SinkhornParams(epsilon=e * scale)) - exact)
                for e in (1.0, 0.1, 0.01)
            ]
            assert gaps[0] >= gaps[1] - 1e-12
            assert gaps[1] >= gaps[2] - 1e-12


class TestSinkhornDivergence:
    def test_self_divergence_zero(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            m = random_measure_1d(rng, 5)
            assert sinkhorn_divergence(m, m, 2.0, SinkhornParams(epsilon=0.05)) == 0.0

    def test_symmetry_exact(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            mu = random_measure_1d(rng, 5)
            nu = random_measure_1d(rng, 5)
            params = SinkhornParams(epsilon=0.05)
            assert sinkhorn_divergence(mu, nu, 2.0, params) == \
                sinkhorn_divergence(nu, mu, 2.0, params)

    def test_two_diracs_recover_squared_distance(self):
        mu = atoms_1d([0.0], [1.0])
        nu = atoms_1d([3.0], [1.0])
        d = sinkhorn_divergence(mu, nu, 2.0, SinkhornParams(epsilon=9e-3))
        assert d == pytest.approx(9.0, rel=2e-2)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            mu = random_measure_1d(rng, 4)
            nu = random_measure_1d(rng, 4)
            d = sinkhorn_divergence(mu, nu, 2.0, SinkhornParams(epsilon=0.02))
            assert d >= -1e-9


class TestExactOracles:
    def test_identical_measures_zero(self):
        m = atoms_1d([0.2, 0.7])
        assert exact_ot_1d(m, m, 2.0) == pytest.approx(0.0)

    def test_unit_atoms(self):
        assert exact_ot_1d(atoms_1d([0.0]), atoms_1d([1.0]), 2.0) == pytest.approx(1.0)

    def test_shifted_uniform_pairs(self):
        mu = atoms_1d([0.0, 1.0])
        nu = atoms_1d([2.0, 3.0])
        # both matchings cost: monotone 4+4 vs crossed 9+1, halved by weights
        assert exact_ot_1d(mu, nu, 2.0) == pytest.approx(4.0)

    def test_bruteforce_single_entry(self):
        C = np.array([[2.5]])
        assert exact_ot_bruteforce([1.0], [1.0], C) == pytest.approx(2.5)

    def test_bruteforce_identity_matching(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert exact_ot_bruteforce([0.5, 0.5], [0.5, 0.5], C) == pytest.approx(0.0)

    def test_oracles_agree_on_1d_instances(self):
        rng = np.random.default_rng(16)
        for _ in range(10):
            mu = random_measure_1d(rng, 3)
            nu = random_measure_1d(rng, 3)
            C = cost_matrix(mu, nu, 2.0)
            lp = exact_ot_bruteforce(mu.weights, nu.weights, C)
            nw = exact_ot_1d(mu, nu, 2.0)
            assert lp == pytest.approx(nw, rel=1e-8, abs=1e-10)

    def test_bruteforce_size_limit(self):
        with pytest.raises(ValueError):
            exact_ot_bruteforce(np.full(7, 1 / 7), np.full(7, 1 / 7), np.zeros((7, 7)))

    def test_1d_oracle_rejects_2d(self):
        from otrom.measures import MeasureError
        m2 = DiscreteMeasure(support=[[0.0, 0.0]], weights=[1.0])
        with pytest.raises(MeasureError):
            exact_ot_1d(m2, m2, 2.0)

    @given(st.integers(min_value=2, max_value=5), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=60, deadline=None)
    def test_sinkhorn_dominates_lp_property(self, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(n))
        b = rng.dirichlet(np.ones(n))
        C = rng.random((n, n))
        exact = exact_ot_bruteforce(a, b, C)
        sol = sinkhorn_plan(a, b, C, SinkhornParams(epsilon=0.05 * float(C.max()) + 1e-9))
        assert sol.reg_cost >= exact - 1e-7


class TestGridSolver:
    def test_matches_dense_solver(self):
        rng = np.random.default_rng(20)
        g = unit_grid(6, 5)
        w1 = rng.dirichlet(np.ones(30))
        w2 = rng.dirichlet(np.ones(30))
        mu = DiscreteMeasure(support=g.coords, weights=w1)
        nu = DiscreteMeasure(support=g.coords, weights=w2)
        params = SinkhornParams(epsilon=5e-3, tol=1e-10)
        dense = sinkhorn_plan(w1, w2, cost_matrix(mu, nu, 2.0), params).reg_cost
        x = np.linspace(0, 1, 6)
        y = np.linspace(0, 1, 5)
        for backend in (False, True):
            fast = grid_transport_costs(w1.reshape(1, 5, 6), w2.reshape(1, 5, 6),
                                        x, y, params, use_numba=backend)[0]
            assert fast == pytest.approx(dense, abs=1e-9)

    def test_backends_agree_with_zero_weights(self):
        rng = np.random.default_rng(21)
        w = rng.random((3, 4, 4))
        w[:, :, 0] = 0.0  # a zero column, as in front-type solutions
        w /= w.sum(axis=(1, 2), keepdims=True)
        x = np.linspace(0, 1, 4)
        y = np.linspace(0, 1, 4)
        params = SinkhornParams(epsilon=1e-2, tol=1e-9)
        c_np = grid_transport_costs(w, w[::-1].copy(), x, y, params, use_numba=False)
        c_nb = grid_transport_costs(w, w[::-1].copy(), x, y, params, use_numba=True)
        np.testing.assert_allclose(c_np, c_nb, atol=1e-11)


class TestBarycenter:
    def grid5(self):
        g = unit_grid(5, 1)
        e0 = np.zeros(5); e0[0] = 1.0
        e4 = np.zeros(5); e4[4] = 1.0
        mu0 = DiscreteMeasure(support=g.coords, weights=e0)
        mu4 = DiscreteMeasure(support=g.coords, weights=e4)
        return mu0, mu4

    def test_endpoint_alpha_one(self):
        mu0, mu4 = self.grid5()
        out = entropic_barycenter([mu0, mu4], [1.0, 0.0], SinkhornParams(epsilon=1e-3))
        assert np.abs(out.weights - mu0.weights).sum() <= 1e-12

    def test_endpoint_alpha_zero(self):
        mu0, mu4 = self.grid5()
        out = entropic_barycenter([mu0, mu4], [0.0, 1.0], SinkhornParams(epsilon=1e-3))
        assert np.abs(out.weights - mu4.weights).sum() <= 1e-12

    def test_midpoint_of_diracs(self):
        mu0, mu4 = self.grid5()
        out = entropic_barycenter([mu0, mu4], [0.5, 0.5],
                                  SinkhornParams(epsilon=1e-3, max_iter=5000))
        assert out.weights[2] >= 0.9

    def test_result_is_valid_measure(self):
        rng = np.random.default_rng(22)
        g = unit_grid(8, 1)
        ms = [DiscreteMeasure(support=g.coords, weights=rng.dirichlet(np.ones(8)))
              for _ in range(3)]
        out = entropic_barycenter(ms, [0.2, 0.5, 0.3],
                                  SinkhornParams(epsilon=5e-3, max_iter=3000))
        assert abs(out.weights.sum() - 1.0) <= 1e-12
        assert (out.weights >= 0).all()

    def test_alpha_validation(self):
        mu0, mu4 = self.grid5()
        from otrom.measures import MeasureError
        with pytest.raises(MeasureError):
            entropic_barycenter([mu0, mu4], [0.7, 0.7], SinkhornParams(epsilon=1e-2))

    def test_support_mismatch_rejected(self):
        mu0, _ = self.grid5()
        other = DiscreteMeasure(support=np.linspace(0, 1, 4)[:, None],
                                weights=np.full(4, 0.25))
        from otrom.measures import MeasureError
        with pytest.raises(MeasureError):
            entropic_barycenter([mu0, other], [0.5, 0.5], SinkhornParams(epsilon=1e-2))
