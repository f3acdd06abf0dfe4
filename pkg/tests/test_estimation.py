import numpy as np
import pytest
from scipy.linalg import expm

from hmmfolio import (EmConfig, EstimationError, HmmModel, InputError,
                      em_fit, filter_path, information_criteria,
                      nearest_generator, select_states, simulate_path, viterbi)
from hmmfolio.estimation import (forward_loglik, init_strategy,
                                 n_free_parameters, viterbi_from_params,
                                 _project_log_generator)

from oracles import (exhaustive_viterbi, gaussian_log_density,
                     random_generator, random_simplex, random_spd)

DT = 1.0 / 252.0


def two_state_model():
    return HmmModel(growth=[[0.5, -0.2], [-0.4, 0.6]],
                    covariance=[[0.01, 0.002], [0.002, 0.0125]],
                    generator=[[-6.0, 4.0], [6.0, -4.0]],
                    prior=[0.5, 0.5])


class TestSingleState:
    def test_m1_is_closed_form_mle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((300, 2)) * 0.01 + 0.0005
        res = em_fit(x, EmConfig(n_states=1, dt=DT))
        assert np.allclose(res.model.growth[0], x.mean(axis=0) / DT, atol=1e-12)
        assert np.allclose(res.model.covariance,
                           np.cov(x, rowvar=False, bias=True) / DT, atol=1e-12)
        assert res.transition.shape == (1, 1) and res.transition[0, 0] == 1.0
        direct = sum(gaussian_log_density(r, x.mean(axis=0),
                                          np.cov(x, rowvar=False, bias=True))
                     for r in x)
        assert res.log_likelihood == pytest.approx(direct, abs=1e-6)


class TestEmFit:
    def test_monotone_likelihood(self):
        rng = np.random.default_rng(1)
        for k in range(5):
            model = two_state_model()
            path = simulate_path(model, 400, seed=k)
            res = em_fit(path.increments(),
                         EmConfig(n_states=2, max_iters=60, n_restarts=1,
                                  seed=k))
            diffs = np.diff(res.loglik_trace)
            assert diffs.min() > -1e-9 * max(1.0, abs(res.log_likelihood))

    def test_canonical_state_ordering(self):
        path = simulate_path(two_state_model(), 2000, seed=5)
        res = em_fit(path.increments(),
                     EmConfig(n_states=2, max_iters=80, n_restarts=2))
        means = res.model.growth.mean(axis=1)
        assert means[0] <= means[1]

    def test_matches_filter_likelihood(self):
        # fitted Z pinned into a model's transition cache: forward loglik
        # equals the filter-path likelihood on the same data
        model = two_state_model()
        path = simulate_path(model, 500, seed=6)
        x = path.increments()
        _, ll_filter = filter_path(model, x, DT)
        Z = model.transition_matrix(DT).T
        ll_forward = forward_loglik(x, model.growth * DT,
                                    model.covariance * DT, Z, model.prior)
        assert abs(ll_filter - ll_forward) < 1e-6

    def test_input_validation(self):
        with pytest.raises(InputError):
            em_fit(np.zeros((2, 1)), EmConfig(n_states=3))
        with pytest.raises(InputError):
            em_fit(np.array([[np.nan]] * 10), EmConfig(n_states=1))
        with pytest.raises(InputError):
            EmConfig(n_states=0)
        with pytest.raises(InputError):
            EmConfig(n_states=1, tol=0.0)


class TestViterbi:
    def test_single_state_constant(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((20, 1)) * 0.01
        path = viterbi_from_params(x, np.zeros((1, 1)), np.eye(1) * 1e-4,
                                   np.ones((1, 1)), np.ones(1))
        assert np.all(path == 0)

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = int(rng.integers(2, 4))
            T = int(rng.integers(4, 11))
            n = int(rng.integers(1, 3))
            means = rng.standard_normal((m, n)) * 0.05
            cov = random_spd(rng, n, 0.01)
            Z = rng.uniform(0.05, 1.0, size=(m, m))
            Z /= Z.sum(axis=1, keepdims=True)
            pi = random_simplex(rng, m)
            x = rng.standard_normal((T, n)) * 0.1
            got = viterbi_from_params(x, means, cov, Z, pi)
            want, _ = exhaustive_viterbi(x, means, cov, Z, pi)
            assert np.array_equal(got, want)

    def test_tie_break_lowest_index(self):
        # identical emissions and uniform dynamics: every path ties, so the
        # documented tie-break must produce the all-zeros path
        m, T = 3, 6
        x = np.zeros((T, 1))
        means = np.zeros((m, 1))
        Z = np.full((m, m), 1.0 / m)
        pi = np.full(m, 1.0 / m)
        path = viterbi_from_params(x, means, np.eye(1), Z, pi)
        assert np.all(path == 0)

    def test_separated_states_match_pointwise_argmax(self):
        rng = np.random.default_rng(4)
        means = np.array([[-1.0], [1.0]])
        cov = np.eye(1) * 1e-6
        Z = np.array([[0.5, 0.5], [0.5, 0.5]])
        x = rng.choice([-1.0, 1.0], size=(10, 1))
        path = viterbi_from_params(x, means, cov, Z, [0.5, 0.5])
        assert np.array_equal(path, (x[:, 0] > 0).astype(int))

    def test_wrapper_requires_dt_for_results(self):
        path = simulate_path(two_state_model(), 100, seed=7)
        res = em_fit(path.increments(),
                     EmConfig(n_states=2, max_iters=30, n_restarts=1),
                     fit_generator=False)
        p1 = viterbi(path.increments(), res, dt=DT)
        assert np.array_equal(p1, res.viterbi_path)
        with pytest.raises(InputError):
            viterbi(path.increments(), res)
        p2 = viterbi(path.increments(), two_state_model(), dt=DT)
        assert p2.shape == (100,)


class TestModelSelection:
    def test_parameter_count(self):
        # m=5, n=12: 60 growth + 78 covariance + 20 transition + 4 initial
        assert n_free_parameters(5, 12) == 162

    def test_criteria_formulas(self):
        path = simulate_path(two_state_model(), 300, seed=8)
        res = em_fit(path.increments(),
                     EmConfig(n_states=2, max_iters=40, n_restarts=1))
        crit = information_criteria(res, 300)
        k = n_free_parameters(2, 2)
        assert crit["AIC"] == pytest.approx(-2 * res.log_likelihood + 2 * k)
        assert crit["BIC"] == pytest.approx(
            -2 * res.log_likelihood + k * np.log(300))
        a = res.smoothed
        ent = float(-np.where(a > 0, a * np.log(a), 0.0).sum())
        assert crit["ICL"] == pytest.approx(crit["BIC"] + 2 * ent)

    def test_selects_one_state_on_gbm_data(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((600, 2)) * 0.01
        cfg = EmConfig(n_states=2, max_iters=40, n_restarts=1)
        chosen, table, fits = select_states(x, [1, 2], cfg)
        assert chosen["BIC"] == 1 and chosen["ICL"] == 1
        assert set(table) == {1, 2}

    def test_empty_candidates_rejected(self):
        with pytest.raises(InputError):
            select_states(np.zeros((10, 1)), [], EmConfig(n_states=1))


class TestInitStrategy:
    def test_single_state(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((100, 2)) * 0.02
        means, cov, Z, pi = init_strategy(x, 1)
        assert np.allclose(means[0], x.mean(axis=0))
        assert Z.shape == (1, 1)

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((400, 1)) * 0.01
        b = rng.standard_normal((400, 1)) * 0.01 + 0.5
        x = np.vstack([a, b])
        means, cov, Z, pi = init_strategy(x, 2, seed=0)
        means = np.sort(means[:, 0])
        assert abs(means[0] - a.mean()) < 0.005
        assert abs(means[1] - b.mean()) < 0.005
        assert np.allclose(np.diag(Z), 0.95)

    def test_outputs_valid(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((200, 3)) * 0.02
        means, cov, Z, pi = init_strategy(x, 3, seed=1)
        np.linalg.cholesky(cov)
        assert pi.sum() == pytest.approx(1.0)
        assert np.allclose(Z.sum(axis=1), 1.0)


class TestNearestGenerator:
    def test_identity_gives_zero(self):
        G, obj = nearest_generator(np.eye(3), DT)
        assert np.allclose(G, 0.0, atol=1e-12)
        assert obj < 1e-12

    def test_round_trip(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            m = int(rng.integers(2, 6))
            G = random_generator(rng, m)
            Z = expm(G * DT)
            G2, obj = nearest_generator(Z, DT)
            assert np.linalg.norm(expm(G2 * DT) - Z) < 1e-6
            # valid generator: columns zero, off-diagonals nonnegative
            assert np.allclose(G2.sum(axis=0), 0.0, atol=1e-10)
            off = G2 - np.diag(np.diag(G2))
            assert np.all(off >= -1e-12)

    def test_beats_projection_on_invalid_log(self):
        # perturb a valid transition so log(Z)/dt violates the constraints
        rng = np.random.default_rng(14)
        G = random_generator(rng, 3, max_rate=40.0)
        Z = expm(G * DT)
        Z = Z + rng.uniform(0.0, 0.02, size=Z.shape)
        Z /= Z.sum(axis=0, keepdims=True)
        G2, obj = nearest_generator(Z, DT)
        proj = _project_log_generator(Z, DT)
        proj_obj = np.linalg.norm(Z - expm(proj * DT))
        assert obj <= proj_obj + 1e-12
        assert np.allclose(G2.sum(axis=0), 0.0, atol=1e-10)

    def test_input_validation(self):
        with pytest.raises(InputError):
            nearest_generator(np.eye(2), 0.0)
        with pytest.raises(InputError):
            nearest_generator(np.array([[0.5, 0.2], [0.2, 0.5]]), DT)


class TestParameterRecoveryQuick:
    def test_two_state_recovery_short(self):
        # smaller-scale version of the acceptance recovery experiment
        model = two_state_model()
        path = simulate_path(model, 10_000, seed=15)
        res = em_fit(path.increments(),
                     EmConfig(n_states=2, max_iters=100, n_restarts=1, seed=0))
        order = np.argsort(model.growth.mean(axis=1))
        true_growth = model.growth[order]
        assert np.max(np.abs(res.model.growth - true_growth)
                      / np.abs(true_growth)) < 0.25
        assert np.max(np.abs(res.model.covariance - model.covariance)
                      / np.abs(model.covariance)) < 0.15
