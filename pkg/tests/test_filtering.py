import numpy as np
import pytest

from hmmfolio import (FilterDegenerateError, HmmModel, InputError, filter_path,
                      filter_step, init_filter, simulate_path)
from hmmfolio.filtering import filter_to_csv, posterior_path

from oracles import (brute_force_filter, gaussian_log_density,
                     random_generator, random_simplex, random_spd)


def random_model(rng, n, m):
    return HmmModel(growth=rng.uniform(-1.0, 1.0, size=(m, n)),
                    covariance=random_spd(rng, n, 0.1),
                    generator=random_generator(rng, m),
                    prior=random_simplex(rng, m))


class TestInitFilter:
    def test_vertex_prior(self):
        model = HmmModel([[0.1, 0.2], [0.3, 0.4]], np.eye(2),
                         [[-1.0, 1.0], [1.0, -1.0]], [1.0, 0.0])
        s = init_filter(model)
        assert np.array_equal(s.posterior, [1.0, 0.0])
        assert np.array_equal(s.projected_growth, [0.1, 0.2])
        assert s.log_scale == 0.0

    def test_symmetric_growth_cancels(self):
        model = HmmModel([[0.3], [-0.3]], [[1.0]],
                         [[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
        assert init_filter(model).projected_growth[0] == pytest.approx(0.0)

    def test_convex_combination(self):
        model = HmmModel([[0.1], [0.2]], [[1.0]],
                         [[-1.0, 1.0], [1.0, -1.0]], [0.3, 0.7])
        assert init_filter(model).projected_growth[0] == pytest.approx(0.17)


class TestFilterStep:
    def test_indistinguishable_states(self):
        model = HmmModel([[0.1], [0.1]], [[1.0]], np.zeros((2, 2)), [0.3, 0.7])
        s = filter_step(init_filter(model), model, [0.5], 1.0)
        assert np.allclose(s.posterior, [0.3, 0.7], atol=1e-15)

    def test_hand_evaluated_two_state_step(self):
        # n=1, m=2, G=0, Sigma=1, dt=1, growth (0, 1), prior (1/2, 1/2),
        # observation 1: Y = (1, e^0.5), posterior = (1, e^0.5)/(1 + e^0.5)
        model = HmmModel([[0.0], [1.0]], [[1.0]], np.zeros((2, 2)), [0.5, 0.5])
        s = filter_step(init_filter(model), model, [1.0], 1.0)
        e = np.exp(0.5)
        assert np.allclose(s.posterior, [1 / (1 + e), e / (1 + e)], atol=1e-12)

    def test_matches_brute_force_single_step(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, m = rng.integers(1, 4), rng.integers(2, 5)
            model = random_model(rng, n, m)
            dt = 1.0 / 252.0
            r = rng.standard_normal(n) * np.sqrt(dt) * 0.3
            s = filter_step(init_filter(model), model, r, dt)
            oracle, _ = brute_force_filter(model.growth, model.covariance,
                                           model.generator, model.prior,
                                           r[None, :], dt)
            assert np.max(np.abs(s.posterior - oracle[0])) < 1e-12

    def test_simplex_preserved(self):
        rng = np.random.default_rng(1)
        model = random_model(rng, 2, 3)
        s = init_filter(model)
        for _ in range(200):
            s = filter_step(s, model, rng.standard_normal(2) * 0.05, 1 / 252)
            assert abs(s.posterior.sum() - 1.0) < 1e-12
            assert np.all(s.posterior >= 0)

    def test_non_finite_observation_rejected(self):
        model = HmmModel([[0.1], [0.2]], [[1.0]],
                         [[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
        with pytest.raises(FilterDegenerateError):
            filter_step(init_filter(model), model, [np.nan], 1.0)

    def test_dt_and_shape_validation(self):
        model = HmmModel([[0.1], [0.2]], [[1.0]],
                         [[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
        with pytest.raises(InputError):
            filter_step(init_filter(model), model, [0.1], 0.0)
        with pytest.raises(InputError):
            filter_step(init_filter(model), model, [0.1, 0.2], 1.0)


class TestFilterPath:
    def test_matches_brute_force_along_path(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            n, m = rng.integers(1, 4), rng.integers(2, 5)
            model = random_model(rng, n, m)
            path = simulate_path(model, 100, seed=int(rng.integers(1 << 30)))
            states, loglik = filter_path(model, path)
            oracle, oracle_ll = brute_force_filter(
                model.growth, model.covariance, model.generator,
                model.prior, path.increments(), path.dt)
            post = np.array([s.posterior for s in states])
            assert np.max(np.abs(post - oracle)) < 1e-10
            assert abs(loglik - oracle_ll) < 1e-8 * max(1.0, abs(oracle_ll))

    def test_single_state_loglik_is_iid_gaussian(self):
        model = HmmModel([[0.05, 0.1]], [[0.04, 0.01], [0.01, 0.09]],
                         [[0.0]], [1.0])
        path = simulate_path(model, 50, seed=4)
        states, loglik = filter_path(model, path)
        dt = path.dt
        direct = sum(gaussian_log_density(r, dt * model.growth[0],
                                          dt * model.covariance)
                     for r in path.increments())
        assert np.allclose([s.posterior[0] for s in states], 1.0)
        assert loglik == pytest.approx(direct, abs=1e-8)

    def test_prior_fixed_point_when_uninformative(self):
        # G = 0 and identical growth: posterior equals the prior exactly
        model = HmmModel([[0.1], [0.1]], [[1.0]], np.zeros((2, 2)), [0.3, 0.7])
        path = simulate_path(model, 30, seed=5)
        states, _ = filter_path(model, path)
        for s in states:
            assert np.allclose(s.posterior, [0.3, 0.7], atol=1e-14)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        model = random_model(rng, 2, 3)
        perm = np.array([2, 0, 1])
        permuted = HmmModel(model.growth[perm],
                            model.covariance,
                            model.generator[np.ix_(perm, perm)],
                            model.prior[perm])
        x = rng.standard_normal((40, 2)) * 0.05
        p1 = posterior_path(model, x, 1 / 252)
        p2 = posterior_path(permuted, x, 1 / 252)
        assert np.allclose(p1[:, perm], p2, atol=1e-13)

    def test_tracks_true_state_when_well_separated(self):
        # growth gap of ~10 per-step sigmas: posterior >= 0.9 on the true
        # emitting state's successor most of the time
        dt = 1.0 / 252.0
        gap = 10 * np.sqrt(0.04 * dt) / dt
        model = HmmModel([[0.0], [gap]], [[0.04]],
                         [[-2.0, 2.0], [2.0, -2.0]], [0.5, 0.5])
        hits = total = 0
        for seed in range(100):
            path = simulate_path(model, 100, seed=seed)
            post = posterior_path(model, path.increments(), dt)
            # posterior after step k concerns states[k]
            conf = post[np.arange(100), path.states[1:]]
            hits += np.sum(conf >= 0.9)
            total += 100
        assert hits / total >= 0.80

    def test_raw_increments_need_dt(self):
        model = HmmModel([[0.1]], [[1.0]], [[0.0]], [1.0])
        with pytest.raises(InputError):
            filter_path(model, np.zeros((3, 1)))

    def test_csv_export(self, tmp_path):
        model = HmmModel([[0.1, 0.2], [0.3, 0.1]], np.eye(2) * 0.04,
                         [[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
        path = simulate_path(model, 10, seed=8)
        states, loglik = filter_path(model, path)
        f = tmp_path / "posterior.csv"
        filter_to_csv(f, states, path.dt)
        lines = f.read_text().strip().splitlines()
        assert lines[0] == ("t,p_1,p_2,gamma_hat_1,gamma_hat_2,"
                            "loglik_increment")
        assert len(lines) == 11
        incs = [float(l.split(",")[-1]) for l in lines[1:]]
        assert sum(incs) == pytest.approx(loglik, abs=1e-10)
