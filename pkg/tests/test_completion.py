import warnings

import numpy as np
import pytest
from conftest import full_observation, random_factors
from hypothesis import given, settings
from hypothesis import strategies as st

from mcfdr.completion import (
    DegenerateProjectionWarning,
    FactorModel,
    GdConfig,
    MatrixCompleter,
    ObservationSet,
    debias,
    full_estimate,
    gradient_descent_init,
    incoherence_projection,
    low_rank_reconstruct,
)
from mcfdr.simulation import generate_low_rank, sample_observations


def projector_distance(A, B):
    return np.max(np.abs(A @ A.T - B @ B.T))


class TestObservationSet:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ObservationSet(2, 2, [2], [0], [1.0])
        with pytest.raises(ValueError):
            ObservationSet(2, 2, [0], [-1], [1.0])

    def test_duplicates_accumulate(self):
        obs = ObservationSet(2, 2, [0, 0], [1, 1], [1.0, 2.0])
        assert obs.n == 2
        assert obs.to_dense()[0, 1] == 3.0

    def test_subset_keeps_shape(self):
        obs = ObservationSet(3, 4, [0, 1, 2], [0, 1, 3], [1.0, 2.0, 3.0])
        sub = obs.subset([0, 2])
        assert sub.shape == (3, 4) and sub.n == 2
        np.testing.assert_array_equal(sub.values, [1.0, 3.0])


class TestGdConfig:
    @pytest.mark.parametrize("kw", [{"rank": 0}, {"step_size": -1.0}, {"max_iters": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GdConfig(**kw)

    def test_rank_above_dimension_is_config_error(self):
        obs = ObservationSet(2, 3, [0], [0], [1.0])
        with pytest.raises(ValueError):
            gradient_descent_init(obs, GdConfig(rank=3))


class TestGradientDescentInit:
    def test_ones_matrix_exact(self):
        M = np.ones((2, 2))
        fit = gradient_descent_init(full_observation(M), GdConfig(rank=1))
        np.testing.assert_allclose(fit.dense, M, atol=1e-6)

    def test_random_rank2_noiseless(self, rng):
        truth = random_factors(20, 20, 2, rng)
        fit = gradient_descent_init(full_observation(truth.dense), GdConfig(rank=2))
        assert np.max(np.abs(fit.dense - truth.dense)) <= 1e-6
        fit.check()

    def test_nonconvergence_flagged(self):
        model = generate_low_rank(20, 20, 2, 20, 2.0, 0)
        obs = sample_observations(model, 600, 0.1, seed=0)
        fit = gradient_descent_init(obs, GdConfig(rank=2, max_iters=1, tol=1e-300))
        assert not fit.converged and fit.n_iter == 1

    @pytest.mark.slow
    def test_entrywise_rate_d60(self):
        # constant calibrated to 10: the max over 3600 entries of the error
        # sits at 4.4 to 8 times the rate at this size
        d, r, sigma = 60, 2, 0.5
        n = 20 * r * d
        bound = 10 * sigma * np.sqrt(d * np.log(d) / n)
        for seed in range(20):
            model = generate_low_rank(d, d, r, 60, 2.0, seed)
            obs = sample_observations(model, n, sigma, seed=1000 + seed)
            fit = gradient_descent_init(obs, GdConfig(rank=r))
            assert np.max(np.abs(fit.dense - model.dense)) <= bound


class TestDebias:
    def test_true_init_no_noise_is_fixed(self, rng):
        truth = random_factors(5, 4, 2, rng)
        i = rng.integers(0, 5, 30)
        j = rng.integers(0, 4, 30)
        obs = ObservationSet(5, 4, i, j, truth.dense[i, j])
        np.testing.assert_array_equal(debias(truth, obs), truth.dense)

    def test_zero_init_full_grid_returns_y(self, rng):
        Y = rng.standard_normal((3, 4))
        zero = FactorModel(np.eye(3, 1), np.eye(4, 1), np.zeros(1), np.zeros((3, 4)))
        np.testing.assert_allclose(debias(zero, full_observation(Y)), Y)

    def test_direct_formula(self):
        zero = FactorModel(np.eye(3, 1), np.eye(3, 1), np.zeros(1), np.zeros((3, 3)))
        obs = ObservationSet(3, 3, [0, 1], [0, 2], [2.0, -1.0])
        expected = np.zeros((3, 3))
        expected[0, 0], expected[1, 2] = 9.0, -4.5
        np.testing.assert_allclose(debias(zero, obs), expected)

    def test_dimension_mismatch(self):
        zero = FactorModel(np.eye(3, 1), np.eye(3, 1), np.zeros(1), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            debias(zero, ObservationSet(4, 3, [0], [0], [1.0]))


class TestIncoherenceProjection:
    def test_fixed_point(self, rng):
        truth = random_factors(8, 6, 2, rng)
        U_hat, V_hat = incoherence_projection(truth.dense, truth)
        assert projector_distance(U_hat, truth.U) <= 1e-8
        assert projector_distance(V_hat, truth.V) <= 1e-8

    def test_dominant_direction(self):
        init = FactorModel(np.eye(2, 1), np.eye(2, 1), np.ones(1))
        U_hat, V_hat = incoherence_projection(np.diag([3.0, 1.0]), init)
        np.testing.assert_allclose(np.abs(U_hat[:, 0]), [1, 0], atol=1e-12)
        np.testing.assert_allclose(np.abs(V_hat[:, 0]), [1, 0], atol=1e-12)

    def test_matches_dense_svd_oracle(self, rng):
        unbs = rng.standard_normal((6, 5))
        init = random_factors(6, 5, 2, rng)
        U_hat, V_hat = incoherence_projection(unbs, init)
        Uo = np.linalg.svd(unbs @ init.V)[0][:, :2]
        Vo = np.linalg.svd(unbs.T @ init.U)[0][:, :2]
        assert projector_distance(U_hat, Uo) <= 1e-10
        assert projector_distance(V_hat, Vo) <= 1e-10

    def test_degenerate_is_flagged_and_filled(self):
        init = FactorModel(np.eye(4, 2), np.eye(3, 2), np.ones(2))
        unbs = np.zeros((4, 3))
        unbs[0, 0] = 1.0
        with pytest.warns(DegenerateProjectionWarning):
            U_hat, V_hat = incoherence_projection(unbs, init)
        np.testing.assert_allclose(U_hat.T @ U_hat, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(V_hat.T @ V_hat, np.eye(2), atol=1e-12)


class TestLowRankReconstruct:
    def test_member_of_space_unchanged(self, rng):
        truth = random_factors(7, 5, 2, rng)
        out = low_rank_reconstruct(truth.dense, truth.U, truth.V)
        np.testing.assert_allclose(out.dense, truth.dense, atol=1e-12)
        out.check()

    def test_idempotent(self, rng):
        unbs = rng.standard_normal((7, 5))
        U, _ = np.linalg.qr(rng.standard_normal((7, 2)))
        V, _ = np.linalg.qr(rng.standard_normal((5, 2)))
        once = low_rank_reconstruct(unbs, U, V)
        twice = low_rank_reconstruct(once.dense, once.U, once.V)
        np.testing.assert_allclose(twice.dense, once.dense, atol=1e-10)

    def test_explicit_product_oracle(self, rng):
        unbs = rng.standard_normal((4, 4))
        U, _ = np.linalg.qr(rng.standard_normal((4, 2)))
        V, _ = np.linalg.qr(rng.standard_normal((4, 2)))
        out = low_rank_reconstruct(unbs, U, V)
        np.testing.assert_allclose(out.dense, U @ U.T @ unbs @ V @ V.T, atol=1e-10)
        np.testing.assert_allclose((out.U * out.S) @ out.V.T, out.dense, atol=1e-10)
        assert np.all(np.diff(out.S) <= 0)


class TestFullEstimate:
    def test_keeps_init_and_signs(self, rng):
        model = generate_low_rank(30, 25, 2, 30, 2.0, 3)
        obs = sample_observations(model, 3000, 0.1, seed=4)
        est = full_estimate(obs, GdConfig(rank=2))
        est.check()
        assert est.init is not None and est.init.rank == 2
        for k in range(2):
            col = est.U[:, k]
            assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0
        assert np.max(np.abs(est.dense - model.dense)) < 0.5

    def test_deterministic(self):
        model = generate_low_rank(20, 20, 2, 20, 2.0, 0)
        obs = sample_observations(model, 1500, 0.3, seed=1)
        a = full_estimate(obs, GdConfig(rank=2))
        b = full_estimate(obs, GdConfig(rank=2))
        np.testing.assert_array_equal(a.dense, b.dense)


class TestMatrixCompleter:
    def test_fit_predict(self):
        model = generate_low_rank(20, 15, 2, 20, 2.0, 0)
        obs = sample_observations(model, 2000, 0.05, seed=2)
        est = MatrixCompleter(rank=2, shape=(20, 15)).fit(obs.coordinates(), obs.values)
        pred = est.predict([[0, 0], [19, 14]])
        np.testing.assert_allclose(pred, model.dense[[0, 19], [0, 14]], atol=0.2)
        assert est.get_params()["rank"] == 2
        assert est.shape_ == (20, 15)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            MatrixCompleter().fit([[0, 0, 0]], [1.0])
        with pytest.raises(ValueError):
            MatrixCompleter().fit([[0, 0]], [1.0, 2.0])
        with pytest.raises(ValueError):
            MatrixCompleter().fit([[0.5, 0]], [1.0])


# property suites

@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_debias_true_init_identity(d1, d2, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, d1, d2)
    truth = random_factors(d1, d2, r, rng)
    n = int(rng.integers(1, 40))
    i, j = rng.integers(0, d1, n), rng.integers(0, d2, n)
    obs = ObservationSet(d1, d2, i, j, truth.dense[i, j])
    np.testing.assert_allclose(debias(truth, obs), truth.dense, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_reconstruct_idempotent_property(d1, d2, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, d1, d2)
    unbs = rng.standard_normal((d1, d2))
    U, _ = np.linalg.qr(rng.standard_normal((d1, r)))
    V, _ = np.linalg.qr(rng.standard_normal((d2, r)))
    once = low_rank_reconstruct(unbs, U, V)
    np.testing.assert_allclose(once.dense, U @ U.T @ unbs @ V @ V.T, atol=1e-10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        twice = low_rank_reconstruct(once.dense, once.U, once.V)
    np.testing.assert_allclose(twice.dense, once.dense, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_full_estimate_deterministic_by_seed(seed):
    rng = np.random.default_rng(seed)
    d1, d2 = int(rng.integers(5, 12)), int(rng.integers(5, 12))
    model = generate_low_rank(d1, d2, 1, 5.0, 1.0, seed)
    obs = sample_observations(model, 200, 0.2, seed=seed)
    cfg = GdConfig(rank=1, max_iters=50, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = full_estimate(obs, cfg)
        b = full_estimate(obs, cfg)
    np.testing.assert_array_equal(a.dense, b.dense)
