import numpy as np
import pytest

from nbgbm import estimation as est
from nbgbm import inference as inf
from nbgbm import nb
from nbgbm.exceptions import DomainError, ShapeError, SizeGuardError
from nbgbm.model import CovariateSet, DataMatrix, GbmParams, PriorConfig, linear_predictor
from nbgbm.simulate import SimScheme, simulate_dataset

from conftest import random_constrained_params


@pytest.fixture(scope="module")
def fitted(tiny_fit):
    Y, truth, result = tiny_fit
    prior = PriorConfig()
    pieces = inf.preprocess(Y, result.params, truth.cov, prior)
    return Y, truth, result, prior, pieces


class TestConditionalInverses:
    def test_matches_dense_inversion(self, fitted):
        Y, truth, result, prior, pieces = fitted
        cov = truth.cov
        for j in range(cov.J):
            F = cov.X.T @ (pieces.W[:, j:j + 1] * cov.X) + np.eye(cov.K)
            np.testing.assert_allclose(pieces.invFa[j], np.linalg.inv(F), atol=1e-10)
        for i in range(cov.I):
            F = cov.Z.T @ (pieces.W[i][:, None] * cov.Z) + np.eye(cov.L)
            np.testing.assert_allclose(pieces.invFb[i], np.linalg.inv(F), atol=1e-10)

    def test_orthonormal_design_halves(self):
        # unit weights and orthonormal columns: inverse of (I + I) = I/2
        F = np.eye(3) + np.eye(3)
        np.testing.assert_allclose(np.linalg.inv(F), 0.5 * np.eye(3))

    def test_blocks_positive_definite(self, fitted):
        _, _, _, _, pieces = fitted
        for blocks in (pieces.invFa, pieces.invFb, pieces.invFu, pieces.invFv):
            for block in blocks:
                np.testing.assert_allclose(block, block.T, atol=1e-12)
                assert np.linalg.eigvalsh(block).min() > 0
        assert np.linalg.eigvalsh(pieces.invFc).min() > 0
        assert np.all(pieces.invFs > 0) and np.all(pieces.invFt > 0)


class TestConstraintJacobians:
    def test_hand_assembly_rank_one(self):
        rng = np.random.default_rng(0)
        I = 7
        X = np.ones((I, 1))
        u = rng.normal(size=(I, 1))
        u /= np.linalg.norm(u)
        Ju = inf._factor_jacobian(X, u)
        assert Ju.shape == (2, I)
        np.testing.assert_allclose(Ju[0], np.ones(I))
        np.testing.assert_allclose(Ju[1], 2 * u[:, 0])

    def test_zero_factor_zero_symmetric_block(self):
        X = np.ones((5, 2))
        Ju = inf._factor_jacobian(X, np.zeros((5, 2)))
        np.testing.assert_array_equal(Ju[2 * 2:], 0.0)

    def test_matches_finite_difference_of_constraints(self, fitted):
        Y, truth, result, prior, pieces = fitted
        params, cov = result.params, truth.cov
        jac = inf.constraint_jacobians(params, cov)
        M, I = params.M, cov.I

        def constraint_value(U):
            return np.concatenate([
                (U.T @ cov.X).ravel(order="F"),
                (U.T @ U - np.eye(M)).ravel(order="F"),
            ])

        rng = np.random.default_rng(1)
        h = 1e-6
        for _ in range(10):
            direction = rng.normal(size=(I, M))
            fd = (constraint_value(params.U + h * direction)
                  - constraint_value(params.U - h * direction)) / (2 * h)
            analytic = jac.Ju @ direction.ravel()
            np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-8)

    def test_requires_latent_factors(self, fitted):
        Y, truth, result, prior, pieces = fitted
        params = GbmParams.zeros(truth.cov.I, truth.cov.J, 2, 2, 0)
        with pytest.raises(ShapeError):
            inf.constraint_jacobians(params, truth.cov)


class TestJointUv:
    @pytest.mark.parametrize("M", [1, 2])
    def test_matches_dense_bordered_inverse(self, M):
        scheme = SimScheme(dims=(12, 8, 2, 2, M), seed=40 + M)
        Y, truth = simulate_dataset(scheme)
        result = est.fit(Y, truth.cov, M)
        prior = PriorConfig()
        pieces = inf.preprocess(Y, result.params, truth.cov, prior)
        varU, varV = inf.joint_uv_uncertainty(pieces, result.params, truth.cov, prior)
        oU, oV = inf.joint_uv_dense_oracle(pieces, result.params, truth.cov)
        np.testing.assert_allclose(varU, oU, rtol=1e-8)
        np.testing.assert_allclose(varV, oV, rtol=1e-8)
        assert np.all(varU > 0) and np.all(varV > 0)

    def test_proposition_leading_submatrix_equality(self):
        # bordering with F versus F + J'J leaves the leading block unchanged
        rng = np.random.default_rng(3)
        for _ in range(20):
            d = rng.integers(3, 31)
            k = int(rng.integers(1, min(11, d)))
            Q = rng.normal(size=(d, d))
            F = Q @ Q.T + d * np.eye(d)
            J = rng.normal(size=(k, d))

            def bordered_inv(Fmat):
                n = d + k
                big = np.zeros((n, n))
                big[:d, :d] = Fmat
                big[:d, d:] = J.T
                big[d:, :d] = J
                return np.linalg.inv(big)[:d, :d]

            lhs = bordered_inv(F)
            rhs = bordered_inv(F + J.T @ J)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)

    def test_m_zero_empty(self):
        scheme = SimScheme(dims=(8, 5, 2, 2, 0), seed=1)
        Y, truth = simulate_dataset(scheme)
        result = est.fit(Y, truth.cov, 0)
        prior = PriorConfig()
        pieces = inf.preprocess(Y, result.params, truth.cov, prior)
        varU, varV = inf.joint_uv_uncertainty(pieces, result.params, truth.cov, prior)
        assert varU.size == 0 and varV.size == 0


class TestPropagation:
    def test_zero_source_variance_gives_zero(self, fitted):
        Y, truth, result, prior, pieces = fitted
        M, cov = result.params.M, truth.cov
        out = inf.propagate_uv_to_ab(pieces, result.params, cov,
                                     np.zeros(cov.I * M), np.zeros(cov.J * M))
        for vec in out:
            np.testing.assert_array_equal(vec, 0.0)

    def test_outputs_nonnegative(self, fitted):
        Y, truth, result, prior, pieces = fitted
        cov = truth.cov
        varU, varV = inf.joint_uv_uncertainty(pieces, result.params, cov, prior)
        out = inf.propagate_uv_to_ab(pieces, result.params, cov, varU, varV)
        assert all(np.all(v >= 0) for v in out)
        varCa, varCb = inf.propagate_ab_to_c(pieces, result.params, cov)
        assert np.all(varCa >= 0) and np.all(varCb >= 0)

    def test_zero_score_kills_dispersion_edges(self):
        # synthetic exact-mean counts: E = 0, so Q = P = 0 and every
        # dispersion propagation Jacobian vanishes
        scheme = SimScheme(dims=(8, 5, 2, 2, 1), seed=2)
        Y, truth = simulate_dataset(scheme)
        params = truth.params0
        prior = PriorConfig()
        pieces = inf.preprocess(Y, params, truth.cov, prior)
        pieces.E[:] = 0.0
        varA = np.ones(truth.cov.J * 2)
        varB = np.ones(truth.cov.I * 2)
        varU = np.ones(truth.cov.I)
        varV = np.ones(truth.cov.J)
        var_s, var_t = inf.propagate_to_dispersions(
            pieces, params, truth.cov, varA, varB, varU, varV)
        for v in var_s.values():
            np.testing.assert_array_equal(v, 0.0)

    def test_transposition_symmetry(self):
        # a fully symmetric instance: I = J, X = Z, symmetric Y and
        # parameters, so the S and T ledgers coincide after relabeling
        rng = np.random.default_rng(5)
        n, K, M = 9, 2, 1
        from nbgbm.simulate import generate_covariates

        X = generate_covariates(n, K, "Normal", rng)
        cov = CovariateSet(X, X)
        A = rng.normal(size=(n, K)) * 0.3
        A -= cov.Z @ (cov.Zplus @ A)
        Csym = rng.normal(size=(K, K))
        Csym = (Csym + Csym.T) / 2.0
        Csym[0, 0] += 3.0
        raw = rng.normal(size=(n, M))
        raw -= X @ np.linalg.solve(X.T @ X, X.T @ raw)
        U = np.linalg.qr(raw)[0]
        s = rng.normal(size=n)
        s -= np.log(np.mean(np.exp(s)))
        params = GbmParams(A=A, B=A.copy(), C=Csym, D=np.array([10.0]),
                           U=U, V=U.copy(), S=s, T=s.copy(), omega=-2.3)
        upper = rng.poisson(np.exp(linear_predictor(params, cov)))
        Y = np.triu(upper) + np.triu(upper, 1).T  # symmetric counts
        prior = PriorConfig()
        pieces = inf.preprocess(DataMatrix(Y), params, cov, prior)
        varU, varV = inf.joint_uv_uncertainty(pieces, params, cov, prior)
        varA = np.einsum("jkk->jk", pieces.invFa).ravel()
        varB = np.einsum("ill->il", pieces.invFb).ravel()
        var_s, var_t = inf.propagate_to_dispersions(pieces, params, cov,
                                                    varA, varB, varU, varV)
        np.testing.assert_allclose(var_s["U"], var_t["V"], rtol=1e-10)
        np.testing.assert_allclose(var_s["V"], var_t["U"], rtol=1e-10)
        np.testing.assert_allclose(var_s["A"], var_t["B"], rtol=1e-10)
        np.testing.assert_allclose(var_s["B"], var_t["A"], rtol=1e-10)


class TestStandardErrors:
    def test_all_finite_positive(self, small_fit):
        Y, truth, result = small_fit
        ser = inf.standard_errors(Y, result.params, truth.cov)
        for name, block in ser.blocks().items():
            assert np.all(np.isfinite(block)), name
            assert np.all(block > 0) or block.size == 0, name

    def test_se_at_least_conditional(self, small_fit):
        Y, truth, result = small_fit
        prior = PriorConfig()
        pieces = inf.preprocess(Y, result.params, truth.cov, prior)
        ser = inf.standard_errors(Y, result.params, truth.cov, prior)
        cond_A = np.sqrt(np.einsum("jkk->jk", pieces.invFa))
        assert np.all(ser.se_A >= cond_A - 1e-12)
        cond_S = np.sqrt(pieces.invFs)
        assert np.all(ser.se_S >= cond_S - 1e-12)

    def test_no_se_for_singular_values_or_global_dispersion(self, small_fit):
        Y, truth, result = small_fit
        ser = inf.standard_errors(Y, result.params, truth.cov)
        assert set(ser.blocks()) == {"A", "B", "C", "U", "V", "S", "T"}

    def test_m_zero_matches_full_fisher_for_interactions(self):
        # with no latent factors and heavily shrunk nuisance coefficient
        # blocks, the propagated interaction SEs approach the classical
        # bordered full-Fisher values
        scheme = SimScheme(dims=(50, 10, 2, 2, 0), seed=14)
        Y, truth = simulate_dataset(scheme)
        prior = PriorConfig(lambda_a=1e6, lambda_b=1e6)
        result = est.fit(Y, truth.cov, 0, prior=prior)
        ser = inf.standard_errors(Y, result.params, truth.cov, prior)
        oracle = inf.full_fisher_variances(Y, result.params, truth.cov, prior)
        np.testing.assert_allclose(ser.se_C, np.sqrt(oracle["C"]), rtol=0.05)


class TestWaldTests:
    def test_zero_estimate(self):
        out = inf.wald_tests(np.array([0.0]), np.array([2.0]), level=0.95)
        np.testing.assert_allclose(out["p_values"], 1.0)
        np.testing.assert_allclose(out["ci_lower"], -out["ci_upper"])

    def test_reference_quantiles(self):
        out = inf.wald_tests(np.array([1.96]), np.array([1.0]), level=0.95)
        assert abs(out["p_values"][0] - 0.05) < 1e-3
        assert abs(out["ci_lower"][0]) < 1e-3
        out = inf.wald_tests(np.array([0.5]), np.array([1.0]))
        assert abs(out["p_values"][0] - 0.6171) < 1e-4

    def test_rejects_bad_inputs(self):
        with pytest.raises(DomainError):
            inf.wald_tests(np.array([1.0]), np.array([0.0]))
        with pytest.raises(DomainError):
            inf.wald_tests(np.array([1.0]), np.array([1.0]), level=1.5)


class TestFullFisherOracle:
    def test_size_guard(self):
        scheme = SimScheme(dims=(30, 12, 2, 2, 1), seed=0)
        Y, truth = simulate_dataset(scheme)
        params = truth.params0
        big = GbmParams.zeros(3000, 12, 2, 2, 0)
        bigY = DataMatrix(np.ones((3000, 12), dtype=int))
        bigcov = CovariateSet(np.ones((3000, 1)), np.ones((12, 1)))
        big = GbmParams.zeros(3000, 12, 1, 1, 0)
        with pytest.raises(SizeGuardError):
            inf.full_fisher_variances(bigY, big, bigcov)

    def test_dispersion_cross_information_is_zero(self):
        # E[(Y - mu)/(r + mu)^2] = 0 under the model: verified by exact
        # truncated summation of the pmf
        mu, r = 4.0, 2.0
        y = np.arange(0, 5000)
        pmf = np.exp(nb.nb_log_pmf(y, mu, r))
        cross = np.sum(pmf * (y - mu) / (r + mu) ** 2)
        assert abs(cross) < 1e-10

    def test_uv_block_consistent_with_joint_route(self):
        scheme = SimScheme(dims=(12, 8, 2, 2, 1), seed=44)
        Y, truth = simulate_dataset(scheme)
        result = est.fit(Y, truth.cov, 1)
        prior = PriorConfig()
        pieces = inf.preprocess(Y, result.params, truth.cov, prior)
        varU, varV = inf.joint_uv_uncertainty(pieces, result.params, truth.cov, prior)
        oU, oV = inf.joint_uv_dense_oracle(pieces, result.params, truth.cov)
        np.testing.assert_allclose(varU, oU, rtol=1e-6)
        np.testing.assert_allclose(varV, oV, rtol=1e-6)

    def test_bordered_matrix_symmetric_variances_positive(self, fitted):
        Y, truth, result, prior, pieces = fitted
        out = inf.full_fisher_variances(Y, result.params, truth.cov, prior)
        for name in ("A", "B", "C", "U", "V"):
            assert np.all(np.isfinite(out[name]))
