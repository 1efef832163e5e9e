import math

import numpy as np
import pytest

import derivation_oracles as do
from errors import InvalidInputError
from harness import negated_distance_score


class TestGaussianHelpers:
    def test_random_spd_is_positive_definite(self, rng):
        m = do.random_spd(rng, 4)
        assert np.all(np.linalg.eigvalsh(m) >= 1.0 - 1e-9)

    def test_require_pd(self):
        with pytest.raises(InvalidInputError, match="symmetric"):
            do.require_pd(np.array([[1.0, 0.5], [0.0, 1.0]]), "m")
        with pytest.raises(InvalidInputError, match="positive definite"):
            do.require_pd(np.array([[1.0, 2.0], [2.0, 1.0]]), "m")

    def test_logpdf_matches_direct_density(self, rng):
        cov = do.random_spd(rng, 3, 0.5)
        mean = rng.standard_normal(3)
        for x in rng.standard_normal((5, 3)):
            assert do.gaussian_logpdf(x, mean, cov) == pytest.approx(math.log(do.gaussian_pdf_direct(x, mean, cov)), abs=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_softmax_is_the_bayes_posterior(seed):
    rng = np.random.default_rng(seed)
    assert do.check_softmax_posterior(do.make_softmax_scenario(rng, m=5, d=3)) < 1e-12


@pytest.mark.parametrize("d", [1, 2, 3])
def test_dot_product_reduction(d):
    rng = np.random.default_rng(d)
    params = do.make_block_params(rng, d)
    assert do.check_dot_product_reduction(params, rng.standard_normal(d), rng.standard_normal((8, d))) < 1e-10


class TestSigmoidLemmas:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.mu0, self.mu1 = rng.standard_normal(2), rng.standard_normal(2)
        self.cov = do.random_spd(rng, 2, 0.5)
        self.other = do.random_spd(rng, 2, 1.0)
        self.xs = rng.standard_normal((30, 2))

    def test_equal_covariances_give_affine_logit(self):
        result = do.check_sigmoid_lemmas(self.mu0, self.mu1, self.cov, self.cov, 0.3, self.xs)
        assert result.quadratic_norm < 1e-12
        assert result.affine_deviation < 1e-10
        assert result.biaffine_deviation < 1e-10

    def test_unequal_covariances_need_the_quadratic_term(self):
        result = do.check_sigmoid_lemmas(self.mu0, self.mu1, self.cov, self.other, 0.3, self.xs)
        assert result.biaffine_deviation < 1e-10
        assert result.affine_deviation > 1e-6
        assert result.quadratic_norm > 0

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2])
    def test_prior_range(self, p):
        with pytest.raises(InvalidInputError):
            do.posterior_logit(self.mu0, self.mu1, self.cov, self.cov, p)


def test_bernoulli_feature():
    result = do.check_bernoulli_feature(do.make_bernoulli_scenario(np.random.default_rng(3)))
    assert result.normalization_deviation < 1e-12
    assert result.bayes_deviation < 1e-9


class TestLogNormal:
    def test_rewritten_density(self, rng):
        x = rng.uniform(0.05, 20.0, size=50)
        mu = rng.uniform(-2.0, 2.0, size=50)
        sigma2 = rng.uniform(0.1, 2.0, size=50)
        assert do.check_lognormal_forms(x, mu, sigma2) < 1e-10

    def test_density_integrates_to_one(self):
        x = np.linspace(1e-4, 60.0, 400001)
        integrate = getattr(np, "trapezoid", None) or np.trapz
        assert integrate(do.lognormal_pdf(x, 0.3, 0.5), x) == pytest.approx(1.0, abs=1e-4)

    @pytest.mark.parametrize("x,sigma2", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
    def test_domain(self, x, sigma2):
        with pytest.raises(InvalidInputError):
            do.lognormal_pdf(x, 0.0, sigma2)


class TestConditionalLogNormal:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.params = do.make_joint_params(rng)
        self.hs = rng.standard_normal((4, 3))
        self.zs = np.linspace(-1.5, 1.5, 7)

    def test_distance_score_shape(self):
        result = do.check_conditional_lognormal(self.params, self.zs, self.hs)
        assert result.conditional_deviation < 1e-10
        assert result.feature_deviation < 1e-10

    def test_curvature(self):
        _, theta2 = do.distance_affine(self.params)
        curvature = do.fitted_curvature(self.params, self.hs[0], [-1.0, 0.0, 1.0])
        assert curvature == pytest.approx(-theta2 / 2.0, abs=1e-8)

    def test_wrong_sign_is_detected(self):
        result = do.check_conditional_lognormal(self.params, self.zs, self.hs, negated_distance_score)
        assert result.feature_deviation > 1e-3
        assert result.conditional_deviation < 1e-10
