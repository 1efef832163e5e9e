"""
Numeric checks that the attention score terms follow from Gaussian /
Bernoulli / log-normal modelling assumptions.

Every check compares a direct probabilistic computation (densities evaluated
and normalized by hand) against the closed form the model uses, and returns
the observed deviation. ``run_all`` gathers them into a report with
tolerances.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from autodiff import sigmoid_values
from errors import FormGraphError, InvalidInputError
from rich_attention import DistanceFn, distance_score, order_score

logger = logging.getLogger(__name__)

TAU = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------
def random_spd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    """AᵀA + I, positive definite by construction."""
    a = rng.standard_normal((d, d)) * scale
    return a.T @ a + np.eye(d)


def require_pd(matrix: np.ndarray, name: str) -> np.ndarray:
    """Cholesky factor, or a setup error naming the matrix."""
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        raise InvalidInputError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        raise InvalidInputError(f"{name} is not positive definite") from None


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    chol = require_pd(cov, "covariance")
    z = np.linalg.solve(chol, np.asarray(x, dtype=np.float64) - mean)
    d = len(mean)
    return float(-0.5 * z @ z - np.log(np.diag(chol)).sum() - 0.5 * d * math.log(TAU))


def gaussian_pdf_direct(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Textbook density with an explicit determinant and inverse."""
    diff = np.asarray(x, dtype=np.float64) - mean
    d = len(mean)
    norm = 1.0 / math.sqrt(TAU ** d * np.linalg.det(cov))
    return float(norm * math.exp(-0.5 * diff @ np.linalg.inv(cov) @ diff))


def softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    e = np.exp(shifted)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Posterior over which candidate is attended
# ---------------------------------------------------------------------------
@dataclass
class SoftmaxScenario:
    query: np.ndarray  # h_i [d]
    candidates: np.ndarray  # h_j rows [m, d]
    mean: np.ndarray  # [2d]
    cov: np.ndarray  # [2d, 2d]
    prior: np.ndarray  # [m], sums to 1


def make_softmax_scenario(rng: np.random.Generator, m: int = 4, d: int = 2) -> SoftmaxScenario:
    prior = rng.uniform(0.1, 1.0, size=m)
    return SoftmaxScenario(
        query=rng.standard_normal(d),
        candidates=rng.standard_normal((m, d)),
        mean=rng.standard_normal(2 * d) * 0.5,
        cov=random_spd(rng, 2 * d, 0.5),
        prior=prior / prior.sum(),
    )


def bayes_posterior(s: SoftmaxScenario) -> np.ndarray:
    joint = np.array(
        [gaussian_pdf_direct(np.concatenate([s.query, h_j]), s.mean, s.cov) * s.prior[j] for j, h_j in enumerate(s.candidates)]
    )
    return joint / joint.sum()


def softmax_posterior(s: SoftmaxScenario) -> np.ndarray:
    scores = np.array(
        [gaussian_logpdf(np.concatenate([s.query, h_j]), s.mean, s.cov) + math.log(s.prior[j]) for j, h_j in enumerate(s.candidates)]
    )
    return softmax(scores)


def check_softmax_posterior(scenario: SoftmaxScenario) -> float:
    require_pd(scenario.cov, "covariance")
    return float(np.max(np.abs(bayes_posterior(scenario) - softmax_posterior(scenario))))


# ---------------------------------------------------------------------------
# Dot-product attention from a joint Gaussian over (h_i, h_j)
# ---------------------------------------------------------------------------
@dataclass
class GaussianBlockParams:
    b_q: np.ndarray  # [d]
    b_k: np.ndarray  # [d]
    V: np.ndarray  # [d, d] query-query precision block
    W_q: np.ndarray  # [d, d]
    W_k: np.ndarray  # [d, d]

    @property
    def dim(self) -> int:
        return len(self.b_q)

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.b_q, self.b_k])

    def precision(self) -> np.ndarray:
        cross = -self.W_q.T @ self.W_k
        return np.block([[self.V, cross], [cross.T, self.W_k.T @ self.W_k]])

    def covariance(self) -> np.ndarray:
        precision = self.precision()
        require_pd(precision, "precision")
        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + cov.T)
        require_pd(cov, "covariance")
        return cov

    def query(self, h_i: np.ndarray) -> np.ndarray:
        return self.W_q @ (h_i - self.b_q)

    def key(self, h_j: np.ndarray) -> np.ndarray:
        return self.W_k @ (h_j - self.b_k)


def make_block_params(rng: np.random.Generator, d: int = 2) -> GaussianBlockParams:
    """V = W_qᵀW_q + AᵀA + I keeps the Schur complement of the key block positive definite."""
    w_q = rng.standard_normal((d, d)) * 0.7
    w_k = rng.standard_normal((d, d)) * 0.7 + np.eye(d)
    return GaussianBlockParams(
        b_q=rng.standard_normal(d) * 0.5,
        b_k=rng.standard_normal(d) * 0.5,
        V=w_q.T @ w_q + random_spd(rng, d, 0.5),
        W_q=w_q,
        W_k=w_k,
    )


def dot_product_residuals(params: GaussianBlockParams, h_i: np.ndarray, h_js: np.ndarray) -> np.ndarray:
    """log-density minus (qᵀk − ½kᵀk) for every h_j."""
    cov = params.covariance()
    q = params.query(h_i)
    out = []
    for h_j in np.atleast_2d(h_js):
        k = params.key(h_j)
        log_density = gaussian_logpdf(np.concatenate([h_i, h_j]), params.mean, cov)
        out.append(log_density - (q @ k - 0.5 * k @ k))
    return np.array(out)


def check_dot_product_reduction(params: GaussianBlockParams, h_i: np.ndarray, h_js: np.ndarray) -> float:
    residuals = dot_product_residuals(params, h_i, h_js)
    return float(residuals.max() - residuals.min())


# ---------------------------------------------------------------------------
# Class posterior of a two-class Gaussian: sigmoid of a biaffine / affine form
# ---------------------------------------------------------------------------
@dataclass
class Biaffine:
    V: np.ndarray
    w: np.ndarray
    b: float

    def __call__(self, x: np.ndarray) -> float:
        return float(x @ self.V @ x + self.w @ x + self.b)


def class_log_likelihood(mu: np.ndarray, cov: np.ndarray) -> Biaffine:
    """log N(x; mu, cov) as xᵀVx + wᵀx + b."""
    require_pd(cov, "class covariance")
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    d = len(mu)
    return Biaffine(
        V=-0.5 * inv,
        w=inv @ mu,
        b=float(-0.5 * mu @ inv @ mu - 0.5 * (d * math.log(TAU) + logdet)),
    )


def posterior_logit(mu0: np.ndarray, mu1: np.ndarray, cov0: np.ndarray, cov1: np.ndarray, p: float) -> Biaffine:
    """Biaffine z with P(f = 1 | x) = sigmoid(z(x))."""
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"prior p must lie in (0, 1), got {p}")
    one, zero = class_log_likelihood(mu1, cov1), class_log_likelihood(mu0, cov0)
    return Biaffine(V=one.V - zero.V, w=one.w - zero.w, b=one.b - zero.b + math.log(p) - math.log1p(-p))


def bayes_class_posterior(x: np.ndarray, mu0, mu1, cov0, cov1, p: float) -> float:
    l1 = gaussian_pdf_direct(x, mu1, cov1) * p
    l0 = gaussian_pdf_direct(x, mu0, cov0) * (1.0 - p)
    return l1 / (l1 + l0)


@dataclass
class SigmoidLemmaResult:
    biaffine_deviation: float
    affine_deviation: float
    quadratic_norm: float


def check_sigmoid_lemmas(
    mu0: np.ndarray, mu1: np.ndarray, cov0: np.ndarray, cov1: np.ndarray, p: float, xs: np.ndarray
) -> SigmoidLemmaResult:
    """
    Bayes posterior vs sigmoid(biaffine) and vs sigmoid(affine), the affine form
    being the biaffine with its quadratic part dropped.
    """
    z = posterior_logit(mu0, mu1, cov0, cov1, p)
    affine = Biaffine(V=np.zeros_like(z.V), w=z.w, b=z.b)
    bi_dev, aff_dev = 0.0, 0.0
    for x in np.atleast_2d(xs):
        truth = bayes_class_posterior(x, mu0, mu1, cov0, cov1, p)
        bi_dev = max(bi_dev, abs(float(sigmoid_values(z(x))) - truth))
        aff_dev = max(aff_dev, abs(float(sigmoid_values(affine(x))) - truth))
    return SigmoidLemmaResult(bi_dev, aff_dev, float(np.abs(z.V).max()))


# ---------------------------------------------------------------------------
# Binary pair feature: the order-score shape
# ---------------------------------------------------------------------------
@dataclass
class BernoulliScenario:
    mu0: np.ndarray
    mu1: np.ndarray
    cov: np.ndarray
    p: float
    xs: np.ndarray  # [h_i; h_j] samples


def make_bernoulli_scenario(rng: np.random.Generator, d: int = 2, samples: int = 20) -> BernoulliScenario:
    return BernoulliScenario(
        mu0=rng.standard_normal(2 * d) * 0.5,
        mu1=rng.standard_normal(2 * d) * 0.5,
        cov=random_spd(rng, 2 * d, 0.5),
        p=float(rng.uniform(0.2, 0.8)),
        xs=rng.standard_normal((samples, 2 * d)),
    )


@dataclass
class BernoulliResult:
    normalization_deviation: float
    bayes_deviation: float


def check_bernoulli_feature(s: BernoulliScenario) -> BernoulliResult:
    """log P(f = y | x) from the order-score formula vs the Bayes posterior, plus normalization."""
    z = posterior_logit(s.mu0, s.mu1, s.cov, s.cov, s.p)
    norm_dev, bayes_dev = 0.0, 0.0
    for x in s.xs:
        logit = float(z.w @ x + z.b)
        log_one = float(order_score(1.0, logits=logit))
        log_zero = float(order_score(0.0, logits=logit))
        norm_dev = max(norm_dev, abs(math.exp(log_one) + math.exp(log_zero) - 1.0))
        truth = bayes_class_posterior(x, s.mu0, s.mu1, s.cov, s.cov, s.p)
        bayes_dev = max(bayes_dev, abs(log_one - math.log(truth)), abs(log_zero - math.log1p(-truth)))
    return BernoulliResult(norm_dev, bayes_dev)


# ---------------------------------------------------------------------------
# Log-normal density forms
# ---------------------------------------------------------------------------
def _check_lognormal_domain(x, sigma2) -> None:
    if np.any(np.asarray(x) <= 0):
        raise InvalidInputError("log-normal density needs x > 0")
    if np.any(np.asarray(sigma2) <= 0):
        raise InvalidInputError("log-normal density needs sigma^2 > 0")


def lognormal_pdf(x, mu, sigma2):
    _check_lognormal_domain(x, sigma2)
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-((np.log(x) - mu) ** 2) / (2.0 * sigma2)) / (x * np.sqrt(TAU * sigma2))


def lognormal_pdf_shifted(x, mu, sigma2):
    """Same density written around μ' = μ − σ², without the 1/x factor."""
    _check_lognormal_domain(x, sigma2)
    shifted = mu - sigma2
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-((np.log(x) - shifted) ** 2) / (2.0 * sigma2) - shifted) / np.sqrt(TAU * sigma2 * np.exp(sigma2))


def check_lognormal_forms(x, mu, sigma2) -> float:
    standard = lognormal_pdf(x, mu, sigma2)
    rewritten = lognormal_pdf_shifted(x, mu, sigma2)
    return float(np.max(np.abs(rewritten - standard) / np.abs(standard)))


# ---------------------------------------------------------------------------
# Log-normal pair feature conditioned on the hidden states: the distance-score shape
# ---------------------------------------------------------------------------
@dataclass
class JointLogNormalParams:
    b_f: float
    b_h: np.ndarray  # [D]
    cov: np.ndarray  # [(1 + D), (1 + D)], ln f first

    @property
    def w_ff(self) -> float:
        return float(self.cov[0, 0])

    @property
    def w_hf(self) -> np.ndarray:
        return self.cov[1:, 0]

    @property
    def W_hh(self) -> np.ndarray:
        return self.cov[1:, 1:]


def make_joint_params(rng: np.random.Generator, dim_h: int = 3) -> JointLogNormalParams:
    return JointLogNormalParams(
        b_f=float(rng.standard_normal()), b_h=rng.standard_normal(dim_h) * 0.5, cov=random_spd(rng, dim_h + 1, 0.5)
    )


def conditional_moments(params: JointLogNormalParams, h: np.ndarray) -> Tuple[float, float]:
    """Mean and variance of ln f given h (Schur complement)."""
    require_pd(params.cov, "joint covariance")
    solve = np.linalg.solve(params.W_hh, params.w_hf)
    mean = params.b_f + float(solve @ (h - params.b_h))
    var = params.w_ff - float(params.w_hf @ solve)
    return mean, var


@dataclass
class AffineForm:
    w: np.ndarray
    b: float

    def __call__(self, h: np.ndarray) -> float:
        return float(self.w @ h + self.b)


def distance_affine(params: JointLogNormalParams) -> Tuple[AffineForm, float]:
    """The affine μ''(h) = μ'(h) − σ²' and θ² = 1/σ²'."""
    solve = np.linalg.solve(params.W_hh, params.w_hf)
    var = params.w_ff - float(params.w_hf @ solve)
    return AffineForm(w=solve, b=params.b_f - float(solve @ params.b_h) - var), 1.0 / var


@dataclass
class ConditionalResult:
    conditional_deviation: float
    feature_deviation: float


def check_conditional_lognormal(
    params: JointLogNormalParams,
    zs: np.ndarray,
    hs: np.ndarray,
    distance_fn: DistanceFn = distance_score,
) -> ConditionalResult:
    """
    (a) log N(z; μ', σ²') against log joint − log marginal of h;
    (b) the log-density of f = e^z against distance_fn(ln f, affine(h), θ) − affine(h),
        compared by differencing consecutive z values so the constant drops out.
    """
    mean = np.concatenate([[params.b_f], params.b_h])
    affine, theta2 = distance_affine(params)
    theta = math.sqrt(theta2)
    cond_dev, feat_dev = 0.0, 0.0
    for h in np.atleast_2d(hs):
        mu_c, var_c = conditional_moments(params, h)
        values_f = []
        values_form = []
        for z in zs:
            cond = -0.5 * (z - mu_c) ** 2 / var_c - 0.5 * math.log(TAU * var_c)
            ratio = gaussian_logpdf(np.concatenate([[z], h]), mean, params.cov) - gaussian_logpdf(h, params.b_h, params.W_hh)
            cond_dev = max(cond_dev, abs(cond - ratio))
            # change of variables: density of f at e^z is the density of ln f at z divided by e^z
            values_f.append(cond - z)
            a = affine(h)
            values_form.append(float(distance_fn(z, a, theta)) - a)
        diffs_f = np.diff(values_f)
        diffs_form = np.diff(values_form)
        if len(diffs_f):
            feat_dev = max(feat_dev, float(np.max(np.abs(diffs_f - diffs_form))))
    return ConditionalResult(cond_dev, feat_dev)


def fitted_curvature(params: JointLogNormalParams, h: np.ndarray, zs: Sequence[float], distance_fn: DistanceFn = distance_score) -> float:
    """Quadratic coefficient in ln f of the feature form, fitted through three points."""
    affine, theta2 = distance_affine(params)
    a = affine(h)
    values = [float(distance_fn(z, a, math.sqrt(theta2))) - a for z in zs[:3]]
    return float(np.polyfit(np.asarray(zs[:3], dtype=np.float64), values, 2)[0])


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------
@dataclass
class OracleResult:
    name: str
    tolerance: float
    deviation: float
    expect: str = "below"  # "above" marks a negative control

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.deviation):
            return False
        if self.expect == "above":
            return self.deviation > self.tolerance
        return self.deviation < self.tolerance


def run_all(seed: int = 0, distance_fn: DistanceFn = distance_score) -> List[OracleResult]:
    rng = np.random.default_rng(seed)
    results: List[OracleResult] = []

    dev = max(check_softmax_posterior(make_softmax_scenario(rng, m=int(rng.integers(2, 6)))) for _ in range(20))
    results.append(OracleResult("softmax_posterior", 1e-12, dev))

    spread = 0.0
    for d in (1, 2, 3):
        params = make_block_params(rng, d)
        spread = max(spread, check_dot_product_reduction(params, rng.standard_normal(d), rng.standard_normal((10, d))))
    results.append(OracleResult("dot_product_reduction", 1e-10, spread))

    mu0, mu1 = rng.standard_normal(2), rng.standard_normal(2)
    cov = random_spd(rng, 2, 0.5)
    xs = rng.standard_normal((50, 2))
    equal = check_sigmoid_lemmas(mu0, mu1, cov, cov, 0.3, xs)
    results.append(OracleResult("sigmoid_affine_equal_cov", 1e-10, equal.affine_deviation))
    results.append(OracleResult("sigmoid_quadratic_vanishes", 1e-12, equal.quadratic_norm))
    unequal = check_sigmoid_lemmas(mu0, mu1, cov, random_spd(rng, 2, 1.0), 0.3, xs)
    results.append(OracleResult("sigmoid_biaffine_unequal_cov", 1e-10, unequal.biaffine_deviation))
    results.append(OracleResult("sigmoid_affine_unequal_cov_control", 1e-6, unequal.affine_deviation, expect="above"))

    bern = check_bernoulli_feature(make_bernoulli_scenario(rng))
    results.append(OracleResult("bernoulli_normalization", 1e-12, bern.normalization_deviation))
    results.append(OracleResult("bernoulli_vs_bayes", 1e-10, bern.bayes_deviation))

    x = rng.uniform(0.05, 20.0, size=100)
    mu = rng.uniform(-2.0, 2.0, size=100)
    sigma2 = rng.uniform(0.1, 2.0, size=100)
    results.append(OracleResult("lognormal_forms", 1e-10, check_lognormal_forms(x, mu, sigma2)))

    joint = make_joint_params(rng)
    hs = rng.standard_normal((5, len(joint.b_h)))
    zs = np.linspace(-1.5, 1.5, 7)
    cond = check_conditional_lognormal(joint, zs, hs, distance_fn)
    results.append(OracleResult("conditional_lognormal_density", 1e-10, cond.conditional_deviation))
    results.append(OracleResult("distance_score_shape", 1e-10, cond.feature_deviation))
    _, theta2 = distance_affine(joint)
    curvature = fitted_curvature(joint, hs[0], [-1.0, 0.0, 1.0], distance_fn)
    results.append(OracleResult("distance_score_curvature", 1e-8, abs(curvature + theta2 / 2.0)))

    for r in results:
        logger.debug("%s: deviation %.3e (tolerance %.1e, %s)", r.name, r.deviation, r.tolerance, "ok" if r.passed else "FAIL")
    return results


def results_frame(results: Sequence[OracleResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "check": r.name,
                "tolerance": r.tolerance,
                "deviation": r.deviation,
                "expect": r.expect,
                "status": "pass" if r.passed else "FAIL",
            }
            for r in results
        ],
        columns=["check", "tolerance", "deviation", "expect", "status"],
    )


def oracle_table(results: Sequence[OracleResult]) -> str:
    return results_frame(results).to_string(index=False, float_format=lambda v: f"{v:.3e}")
