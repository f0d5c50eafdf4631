import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from diamond_maps import GaussianMixture, LinearReward, MixtureOracle, QuadraticReward, RadialReward, Scheduler
from diamond_maps import RewardCurvatureError, ScheduleDomainError, zero_reward
from diamond_maps.bench.metrics import fd_grad_check
from diamond_maps.bench.problems import gaussian, point_mass, standard_normal_1d


def brute_log_marginal(mix, sched, x, t):
    """Direct density of the noised mixture, component by component."""
    a, s = sched.alpha(t), sched.sigma(t)
    d = mix.dim
    terms = [
        np.log(w) + multivariate_normal(a * m, a * a * c + s * s * np.eye(d)).logpdf(x)
        for w, m, c in zip(mix.weights, mix.means, mix.covs)
    ]
    return logsumexp(terms)


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))
    gm = GaussianMixture.from_dict({"weights": [2, 2], "means": [[0.0], [1.0]], "covs": [[[1.0]], [[1.0]]]})
    assert np.allclose(gm.weights, 0.5)
    assert GaussianMixture.from_dict(gm.to_dict()).dim == 1


def test_log_marginal_closed_form(oracle_1d, oracle_gm, gm2, linear):
    # N(0,1) at t=0.5: marginal N(0, 0.5)
    assert oracle_1d.log_marginal(np.array([0.0]), 0.5) == pytest.approx(-0.5 * np.log(2 * np.pi * 0.5), abs=1e-14)
    x = np.array([0.3, -0.8])
    for t in [0.1, 0.5, 0.9]:
        assert oracle_gm.log_marginal(x, t) == pytest.approx(brute_log_marginal(gm2, linear, x, t), abs=1e-10)
    near = oracle_1d.log_marginal(np.array([0.4]), linear.t_min)
    assert near == pytest.approx(multivariate_normal(0, 1).logpdf(0.4), abs=1e-2)


def test_log_marginal_monte_carlo(linear):
    mix = GaussianMixture(np.array([0.5, 0.5]), np.array([[1.5], [-1.5]]), np.full((2, 1, 1), 0.2))
    oracle = MixtureOracle(mix, linear)
    t = 0.4
    rng = np.random.default_rng(0)
    z = mix.sample(1_000_000, rng)
    a, s = linear.alpha(t), linear.sigma(t)
    dens = np.exp(-0.5 * (a * z[:, 0] / s) ** 2) / np.sqrt(2 * np.pi * s * s)
    est, se = dens.mean(), dens.std() / np.sqrt(dens.size)
    assert abs(np.exp(oracle.log_marginal(np.array([0.0]), t)) - est) <= 3 * se


def test_fields_consistent(oracle_gm, linear, rng):
    x = rng.standard_normal((50, 2))
    for t in [0.05, 0.5, 0.95]:
        a, s = linear.alpha(t), linear.sigma(t)
        den = oracle_gm.denoiser(x, t)
        np.testing.assert_allclose(oracle_gm.score(x, t), (a * den - x) / s**2, atol=1e-12 * max(1, 1 / s**2))
        ac, bc = linear.velocity_coeffs(t)
        np.testing.assert_allclose(oracle_gm.velocity(x, t), ac * x + bc * oracle_gm.score(x, t), atol=1e-10)


def test_score_is_gradient_of_log_marginal(oracle_gm):
    x = np.array([0.2, 0.1])
    for t in [0.2, 0.7]:
        err = fd_grad_check(lambda p: oracle_gm.log_marginal(p, t), x, 1e-5, grad=oracle_gm.score(x, t))
        assert err <= 1e-5


def test_denoiser_examples(oracle_1d, oracle_point, linear):
    assert oracle_1d.denoiser(np.array([1.0]), 0.5)[0] == pytest.approx(1.0, abs=1e-14)
    xs = np.random.default_rng(0).standard_normal((10, 2))
    np.testing.assert_allclose(oracle_point.denoiser(xs, 0.4), np.tile([0.7, -0.3], (10, 1)), atol=1e-14)
    g = MixtureOracle(gaussian([0.3, -0.2], np.eye(2) * 0.5), linear)
    mode = linear.alpha(0.6) * np.array([0.3, -0.2])
    np.testing.assert_allclose(g.score(mode, 0.6), 0.0, atol=1e-13)


def test_jacobians_match_fd(oracle_gm):
    x = np.array([0.4, -0.1])
    for t in [0.3, 0.8]:
        mean, jac = oracle_gm.denoiser_jacobian(x, t)
        for i in range(2):
            err = fd_grad_check(lambda p: oracle_gm.denoiser(p, t)[i], x, 1e-6, grad=jac[i])
            assert err <= 1e-5
        _, jv = oracle_gm.velocity_jacobian(x, t)
        for i in range(2):
            assert fd_grad_check(lambda p: oracle_gm.velocity(p, t)[i], x, 1e-6, grad=jv[i]) <= 1e-5
        js = oracle_gm.score_jacobian(x, t)
        for i in range(2):
            assert fd_grad_check(lambda p: oracle_gm.score(p, t)[i], x, 1e-6, grad=js[i]) <= 1e-5


def test_conditional_velocity(oracle_gm, linear, rng):
    t = 0.37
    z = np.array([1.0, 1.0])
    np.testing.assert_allclose(oracle_gm.conditional_velocity(t * z, z, t), z, atol=1e-14)
    x = linear.alpha(t) * z
    np.testing.assert_allclose(oracle_gm.conditional_velocity(x, x / linear.alpha(t), t), x / t, atol=1e-14)
    # marginal velocity = posterior average of conditional velocities
    x = np.array([0.3, -0.4])
    zs = oracle_gm.sample_posterior(np.repeat(x[None], 200_000, 0), t, rng)
    cv = oracle_gm.conditional_velocity(x, zs, t)
    se = cv.std(0) / np.sqrt(len(cv))
    assert np.all(np.abs(cv.mean(0) - oracle_gm.velocity(x, t)) <= 3 * se)


def test_posterior_examples(oracle_1d, oracle_gm, gm2, linear, rng):
    post = oracle_1d.posterior(np.array([1.0]), 0.5)
    assert post.means[0, 0] == pytest.approx(1.0) and post.covs[0, 0, 0] == pytest.approx(0.5)
    early = oracle_gm.posterior(np.array([0.3, 0.2]), 1e-6)
    np.testing.assert_allclose(early.weights, gm2.weights, atol=1e-5)
    np.testing.assert_allclose(early.covs, gm2.covs, atol=1e-5)
    x = np.array([0.5, 0.1])
    np.testing.assert_allclose(oracle_gm.posterior(x, 0.4).mean(), oracle_gm.denoiser(x, 0.4), atol=1e-13)
    # Bayes-rule form of a component posterior
    t = 0.4
    a, s = linear.alpha(t), linear.sigma(t)
    post = oracle_gm.posterior(x, t)
    for k in range(2):
        prec = np.linalg.inv(gm2.covs[k]) + (a * a / s**2) * np.eye(2)
        ck = np.linalg.inv(prec)
        mk = ck @ (np.linalg.solve(gm2.covs[k], gm2.means[k]) + a / s**2 * x)
        np.testing.assert_allclose(post.covs[k], ck, atol=1e-12)
        np.testing.assert_allclose(post.means[k], mk, atol=1e-12)
    draws = oracle_gm.sample_posterior(np.repeat(x[None], 100_000, 0), t, rng)
    se = draws.std(0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(0) - post.mean()) <= 4 * se)


def test_posterior_point_mass(oracle_point):
    post = oracle_point.posterior(np.array([2.0, 2.0]), 0.5)
    np.testing.assert_allclose(post.means[0], [0.7, -0.3])
    np.testing.assert_allclose(post.covs[0], 0.0)


def test_domain_errors(oracle_1d):
    with pytest.raises(ScheduleDomainError):
        oracle_1d.denoiser(np.array([0.0]), 1.0)
    with pytest.raises(ScheduleDomainError):
        oracle_1d.log_marginal(np.array([0.0]), 1.5)


def test_tilt_linear(gm2):
    same = gm2.tilt_linear(np.zeros(2))
    np.testing.assert_allclose(same.weights, gm2.weights)
    np.testing.assert_allclose(same.means, gm2.means)
    t = standard_normal_1d().tilt_linear(np.array([1.0]))
    assert t.means[0, 0] == pytest.approx(1.0) and t.covs[0, 0, 0] == pytest.approx(1.0)
    sym = GaussianMixture(np.array([0.5, 0.5]), np.array([[1.0], [-1.0]]), np.full((2, 1, 1), 0.1))
    tilted = sym.tilt_linear(np.array([2.0]))
    expected = np.exp([2 + 0.2, -2 + 0.2])
    np.testing.assert_allclose(tilted.weights, expected / expected.sum(), rtol=1e-12)
    # cross-check the weights by self-normalized importance sampling
    z = sym.sample(400_000, np.random.default_rng(3))
    w = np.exp(2 * z[:, 0] - logsumexp(2 * z[:, 0]))
    assert np.sum(w[z[:, 0] > 0]) == pytest.approx(tilted.weights[0], abs=2e-3)


def test_value_exact_examples(oracle_1d, oracle_gm):
    v, g = oracle_1d.value_exact(np.array([1.0]), 0.5, LinearReward([1.0]))
    assert v == pytest.approx(1.25, abs=1e-14) and g[0] == pytest.approx(1.0, abs=1e-14)
    v0, g0 = oracle_gm.value_exact(np.array([0.2, 0.3]), 0.4, zero_reward(2))
    assert v0 == pytest.approx(0.0, abs=1e-14) and np.allclose(g0, 0.0, atol=1e-14)


@pytest.mark.parametrize(
    "reward",
    [LinearReward([0.8, -0.4]), QuadraticReward([[-1.0, 0.2], [0.2, -0.5]], [0.3, 0.1], 0.2), RadialReward([1, 0], 2.0)],
)
def test_value_exact_gradient_fd(oracle_gm, reward):
    for t in [0.2, 0.6]:
        x = np.array([0.3, -0.2])
        err = fd_grad_check(lambda p: oracle_gm.value_exact(p, t, reward), x, 1e-5)
        assert err <= 1e-6


def test_value_exact_matches_monte_carlo(oracle_gm, rng):
    reward = QuadraticReward([[-0.6, 0.1], [0.1, -0.3]], [0.5, -0.2], 0.1)
    x = np.array([0.4, 0.1])
    v_cf, g_cf = oracle_gm.value_exact(x, 0.5, reward)

    class Opaque:
        eval = reward.eval

    v_mc, g_mc = oracle_gm.value_exact(x, 0.5, Opaque(), n_mc=400_000, rng=rng)
    assert v_mc == pytest.approx(v_cf, abs=5e-3)
    np.testing.assert_allclose(g_mc, g_cf, atol=1e-2)


def test_value_curvature_error(oracle_gm):
    with pytest.raises(RewardCurvatureError):
        oracle_gm.value_exact(np.zeros(2), 0.3, QuadraticReward(np.eye(2) * 10.0, np.zeros(2)))


def test_value_ratio_identity(oracle_gm, gm2, linear, rng):
    c = np.array([0.8, 0.4])
    tilted = MixtureOracle(gm2.tilt_linear(c), linear)
    xs = rng.standard_normal((101, 2))
    t = 0.45
    v, _ = oracle_gm.value_exact(xs, t, LinearReward(c))
    diff = tilted.log_marginal(xs, t) - oracle_gm.log_marginal(xs, t) - v
    assert np.max(np.abs(diff[1:] - diff[0])) <= 1e-8


def test_guided_field_identity(oracle_gm, gm2, linear):
    c = np.array([0.8, 0.4])
    tilted = MixtureOracle(gm2.tilt_linear(c), linear)
    g = np.stack(np.meshgrid(np.linspace(-2, 2, 7), np.linspace(-2, 2, 7)), -1).reshape(-1, 2)
    for t in [0.1, 0.5, 0.9]:
        _, grad = oracle_gm.value_exact(g, t, LinearReward(c))
        b = linear.velocity_coeffs(t)[1]
        np.testing.assert_allclose(tilted.velocity(g, t), oracle_gm.velocity(g, t) + b * grad, atol=1e-8)


def test_late_time_limits(oracle_gm, gm2, linear):
    t = linear.t_max
    x = np.array([0.4, -0.3])
    assert np.allclose(oracle_gm.denoiser(x, t), x, atol=5e-3)
    mix_score = MixtureOracle(gm2, Scheduler("linear", t_min=1e-6)).score(x, 1 - 1e-6)
    direct = np.zeros(2)
    pdf = [w * multivariate_normal(m, c).pdf(x) for w, m, c in zip(gm2.weights, gm2.means, gm2.covs)]
    for w_pdf, m, c in zip(pdf, gm2.means, gm2.covs):
        direct += w_pdf * np.linalg.solve(c, m - x)
    direct /= sum(pdf)
    np.testing.assert_allclose(mix_score, direct, rtol=1e-4)
