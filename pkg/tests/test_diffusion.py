import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from prefdistill.diffusion import (PromptPrior, analytic_epsilon, forward_noise, log_density_t,
                                   make_schedule, predict_x0)
from prefdistill.numcore import ShapeError, finite_diff, make_rng, max_rel_error


def random_prior(rng, d=5, m=None):
    m = m or int(rng.integers(1, 4))
    return PromptPrior(0, rng.dirichlet(np.ones(m)), rng.standard_normal((m, d)),
                       rng.uniform(0.05, 1.5, (m, d)))


def scipy_log_density(prior, x, t, sched):
    """Independent evaluation of the noised mixture density."""
    a, s = sched.coeffs(t)
    dens = [w * multivariate_normal(a * mu, np.diag(a * a * v + s * s)).pdf(x)
            for w, mu, v in zip(prior.weights, prior.means, prior.variances)]
    return np.log(sum(dens))


# ---------------------------------------------------------------- schedules

@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [2, 10, 1000])
def test_schedule_is_variance_preserving_and_monotone(kind, T):
    s = make_schedule(kind, T)
    assert np.max(np.abs(s.alpha ** 2 + s.sigma ** 2 - 1)) < 1e-12
    assert np.all(np.diff(s.alpha) < 0)
    assert abs(s.alpha[0] - 1) < 1e-6
    assert np.all(s.alpha > 0) and np.all(s.sigma < 1)


def test_linear_schedule_end_is_small():
    s = make_schedule("linear", 1000)
    assert s.alpha[-1] < 0.2


def test_schedule_rejects_tiny_T_and_unknown_kind():
    with pytest.raises(ValueError):
        make_schedule("linear", 1)
    with pytest.raises(ValueError):
        make_schedule("sigmoid", 100)


# ---------------------------------------------------------------- priors

def test_prior_validation():
    with pytest.raises(ValueError):
        PromptPrior(0, np.array([0.5, 0.6]), np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        PromptPrior(0, np.array([1.0]), np.zeros((1, 3)), np.array([[1.0, 0.0, 1.0]]))
    with pytest.raises(ShapeError):
        PromptPrior(0, np.array([1.0]), np.zeros((1, 3)), np.ones((1, 4)))


def test_prior_json_round_trip():
    p = random_prior(make_rng(1, "p"), d=4, m=2)
    q = PromptPrior.from_json(p.to_json())
    assert np.array_equal(p.means, q.means) and np.array_equal(p.variances, q.variances)
    assert np.array_equal(p.weights, q.weights)


# ---------------------------------------------------------------- forward noise

def test_forward_noise_small_t_keeps_signal():
    s = make_schedule("linear", 1000)
    x0 = np.arange(4.0)
    assert np.allclose(forward_noise(x0, 0, np.ones(4), s).x_t, x0, atol=1e-12)


def test_forward_noise_zero_eps_scales():
    s = make_schedule("cosine", 100)
    x0 = np.array([1.0, -2.0])
    a, _ = s.coeffs(40)
    assert np.array_equal(forward_noise(x0, 40, np.zeros(2), s).x_t, a * x0)


def test_forward_noise_inverts():
    s = make_schedule("linear", 1000)
    rng = make_rng(2, "fn")
    for t in (1, 300, 999):
        x0, eps = rng.standard_normal(6), rng.standard_normal(6)
        ns = forward_noise(x0, t, eps, s)
        a, sg = s.coeffs(t)
        assert np.allclose((ns.x_t - sg * ns.eps) / a, x0, rtol=0, atol=1e-12)


def test_forward_noise_shape_mismatch():
    with pytest.raises(ShapeError):
        forward_noise(np.zeros(3), 5, np.zeros(4), make_schedule())


# ---------------------------------------------------------------- epsilon oracle

def test_unit_gaussian_epsilon_is_sigma_x():
    s = make_schedule("linear", 1000)
    prior = PromptPrior.single(np.zeros(3), 1.0)
    x = np.array([0.3, -1.2, 2.0])
    for t in (1, 500, 1000):
        assert np.allclose(analytic_epsilon(prior, x, t, s), s.coeffs(t)[1] * x, atol=1e-14)


def test_epsilon_is_minus_sigma_score_by_finite_differences():
    s = make_schedule("linear", 1000)
    rng = make_rng(3, "eps")
    for _ in range(30):
        prior = random_prior(rng)
        t = int(rng.integers(1, 1001))
        x = rng.standard_normal(5)
        score = finite_diff(lambda v: log_density_t(prior, v, t, s), x)
        assert max_rel_error(analytic_epsilon(prior, x, t, s), -s.coeffs(t)[1] * score) < 1e-5


def test_separated_components_reduce_to_nearest():
    s = make_schedule("linear", 1000)
    t = 100
    a, _ = s.coeffs(t)
    mu = np.array([[10.0, 10.0], [-10.0, -10.0]])
    mix = PromptPrior(0, np.array([0.5, 0.5]), mu, np.full((2, 2), 0.1))
    single = PromptPrior.single(mu[0], 0.1)
    x = a * mu[0]
    assert np.allclose(analytic_epsilon(mix, x, t, s), analytic_epsilon(single, x, t, s),
                       atol=1e-12)


def test_epsilon_accepts_view_stacks_and_batches():
    s = make_schedule()
    prior = random_prior(make_rng(4, "p"), d=8)
    x = make_rng(4, "x").standard_normal((3, 2, 4))
    e = analytic_epsilon(prior, x, 200, s)
    assert e.shape == x.shape
    assert np.allclose(e[1], analytic_epsilon(prior, x[1].reshape(-1), 200, s).reshape(2, 4))


def test_epsilon_never_nan_far_out():
    s = make_schedule()
    prior = PromptPrior(0, np.array([0.5, 0.5]), np.array([[0.0], [1.0]]),
                        np.array([[1e-6], [1e-6]]))
    e = analytic_epsilon(prior, np.array([1e4]), 1, s)
    assert np.all(np.isfinite(e))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.integers(1, 1000))
def test_score_identity_property(seed, t):
    s = make_schedule("cosine", 1000)
    rng = make_rng(seed, "prop")
    prior = random_prior(rng, d=3)
    x = rng.standard_normal(3) * 1.5
    fd = finite_diff(lambda v: log_density_t(prior, v, t, s), x)
    assert max_rel_error(analytic_epsilon(prior, x, t, s), -s.coeffs(t)[1] * fd) < 1e-5


# ---------------------------------------------------------------- x0 prediction

def test_predict_x0_inverts_with_true_eps():
    s = make_schedule()
    x0, eps = np.array([1.0, 2.0, -3.0]), np.array([0.1, -0.4, 0.9])
    ns = forward_noise(x0, 600, eps, s)
    assert np.allclose(predict_x0(ns.x_t, 600, eps, s), x0, atol=1e-12)


def test_predict_x0_zero_eps():
    s = make_schedule()
    x = np.array([0.4, -0.2])
    assert np.allclose(predict_x0(x, 10, np.zeros(2), s), x / s.coeffs(10)[0])


def test_predict_x0_is_gaussian_posterior_mean():
    # x0 ~ N(mu, v), x_t = a x0 + s eps  =>  E[x0|x_t] = mu + a v (x_t - a mu) / (a^2 v + s^2)
    s = make_schedule()
    mu, v = np.array([0.5, -1.0]), np.array([0.3, 2.0])
    prior = PromptPrior.single(mu, v)
    x = np.array([1.5, 0.7])
    for t in (5, 250, 900):
        a, sg = s.coeffs(t)
        post = mu + a * v * (x - a * mu) / (a * a * v + sg * sg)
        got = predict_x0(x, t, analytic_epsilon(prior, x, t, s), s)
        assert np.allclose(got, post, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- densities

def test_log_density_unit_gaussian_at_origin():
    s = make_schedule()
    prior = PromptPrior.single(np.zeros(4), 1.0)
    for t in (1, 400, 1000):
        assert log_density_t(prior, np.zeros(4), t, s) == pytest.approx(-2 * np.log(2 * np.pi),
                                                                        abs=1e-12)


def test_identical_components_equal_single():
    s = make_schedule()
    mu, v = np.array([0.2, -0.5]), np.array([0.4, 0.9])
    mix = PromptPrior(0, np.array([0.3, 0.7]), np.stack([mu, mu]), np.stack([v, v]))
    x = np.array([0.1, 0.3])
    assert log_density_t(mix, x, 77, s) == pytest.approx(
        log_density_t(PromptPrior.single(mu, v), x, 77, s), abs=1e-12)


def test_log_density_matches_scipy():
    s = make_schedule("cosine", 1000)
    rng = make_rng(5, "ld")
    for _ in range(20):
        prior = random_prior(rng, d=3)
        t = int(rng.integers(1, 1001))
        x = rng.standard_normal(3)
        assert log_density_t(prior, x, t, s) == pytest.approx(scipy_log_density(prior, x, t, s),
                                                              rel=1e-10, abs=1e-10)


def test_density_matches_monte_carlo_histogram():
    s = make_schedule()
    prior = PromptPrior(0, np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]),
                        np.array([[0.2], [0.5]]))
    t = 300
    rng = make_rng(6, "mc")
    n = 400_000
    comp = rng.random(n) < 0.3
    x0 = np.where(comp, rng.normal(-1.0, np.sqrt(0.2), n), rng.normal(1.5, np.sqrt(0.5), n))
    xt = forward_noise(x0, t, rng.standard_normal(n), s).x_t
    edges = np.linspace(-3, 3, 61)
    counts, _ = np.histogram(xt, bins=edges)
    hist = counts / (n * np.diff(edges))
    centers = 0.5 * (edges[1:] + edges[:-1])
    dens = np.exp(log_density_t(prior, centers[:, None], t, s))
    assert np.max(np.abs(hist - dens)) < 1e-2
    # the grid integral of the closed form is one to quadrature accuracy
    fine = np.linspace(-8, 8, 4001)
    total = np.trapezoid(np.exp(log_density_t(prior, fine[:, None], t, s)), fine)
    assert total == pytest.approx(1.0, abs=1e-2)


def test_vp_closure_unit_gaussian_variance():
    s = make_schedule()
    for t in (1, 500, 1000):
        a, sg = s.coeffs(t)
        assert a * a * 1.0 + sg * sg == pytest.approx(1.0, abs=1e-12)
        # the noised density is the standard normal exactly
        assert log_density_t(PromptPrior.single(np.zeros(1), 1.0), np.array([0.7]), t, s) == \
            pytest.approx(norm.logpdf(0.7), abs=1e-12)


def test_delta_prior_epsilon_recovers_noise():
    s = make_schedule()
    mu = np.array([0.5, -0.3, 1.0])
    prior = PromptPrior.single(mu, 1e-6)
    rng = make_rng(7, "delta")
    for t in (50, 500, 950):
        eps = rng.standard_normal((2000, 3))
        xt = forward_noise(np.broadcast_to(mu, eps.shape), t, eps, s).x_t
        est = analytic_epsilon(prior, xt, t, s)
        assert np.max(np.abs(est - eps)) < 1e-2
