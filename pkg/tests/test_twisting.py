"""Twist evaluation, normalizers, twisted sampling, checkpoints."""
import numpy as np
import pytest
from scipy import integrate

from twistpf.autodiff import DenseNet
from twistpf.core import GaussianKernel, RejectionSamplingError, SeedSpec
from twistpf.twisting import (ConstantTwist, GaussianTwist, NNTwist,
                              identity_twist, load_twist_params, mc_normalizer,
                              rejection_sample_twisted, save_twist_params,
                              simulate_twisted_paths)


@pytest.fixture
def kernel():
    return GaussianKernel(lambda x: 0.9 * x, var=0.3, dim=1)


def test_constant_twist_values():
    tw = ConstantTwist(np.array([0.0, 1.5, -2.0]))
    x = np.zeros((4, 2))
    assert np.all(tw.log_phi(1, x) == 1.5)
    assert np.all(tw.log_normalizer(2, x) == -2.0)
    assert np.all(identity_twist().log_phi(1, x) == 0.0)


def test_constant_twist_sampling_matches_kernel(kernel):
    tw = ConstantTwist(3.0)
    x = np.ones((5, 1))
    a = tw.sample_twisted(kernel, 1, x, np.random.default_rng(0))
    b = kernel.sample(np.random.default_rng(0), x)
    assert np.array_equal(a, b)


def test_gaussian_twist_normalizer_vs_quadrature(kernel):
    mu = np.array([[0.0], [0.7]])
    s2 = np.array([1.0, 0.4])
    tw = GaussianTwist(mu=mu, s2=s2, kernel=kernel, log_scale=np.array([0.0, 0.3]))
    x = np.array([[0.5]])
    got = tw.log_normalizer(1, x)

    def integrand(y):
        dens = np.exp(-0.5 * (y - 0.45) ** 2 / 0.3) / np.sqrt(2 * np.pi * 0.3)
        return np.exp(0.3 - 0.5 * (y - 0.7) ** 2 / 0.4) * dens

    want, _ = integrate.quad(integrand, -10, 10)
    assert np.allclose(got, np.log(want), atol=1e-8)


def test_gaussian_twist_normalizer_vs_monte_carlo(kernel):
    tw = GaussianTwist(mu=np.zeros((2, 1)), s2=np.array([1.0, 0.5]), kernel=kernel)
    x = np.array([[1.2]])
    rng = np.random.default_rng(1)
    mc = mc_normalizer(kernel, tw, 1, x, 200_000, rng)
    assert np.allclose(tw.log_normalizer(1, x), mc, atol=0.02)


def test_gaussian_twist_sampler_moments(kernel):
    s2 = 0.4
    tw = GaussianTwist(mu=np.full((2, 1), 2.0), s2=np.array([1.0, s2]), kernel=kernel)
    x = np.zeros((100_000, 1))
    y = tw.sample_twisted(kernel, 1, x, np.random.default_rng(2))
    c = kernel.var
    want_mean = (s2 * 0.0 + c * 2.0) / (c + s2)
    want_var = c * s2 / (c + s2)
    assert np.allclose(y.mean(), want_mean, atol=0.01)
    assert np.allclose(y.var(), want_var, atol=0.01)


def test_gaussian_twist_rejects_bad_variance(kernel):
    with pytest.raises(ValueError):
        GaussianTwist(mu=np.zeros((2, 1)), s2=np.array([1.0, 0.0]), kernel=kernel)


def test_rejection_sampler_matches_closed_form(kernel):
    """Rejection through a Gaussian-shaped twist must reproduce the exact
    twisted kernel, which is available in closed form."""
    s2 = 0.5
    tw = GaussianTwist(mu=np.full((2, 1), 1.0), s2=np.array([1.0, s2]), kernel=kernel)
    x = np.zeros((50_000, 1))
    y = rejection_sample_twisted(kernel, tw, 1, x, np.random.default_rng(3))
    c = kernel.var
    want_mean = c * 1.0 / (c + s2)
    want_var = c * s2 / (c + s2)
    assert np.allclose(y.mean(), want_mean, atol=0.02)
    assert np.allclose(y.var(), want_var, atol=0.02)


def test_rejection_sampler_reports_acceptance_rate(kernel):
    class Hopeless(GaussianTwist):
        def log_phi(self, k, x):
            return np.full(np.shape(x)[:-1], -200.0)

    tw = Hopeless(mu=np.zeros((2, 1)), s2=np.ones(2), kernel=kernel)
    with pytest.raises(RejectionSamplingError) as err:
        rejection_sample_twisted(kernel, tw, 1, np.zeros((3, 1)),
                                 np.random.default_rng(4), max_attempts=50)
    assert err.value.acceptance_rate == 0.0


def test_mc_normalizer_validates_inner_count(kernel):
    tw = ConstantTwist(0.0)
    with pytest.raises(ValueError):
        mc_normalizer(kernel, tw, 1, np.zeros((2, 1)), 0, np.random.default_rng(0))


def test_nn_twist_log_phi_bounds():
    rng = np.random.default_rng(5)
    net = DenseNet(3, 8, 1, rng=rng)
    vec = rng.normal(size=net.params.size)
    tw = NNTwist(net, vec, horizon=4, eps=1e-3)
    x = rng.normal(size=(100, 2)) * 5
    lp = tw.log_phi(2, x)
    assert np.all(lp <= 0.0)
    assert np.all(lp >= np.log(1e-3))


def test_nn_twist_normalizer_needs_rng():
    rng = np.random.default_rng(6)
    net = DenseNet(2, 4, 1, rng=rng)
    tw = NNTwist(net, np.zeros(net.params.size), horizon=3)
    with pytest.raises(ValueError):
        tw.log_normalizer(1, np.zeros((2, 1)))


def test_nn_twist_validates_eps():
    net = DenseNet(2, 4, 1)
    with pytest.raises(ValueError):
        NNTwist(net, np.zeros(net.params.size), horizon=3, eps=1.5)


def test_simulate_twisted_paths_identity_matches_untwisted(kernel):
    from twistpf.core import FeynmanKacModel, simulate_paths
    model = FeynmanKacModel(dim=1, horizon=5, init=np.zeros(1), kernel=kernel,
                            log_potentials=lambda k, x: np.zeros(x.shape[:-1]))
    a = simulate_twisted_paths(model, identity_twist(), 7, np.random.default_rng(8))
    b = simulate_paths(model, np.random.default_rng(8), 7)
    assert np.array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    net = DenseNet(4, 6, 1, rng=rng)
    vec = rng.normal(size=net.params.size)
    path = tmp_path / "twist.bin"
    save_twist_params(path, net.params, vec)
    registry, back = load_twist_params(path)
    assert np.array_equal(back, vec)
    assert registry == net.params.registry


def test_checkpoint_detects_truncation(tmp_path):
    net = DenseNet(2, 3, 1)
    path = tmp_path / "twist.bin"
    save_twist_params(path, net.params, net.params.vector)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_twist_params(path)
