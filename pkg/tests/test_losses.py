"""Loss estimators for twist training, checked against enumeration."""
import numpy as np
import pytest

from twistpf.autodiff import Tensor, finite_difference_grad
from twistpf.core import EvaluationError, FeynmanKacModel, SeedSpec
from twistpf.losses import (GaussianTableTwist, NetworkTwist, TabularTwist,
                            TrainConfig, TrainingDiverged, chain_model,
                            loss_ce, loss_re, loss_rece, train_tppf)
from twistpf.models import LinearGaussianSpec, build_model, generate_dataset
from twistpf.oracle import (FiniteChain, enumerate_chain, kl_divergence,
                            relative_variance, twisted_path_law)


@pytest.fixture
def chain():
    rng = np.random.default_rng(0)
    P = rng.uniform(0.1, 1.0, size=(3, 3))
    P /= P.sum(axis=1, keepdims=True)
    g = rng.uniform(0.3, 2.0, size=(4, 3))
    return FiniteChain(P=P, g=g, init=0)


def _chain_paths(chain, oracle):
    """All paths of the chain as float arrays the twists accept."""
    first = np.zeros((oracle.paths.shape[0], 1), dtype=int) + chain.init
    states = np.hstack([first, oracle.paths])
    return states[..., None].astype(float)


def _log_g_paths(model, paths):
    g = np.zeros(paths.shape[0])
    for k in range(model.horizon + 1):
        g += model.log_g(k, paths[:, k, :])
    return g


# -- gradients against finite differences ---------------------------------

def test_enumerated_re_gradient_matches_fd(chain):
    """Weight the per-path loss terms with the exact path probabilities:
    the result is a deterministic function of the parameters, so the tape
    gradient must agree with central finite differences."""
    orc = enumerate_chain(chain)
    model = chain_model(chain)
    paths = _chain_paths(chain, orc)
    g = _log_g_paths(model, paths)
    twist = TabularTwist(chain)
    rng = np.random.default_rng(1)
    v0 = rng.normal(scale=0.3, size=twist.vector.size)

    def build(vec):
        theta = Tensor(vec)
        s = twist.path_terms(theta, paths)
        loss = (s.exp() * (s - g) * orc.base_law).sum()
        return theta, loss

    theta, loss = build(v0)
    loss.backward()
    fd = finite_difference_grad(lambda v: build(v)[1].value, v0)
    denom = max(np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(theta.grad - fd) / denom < 1e-6


def test_enumerated_ce_gradient_matches_fd(chain):
    orc = enumerate_chain(chain)
    paths = _chain_paths(chain, orc)
    twist = TabularTwist(chain)
    v0 = np.random.default_rng(2).normal(scale=0.3, size=twist.vector.size)

    def build(vec):
        theta = Tensor(vec)
        s = twist.path_terms(theta, paths)
        loss = -(s * orc.target_law).sum()
        return theta, loss

    theta, loss = build(v0)
    loss.backward()
    fd = finite_difference_grad(lambda v: build(v)[1].value, v0)
    denom = max(np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(theta.grad - fd) / denom < 1e-6


def test_network_path_terms_gradient_matches_fd():
    spec = LinearGaussianSpec(d=1, T=0.05)   # n = 5
    model = build_model(spec, generate_dataset(spec, SeedSpec(0)))
    tw = NetworkTwist(model.kernel, model.horizon, hidden=4, n_inner=3,
                      rng=np.random.default_rng(3))
    paths = np.random.default_rng(4).normal(size=(6, model.horizon + 1, 1))
    v0 = tw.vector + 0.1 * np.random.default_rng(5).normal(size=tw.vector.size)

    def build(vec):
        theta = Tensor(vec)
        s = tw.path_terms(theta, paths, rng=np.random.default_rng(6))
        return theta, s.sum()

    theta, total = build(v0)
    total.backward()
    fd = finite_difference_grad(lambda v: build(v)[1].value, v0)
    assert np.linalg.norm(theta.grad - fd) / np.linalg.norm(fd) < 1e-4


# -- estimator consistency ------------------------------------------------

def test_ce_estimate_consistent_with_enumeration(chain):
    orc = enumerate_chain(chain)
    model = chain_model(chain)
    twist = TabularTwist(chain)
    twist.vector = np.random.default_rng(7).normal(scale=0.3,
                                                   size=twist.vector.size)
    paths = _chain_paths(chain, orc)
    s_exact = twist.path_terms(Tensor(twist.vector), paths).value
    exact = -float(np.sum(orc.target_law * s_exact))
    rng = np.random.default_rng(8)
    vals = [loss_ce(model, twist, 400, rng).value for _ in range(30)]
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - exact) < 4 * se


def test_re_untwisted_estimate_consistent_with_enumeration(chain):
    orc = enumerate_chain(chain)
    model = chain_model(chain)
    twist = TabularTwist(chain)
    twist.vector = np.random.default_rng(9).normal(scale=0.2,
                                                   size=twist.vector.size)
    paths = _chain_paths(chain, orc)
    g = _log_g_paths(model, paths)
    s_exact = twist.path_terms(Tensor(twist.vector), paths).value
    exact = float(np.sum(orc.base_law * np.exp(s_exact) * (s_exact - g)))
    rng = np.random.default_rng(10)
    vals = [loss_re(model, twist, 400, rng).value for _ in range(30)]
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - exact) < 4 * se


def test_rece_shares_the_batch(chain):
    model = chain_model(chain)
    twist = TabularTwist(chain)
    twist.vector = np.random.default_rng(11).normal(scale=0.2,
                                                    size=twist.vector.size)
    est = loss_rece(model, twist, 256, np.random.default_rng(12))
    re = loss_re(model, twist, 256, np.random.default_rng(12))
    ce = loss_ce(model, twist, 256, np.random.default_rng(12))
    assert est.parts["re"] == re.value
    assert est.parts["ce"] == ce.value
    assert est.value == pytest.approx(re.value + ce.value, rel=1e-12)
    assert np.allclose(est.grad, re.grad + ce.grad, atol=1e-12)


def test_ce_weights_uniform_under_flat_potentials(chain):
    flat = FiniteChain(P=chain.P, g=np.ones_like(chain.g), init=chain.init)
    model = chain_model(flat)
    twist = TabularTwist(flat)
    twist.vector = np.random.default_rng(13).normal(size=twist.vector.size)
    est = loss_ce(model, twist, 128, np.random.default_rng(14))
    assert est.batch_ess == pytest.approx(1.0)
    # with uniform weights the loss is minus the batch mean of S
    paths = None  # re-draw the same batch to cross-check
    from twistpf.core import simulate_paths
    paths = simulate_paths(model, np.random.default_rng(14), 128)
    s = twist.path_terms(Tensor(twist.vector), paths).value
    assert est.value == pytest.approx(-s.mean(), rel=1e-12)


def test_path_functional_ignores_per_step_constants(chain):
    """Adding a constant per step to the log twist cancels between the
    numerator and the normalizer, leaving S unchanged."""
    orc = enumerate_chain(chain)
    paths = _chain_paths(chain, orc)
    twist = TabularTwist(chain)
    base = np.random.default_rng(15).normal(size=(chain.n + 1, 3))
    shifted = base + np.array([[0.0], [1.3], [-0.7], [2.0]])
    a = twist.path_terms(Tensor(base.ravel()), paths).value
    b = twist.path_terms(Tensor(shifted.ravel()), paths).value
    assert np.allclose(a, b, atol=1e-12)


def test_gaussian_table_matches_closed_form_twist():
    spec = LinearGaussianSpec(d=2, T=0.1)    # n = 10
    model = build_model(spec, generate_dataset(spec, SeedSpec(1)))
    tw = GaussianTableTwist(model.kernel, model.horizon)
    tw.vector = tw.vector + 0.2 * np.random.default_rng(16).normal(
        size=tw.vector.size)
    paths = np.random.default_rng(17).normal(size=(8, model.horizon + 1, 2))
    s = tw.path_terms(Tensor(tw.vector), paths).value
    frozen = tw.filter_twist()
    want = np.zeros(8)
    for k in range(1, model.horizon + 1):
        want += frozen.log_phi(k, paths[:, k, :])
        want -= frozen.log_normalizer(k, paths[:, k - 1, :])
    assert np.allclose(s, want, atol=1e-9)


def test_loss_validates_inputs(chain):
    model = chain_model(chain)
    twist = TabularTwist(chain)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        loss_re(model, twist, 1, rng)
    with pytest.raises(ValueError):
        loss_re(model, twist, 16, rng, mode="sideways")
    with pytest.raises(ValueError):
        loss_ce(model, twist, 0, rng)


# -- training loop --------------------------------------------------------

def test_zero_iterations_leaves_twist_unchanged(chain):
    model = chain_model(chain)
    twist = TabularTwist(chain)
    before = twist.vector.copy()
    _, trace = train_tppf(model, twist, TrainConfig(loss="ce", iters=0),
                          SeedSpec(0))
    assert np.array_equal(twist.vector, before)
    assert trace.rows == []


def test_training_reduces_divergence(chain):
    orc = enumerate_chain(chain)
    model = chain_model(chain)
    twist = TabularTwist(chain)
    init_law = twisted_path_law(orc, np.exp(twist.log_table()))
    kl0 = kl_divergence(orc.target_law, init_law)
    cfg = TrainConfig(loss="re", m=256, iters=400, lr=5e-2,
                      mode="twisted_chain")
    twist, trace = train_tppf(model, twist, cfg, SeedSpec(2))
    law = twisted_path_law(orc, np.exp(twist.log_table()))
    kl1 = kl_divergence(orc.target_law, law)
    assert kl1 < 0.05 * kl0
    assert relative_variance(orc, np.exp(twist.log_table())) < 0.1
    assert len(trace.rows) == 400


def test_training_aborts_on_persistent_nonfinite(chain):
    model = chain_model(chain)
    bad = FeynmanKacModel(dim=1, horizon=chain.n, init=model.init,
                          kernel=model.kernel,
                          log_potentials=lambda k, x: np.full(x.shape[:-1],
                                                              np.inf))
    twist = TabularTwist(chain)
    with pytest.raises(TrainingDiverged) as err:
        train_tppf(bad, twist, TrainConfig(loss="re", m=16, iters=10),
                   SeedSpec(3))
    assert len(err.value.trace.rows) == 3
    assert np.isnan(err.value.trace.losses()).all()


def test_trace_csv_roundtrip(chain, tmp_path):
    model = chain_model(chain)
    twist = TabularTwist(chain)
    _, trace = train_tppf(model, twist, TrainConfig(loss="ce", m=32, iters=5),
                          SeedSpec(4))
    out = tmp_path / "trace.csv"
    trace.to_csv(out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "iter,loss,grad_norm,batch_ess,wall_time"
    assert len(lines) == 6
    back = np.loadtxt(out, delimiter=",", skiprows=1)
    assert np.allclose(back[:, 1], trace.losses(), rtol=1e-9)
