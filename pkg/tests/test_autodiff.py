"""Gradient checks for the reverse-mode tape against finite differences."""
import numpy as np
import pytest

from twistpf.autodiff import (AdamState, DenseNet, Params, Tensor, adam_step,
                              concat, finite_difference_grad, stop_gradient)

TOL = 1e-5


def _check_grad(build, x0, tol=TOL):
    """build maps a Tensor leaf to a scalar Tensor; compare tape and FD."""
    leaf = Tensor(x0)
    out = build(leaf)
    out.backward()
    fd = finite_difference_grad(lambda v: float(build(Tensor(v)).value), x0.copy())
    assert np.linalg.norm(leaf.grad - fd) <= tol * max(1.0, np.linalg.norm(fd))


@pytest.mark.parametrize("op", [
    lambda t: (t + 2.0).sum(),
    lambda t: (2.0 - t).sum(),
    lambda t: (t * t).sum(),
    lambda t: (t / 3.0 + 1.0 / t).sum(),
    lambda t: t.exp().sum(),
    lambda t: (t * t + 0.5).log().sum(),
    lambda t: t.tanh().sum(),
    lambda t: (-t).mean(),
])
def test_elementwise_grads(op):
    rng = np.random.default_rng(0)
    _check_grad(op, rng.normal(size=7) + 2.5)


def test_matmul_grad():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 3))
    _check_grad(lambda t: (Tensor(x) @ t.reshape(3, 4)).tanh().sum(),
                rng.normal(size=12))


def test_broadcasting_grads():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 3))
    _check_grad(lambda t: (Tensor(a) * t).sum(), rng.normal(size=3))
    _check_grad(lambda t: (Tensor(a) + t.reshape(4, 1)).exp().mean(), rng.normal(size=4))


def test_getitem_scatter_grad():
    rng = np.random.default_rng(3)
    idx = np.array([0, 2, 2, 1, 0])
    _check_grad(lambda t: (t[idx] * t[idx]).sum(), rng.normal(size=4))


def test_sum_axis_and_logsumexp():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    _check_grad(lambda t: t.reshape(3, 5).sum(axis=1).tanh().sum(), x.ravel())
    _check_grad(lambda t: t.reshape(3, 5).logsumexp(axis=1).sum(), x.ravel())


def test_logsumexp_matches_scipy():
    from scipy.special import logsumexp
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 6)) * 30
    got = Tensor(x).logsumexp(axis=1).value
    assert np.allclose(got, logsumexp(x, axis=1), atol=1e-12)


def test_concat_grad():
    rng = np.random.default_rng(6)
    b = rng.normal(size=(3, 2))

    def build(t):
        left = t.reshape(3, 2)
        return (concat([left, Tensor(b)], axis=1) @ Tensor(rng.normal(size=(4, 1)))).sum()

    rng = np.random.default_rng(6)
    b = rng.normal(size=(3, 2))
    w = rng.normal(size=(4, 1))

    def build(t):
        return (concat([t.reshape(3, 2), Tensor(b)], axis=1) @ Tensor(w)).sum()

    _check_grad(build, np.random.default_rng(7).normal(size=6))


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([1.5, -0.5]))
    out = (stop_gradient(x * 2.0) * x).sum()
    out.backward()
    assert np.allclose(x.grad, 2.0 * x.value)


def test_diamond_graph_accumulates():
    x = Tensor(np.array(2.0))
    y = x * x + x * 3.0
    y.backward()
    assert np.allclose(x.grad, 2 * 2.0 + 3.0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(np.zeros(3)).backward()


def test_densenet_tape_matches_numpy():
    rng = np.random.default_rng(8)
    net = DenseNet(4, 6, 2, rng=rng)
    vec = rng.normal(size=net.params.size)
    x = rng.normal(size=(5, 4))
    out = net.forward(Tensor(vec), x)
    assert np.allclose(out.value, net.forward_np(vec, x), atol=1e-12)


def test_densenet_grad_matches_fd():
    rng = np.random.default_rng(9)
    net = DenseNet(3, 4, 1, rng=rng)
    vec = rng.normal(size=net.params.size) * 0.5
    x = rng.normal(size=(6, 3))

    def scalar(v):
        if isinstance(v, Tensor):
            return net.forward(v, x).tanh().sum()
        return float(net.forward(Tensor(v), x).tanh().sum().value)

    theta = Tensor(vec)
    loss = scalar(theta)
    loss.backward()
    fd = finite_difference_grad(scalar, vec.copy())
    assert np.linalg.norm(theta.grad - fd) <= 1e-5 * np.linalg.norm(fd)


def test_params_registry_roundtrip():
    p = Params()
    p.add("a", np.arange(6.0).reshape(2, 3))
    p.add("b", np.ones(4))
    assert p.size == 10
    assert np.allclose(p.get("a"), np.arange(6.0).reshape(2, 3))
    assert np.allclose(p.get("b"), np.ones(4))
    with pytest.raises(KeyError):
        p.get("missing")
    theta = Tensor(p.vector * 2.0)
    assert np.allclose(p.slice(theta, "a").value, 2.0 * np.arange(6.0).reshape(2, 3))


def test_adam_step_matches_reference():
    vec = np.array([1.0, -2.0])
    grad = np.array([0.5, 0.1])
    new, state = adam_step(vec, grad, AdamState.zeros(2), lr=0.1)
    # first step: m_hat = grad, v_hat = grad^2, update ~ -lr * sign(grad)
    expect = vec - 0.1 * grad / (np.abs(grad) + 1e-8)
    assert np.allclose(new, expect)
    assert state.t == 1


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros(2))
