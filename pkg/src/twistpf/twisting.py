"""Twisting functions: parametric Gaussian, network-backed, and helpers.

A twist phi(k, x), k = 1..n, reweights the transition kernel
(P^phi ~ phi * P) and the potentials so that the target Z is preserved.
Network twists are squashed into (eps, 1) so the twisted kernel can be
sampled by rejection; Gaussian twists admit closed forms throughout.
"""
from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .autodiff import DenseNet, Params, Tensor
from .core import GaussianKernel, RejectionSamplingError


class TwistFunction:
    """Evaluator of log phi(k, x) plus the normalizer log P[phi](k, x)."""

    #: whether the replicate-batched filter engine can drive this twist
    batchable = False

    def log_phi(self, k: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_normalizer(self, k: int, x: np.ndarray,
                       rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def sample_twisted(self, kernel, k: int, x: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
        return rejection_sample_twisted(kernel, self, k, x, rng)


class ConstantTwist(TwistFunction):
    """phi(k, .) = c_k. The twisted kernel equals the untwisted one, so the
    sampler delegates to the kernel and consumes identical randomness."""

    batchable = True

    def __init__(self, log_c: float | np.ndarray = 0.0):
        self.log_c = log_c

    def _c(self, k):
        return self.log_c[k] if np.ndim(self.log_c) else self.log_c

    def log_phi(self, k, x):
        return np.full(np.shape(x)[:-1], float(self._c(k)))

    def log_normalizer(self, k, x, rng=None):
        return np.full(np.shape(x)[:-1], float(self._c(k)))

    def sample_twisted(self, kernel, k, x, rng):
        return kernel.sample(rng, x)


def identity_twist() -> ConstantTwist:
    return ConstantTwist(0.0)


class GaussianTwist(TwistFunction):
    """phi(k, x) = exp(log_scale_k) * exp(-|x - mu_k|^2 / (2 s2_k)).

    Requires a Gaussian kernel with state-independent covariance; the
    normalizer and the twisted-kernel sampler are then closed form.
    Arrays are indexed k = 0..n; index 0 is unused by the filter.
    """

    batchable = True

    def __init__(self, mu: np.ndarray, s2: np.ndarray, kernel: GaussianKernel,
                 log_scale: np.ndarray | None = None):
        self.mu = np.asarray(mu, dtype=float)
        self.s2 = np.asarray(s2, dtype=float)
        if np.any(self.s2 <= 0):
            raise ValueError("twist variance must be positive")
        self.kernel = kernel
        self.log_scale = np.zeros(len(self.s2)) if log_scale is None else np.asarray(log_scale)

    def log_phi(self, k, x):
        resid = x - self.mu[k]
        return self.log_scale[k] - 0.5 * np.sum(resid * resid, axis=-1) / self.s2[k]

    def log_normalizer(self, k, x, rng=None):
        c = self.kernel.var
        s2 = self.s2[k]
        m = self.kernel.mean(np.asarray(x, dtype=float))
        resid = m - self.mu[k]
        d = self.kernel.dim
        return (self.log_scale[k] + 0.5 * d * np.log(s2 / (s2 + c))
                - 0.5 * np.sum(resid * resid, axis=-1) / (s2 + c))

    def sample_twisted(self, kernel, k, x, rng):
        # product of N(m(x), c) and the Gaussian-shaped twist: Gaussian posterior
        c = kernel.var
        s2 = self.s2[k]
        m = kernel.mean(np.asarray(x, dtype=float))
        var_p = c * s2 / (c + s2)
        mean_p = (s2 * m + c * self.mu[k]) / (c + s2)
        return mean_p + np.sqrt(var_p) * rng.standard_normal(np.shape(x))


class NNTwist(TwistFunction):
    """Network twist: log phi = log(eps + (1-eps) * (tanh(NN(k/n, x)) + 1)/2).

    The output squashing bounds phi in (eps, 1), which both bounds the
    rejection sampler's expected attempts by 1/eps and guarantees
    acceptance probabilities are valid. The normalizer is inner Monte
    Carlo with n_inner samples from the untwisted kernel.
    """

    def __init__(self, net: DenseNet, vector: np.ndarray, horizon: int,
                 eps: float = 0.01, n_inner: int = 50):
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        self.net = net
        self.vector = np.asarray(vector, dtype=float)
        self.horizon = int(horizon)
        self.eps = float(eps)
        self.n_inner = int(n_inner)

    def _inputs(self, k, x):
        x = np.asarray(x, dtype=float)
        kcol = np.full(x.shape[:-1] + (1,), k / max(self.horizon, 1))
        return np.concatenate([kcol, x], axis=-1)

    def log_phi(self, k, x):
        inp = self._inputs(k, x)
        flat = inp.reshape(-1, inp.shape[-1])
        raw = self.net.forward_np(self.vector, flat)[:, 0]
        if not np.all(np.isfinite(raw)):
            raise FloatingPointError("network output is non-finite")
        phi = self.eps + (1.0 - self.eps) * 0.5 * (np.tanh(raw) + 1.0)
        return np.log(phi).reshape(inp.shape[:-1])

    def log_normalizer(self, k, x, rng=None):
        if rng is None:
            raise ValueError("Monte Carlo normalizer needs an rng")
        return mc_normalizer(self.net_kernel, self, k, x, self.n_inner, rng)

    # kernel is attached after construction so one twist can serve
    # evaluation contexts that carry their own model
    net_kernel: GaussianKernel | None = None

    def with_kernel(self, kernel) -> "NNTwist":
        self.net_kernel = kernel
        return self


def mc_normalizer(kernel, twist: TwistFunction, k: int, x: np.ndarray,
                  n_inner: int, rng: np.random.Generator) -> np.ndarray:
    """log of the sample mean of phi(k, U_i), U_i ~ P(x, .) i.i.d."""
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    x = np.asarray(x, dtype=float)
    tiled = np.broadcast_to(x[..., None, :], x.shape[:-1] + (n_inner, x.shape[-1])).copy()
    u = kernel.sample(rng, tiled)
    lp = twist.log_phi(k, u)
    with np.errstate(divide="ignore"):
        from scipy.special import logsumexp
        out = logsumexp(lp, axis=-1) - np.log(n_inner)
    if np.any(np.isneginf(out)):
        warnings.warn(f"all twist evaluations vanished in normalizer at step {k}")
    return out


def rejection_sample_twisted(kernel, twist: TwistFunction, k: int, x: np.ndarray,
                             rng: np.random.Generator, max_attempts: int = 10_000,
                             log_bound: float = 0.0) -> np.ndarray:
    """Draw y ~ phi(k, y) P(x, dy) by rejection.

    Proposals come from the untwisted kernel and are accepted with
    probability phi(k, y) / exp(log_bound); phi must be bounded by the
    supplied bound (1 by default, as the squashed network twist is).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    pending = np.arange(x.shape[0])
    proposals = 0
    accepted = 0
    for _ in range(max_attempts):
        if pending.size == 0:
            break
        y = kernel.sample(rng, x[pending])
        log_acc = twist.log_phi(k, y) - log_bound
        u = rng.random(pending.size)
        acc = np.log(u) < log_acc
        proposals += pending.size
        accepted += int(acc.sum())
        out[pending[acc]] = y[acc]
        pending = pending[~acc]
    if pending.size:
        rate = accepted / max(proposals, 1)
        raise RejectionSamplingError(
            f"rejection sampler exhausted {max_attempts} rounds at step {k} "
            f"(empirical acceptance rate {rate:.2e})", rate)
    return out.reshape(np.shape(x))


def simulate_twisted_paths(model, twist: TwistFunction, m: int,
                           rng: np.random.Generator) -> np.ndarray:
    """m paths of the twisted chain X^phi, shape (m, n+1, d)."""
    n, d = model.horizon, model.dim
    out = np.empty((m, n + 1, d))
    out[:, 0, :] = model.init
    for k in range(1, n + 1):
        out[:, k, :] = twist.sample_twisted(model.kernel, k, out[:, k - 1, :], rng)
    return out


def squash_log_phi(raw: Tensor, eps: float) -> Tensor:
    """Tape-tracked version of the (eps, 1) output squashing."""
    phi = eps + (1.0 - eps) * 0.5 * (raw.tanh() + 1.0)
    return phi.log()


def save_twist_params(path: str | Path, params: Params, vector: np.ndarray) -> None:
    """JSON header (names/shapes/offsets) + raw float64 payload."""
    header = {
        "registry": [[name, list(shape), off] for name, shape, off in params.registry],
        "size": int(vector.size),
        "dtype": "float64",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.asarray(vector, dtype=np.float64).tobytes())


def load_twist_params(path: str | Path) -> tuple[list, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        vector = np.frombuffer(fh.read(), dtype=np.float64).copy()
    if vector.size != header["size"]:
        raise ValueError("checkpoint payload size does not match header")
    registry = [(name, tuple(shape), off) for name, shape, off in header["registry"]]
    return registry, vector
