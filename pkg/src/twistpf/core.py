"""Core state-space abstractions: kernels, Feynman-Kac models, seeding.

Everything downstream works in log space. Potentials may be -inf (zero
potential) but never NaN. All containers are immutable after construction
and safe to share across workers.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

StateVec = np.ndarray


class EvaluationError(RuntimeError):
    """A model component produced a non-finite value."""


class DegenerateEnsembleError(RuntimeError):
    """All particle weights vanished; the filter cannot continue."""


class RejectionSamplingError(RuntimeError):
    """Rejection sampler exceeded its attempt budget."""

    def __init__(self, msg: str, acceptance_rate: float):
        super().__init__(msg)
        self.acceptance_rate = acceptance_rate


@dataclass(frozen=True)
class SeedSpec:
    """Deterministic counter-based seed derivation.

    Child streams are derived from the master seed via numpy's
    ``SeedSequence`` with spawn key ``(crc32(tag), replicate, particle)``.
    The tuple is injective on the (tag, replicate, particle) triples used,
    so identical SeedSpecs give bit-identical runs regardless of
    scheduling.
    """

    master_seed: int

    def child(self, tag: str, replicate: int = 0, particle: int = 0) -> np.random.SeedSequence:
        key = (zlib.crc32(tag.encode("utf-8")), replicate, particle)
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=key)

    def rng(self, tag: str, replicate: int = 0, particle: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.child(tag, replicate, particle))


class GaussianKernel:
    """Markov kernel y ~ N(mean_fn(x), var * I_d).

    ``mean_fn`` must accept batched input of shape (..., d) and return the
    same shape. Isotropic covariance is all the bundled models need and is
    what makes the closed-form twisted quantities available.
    """

    def __init__(self, mean_fn: Callable[[np.ndarray], np.ndarray], var: float, dim: int):
        if var <= 0:
            raise ValueError(f"kernel variance must be positive, got {var}")
        self.mean_fn = mean_fn
        self.var = float(var)
        self.dim = int(dim)

    def mean(self, x: np.ndarray) -> np.ndarray:
        m = self.mean_fn(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(m)):
            bad = np.asarray(x)[~np.all(np.isfinite(np.atleast_2d(m)), axis=-1)][:1]
            raise EvaluationError(f"kernel mean is non-finite at state {bad!r}")
        return m

    def sample(self, rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.mean(x) + np.sqrt(self.var) * rng.standard_normal(x.shape)

    def log_density(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        resid = y - self.mean(x)
        sq = np.sum(resid * resid, axis=-1)
        return -0.5 * sq / self.var - 0.5 * self.dim * np.log(2.0 * np.pi * self.var)


def _em_mean(drift: Callable[[np.ndarray], np.ndarray], eta: float, x: np.ndarray) -> np.ndarray:
    b = np.asarray(drift(x), dtype=float)
    if not np.all(np.isfinite(b)):
        raise EvaluationError(f"drift returned non-finite value at state {x!r}")
    return x + eta * b


def gaussian_em_kernel(drift: Callable[[np.ndarray], np.ndarray], eta: float, dim: int) -> GaussianKernel:
    """Euler-Maruyama transition: y = x + eta*b(x) + sqrt(2*eta)*N(0, I).

    Density (4*pi*eta)^(-d/2) * exp(-|y - x - eta*b(x)|^2 / (4*eta)).

    The mean function is a partial application of a module-level helper so
    the kernel stays picklable when the drift itself is.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return GaussianKernel(partial(_em_mean, drift, eta), var=2.0 * eta, dim=dim)


@dataclass(frozen=True)
class FeynmanKacModel:
    """Transition kernel plus log-potentials; defines Z = E[prod_k g_k(X_k)].

    ``log_potentials(k, x)`` accepts batched states of shape (..., d) and
    returns shape (...,). Values must be finite or -inf, never NaN.
    """

    dim: int
    horizon: int
    init: np.ndarray
    kernel: GaussianKernel
    log_potentials: Callable[[int, np.ndarray], np.ndarray]
    #: optional observation metadata (kind, data, noise variance) used by
    #: twist constructors that can exploit potential structure
    meta: dict | None = None

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        object.__setattr__(self, "init", np.asarray(self.init, dtype=float))
        if self.init.shape != (self.dim,):
            raise ValueError(f"init must have shape ({self.dim},), got {self.init.shape}")

    def log_g(self, k: int, x: np.ndarray) -> np.ndarray:
        val = np.asarray(self.log_potentials(k, np.asarray(x, dtype=float)), dtype=float)
        if np.any(np.isnan(val)):
            raise EvaluationError(f"log-potential at step {k} produced NaN")
        return val


def simulate_chain(model: FeynmanKacModel, rng: np.random.Generator) -> np.ndarray:
    """One trajectory x_{0:n}, shape (n+1, d)."""
    return simulate_paths(model, rng, 1)[0]


def simulate_paths(model: FeynmanKacModel, rng: np.random.Generator, m: int) -> np.ndarray:
    """m independent trajectories, shape (m, n+1, d)."""
    n, d = model.horizon, model.dim
    out = np.empty((m, n + 1, d))
    out[:, 0, :] = model.init
    for k in range(1, n + 1):
        out[:, k, :] = model.kernel.sample(rng, out[:, k - 1, :])
    return out
