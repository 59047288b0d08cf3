"""Exact reference computations used to validate the stochastic machinery.

Four families of oracles live here:

* a Kalman filter for the linear Gaussian model (exact log Z),
* the closed-form optimal twist of the linear Gaussian model, obtained by
  an independent backward Gaussian recursion,
* exhaustive enumeration of small finite-state chains (exact Z, optimal
  twist tables, twisted path laws, KL divergences, relative variance and
  chi-square identities, variational-principle checks),
* closed-form checks of the Euler-Maruyama kernel's KL convergence rate
  and of the discretized-target trend as the step size shrinks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import FeynmanKacModel, SeedSpec, gaussian_em_kernel
from .models import Dataset, LinearGaussianSpec, _lgm_kernel
from .twisting import GaussianTwist


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

@dataclass
class KalmanResult:
    means: np.ndarray         # filtered means, (n+1, d)
    covs: np.ndarray          # filtered covariances, (n+1, d, d)
    log_marginal: float


def kalman_log_z(spec: LinearGaussianSpec, dataset: Dataset) -> KalmanResult:
    """Exact log Z for the linear Gaussian model by predict/update sweeps.

    The initial state is deterministic, so the k=0 update contributes
    log N(y_0; x_0, R) and leaves the state estimate untouched.
    """
    d, n = spec.d, spec.n
    y = dataset.y
    a = 1.0 - spec.dt
    F = a * np.eye(d)
    Q = spec.dt * spec.proc_var * np.eye(d)
    R = spec.obs_var * np.eye(d)

    m = np.zeros(d)
    P = np.zeros((d, d))
    means = np.empty((n + 1, d))
    covs = np.empty((n + 1, d, d))
    log_z = 0.0
    for k in range(n + 1):
        if k > 0:
            m = F @ m
            P = F @ P @ F.T + Q
        S = P + R
        S = 0.5 * (S + S.T)
        sign, logdet = np.linalg.slogdet(S)
        if sign <= 0:
            raise np.linalg.LinAlgError("innovation covariance not positive definite")
        resid = y[k] - m
        sol = np.linalg.solve(S, resid)
        log_z += -0.5 * (resid @ sol + logdet + d * np.log(2.0 * np.pi))
        K = np.linalg.solve(S.T, P.T).T   # P S^{-1}
        m = m + K @ resid
        P = (np.eye(d) - K) @ P
        P = 0.5 * (P + P.T)
        means[k] = m
        covs[k] = P
    return KalmanResult(means=means, covs=covs, log_marginal=float(log_z))


# ---------------------------------------------------------------------------
# closed-form optimal twist for the linear Gaussian model
# ---------------------------------------------------------------------------

@dataclass
class LgmOptimalTwist:
    """log phi*_k(x) = c_k - |x - mu_k|^2 / (2 s2_k), k = 0..n."""
    c: np.ndarray       # (n+1,)
    mu: np.ndarray      # (n+1, d)
    s2: np.ndarray      # (n+1,)

    def log_phi(self, k: int, x: np.ndarray) -> np.ndarray:
        resid = np.asarray(x, dtype=float) - self.mu[k]
        return self.c[k] - 0.5 * np.sum(resid * resid, axis=-1) / self.s2[k]

    def as_twist(self, spec: LinearGaussianSpec) -> GaussianTwist:
        return GaussianTwist(mu=self.mu, s2=self.s2, kernel=_lgm_kernel(spec),
                             log_scale=self.c)


def lgm_optimal_twist(spec: LinearGaussianSpec, dataset: Dataset) -> LgmOptimalTwist:
    """Backward recursion phi*_k = g_k * P[phi*_{k+1}] in closed form.

    Both the potentials and the kernel-smoothed twist are isotropic
    Gaussian shapes, so each step is a product of two such shapes.
    At the root, phi*_0(x_0) reproduces the Kalman log marginal.
    """
    d, n = spec.d, spec.n
    y = dataset.y
    a = 1.0 - spec.dt
    kvar = spec.dt * spec.proc_var
    R = spec.obs_var
    log_norm_g = -0.5 * d * np.log(2.0 * np.pi * R)

    c = np.empty(n + 1)
    mu = np.empty((n + 1, d))
    s2 = np.empty(n + 1)
    c[n], mu[n], s2[n] = log_norm_g, y[n], R
    for k in range(n - 1, -1, -1):
        # smooth phi*_{k+1} through the kernel N(a x, kvar I)
        sm_c = c[k + 1] + 0.5 * d * np.log(s2[k + 1] / (s2[k + 1] + kvar))
        sm_mu = mu[k + 1] / a
        sm_s2 = (s2[k + 1] + kvar) / (a * a)
        # multiply by the Gaussian-shaped potential g_k
        prec = 1.0 / R + 1.0 / sm_s2
        s2[k] = 1.0 / prec
        mu[k] = s2[k] * (y[k] / R + sm_mu / sm_s2)
        cross = (np.sum(y[k] ** 2) / R + np.sum(sm_mu ** 2) / sm_s2
                 - np.sum(mu[k] ** 2) / s2[k])
        c[k] = log_norm_g + sm_c - 0.5 * cross
    return LgmOptimalTwist(c=c, mu=mu, s2=s2)


# ---------------------------------------------------------------------------
# finite-state enumeration
# ---------------------------------------------------------------------------

_MAX_STATES = 6
_MAX_STEPS = 6


@dataclass(frozen=True)
class FiniteChain:
    """Finite-state chain with deterministic start and per-step potentials.

    ``P`` is (S, S) row-stochastic, ``g`` is (n+1, S) nonnegative, and the
    chain starts at state ``init``. Small enough to enumerate all S^n
    trajectories exhaustively.
    """
    P: np.ndarray
    g: np.ndarray
    init: int

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        g = np.asarray(self.g, dtype=float)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "g", g)
        S = P.shape[0]
        if P.shape != (S, S):
            raise ValueError("transition matrix must be square")
        if not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if np.any(g < 0):
            raise ValueError("potentials must be nonnegative")
        if S > _MAX_STATES or self.n > _MAX_STEPS:
            raise ValueError(f"chain too large to enumerate (S <= {_MAX_STATES}, n <= {_MAX_STEPS})")
        if not 0 <= self.init < S:
            raise ValueError("invalid initial state")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n(self) -> int:
        return self.g.shape[0] - 1


@dataclass
class ChainOracle:
    chain: FiniteChain
    z: float
    z_by_paths: float
    phi_star: np.ndarray       # (n+1, S)
    paths: np.ndarray          # (S^n, n) state indices for steps 1..n
    base_law: np.ndarray       # untwisted path probabilities
    target_law: np.ndarray     # optimal path law, prop. to base * prod g


def _all_paths(n_states: int, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros((1, 0), dtype=int)
    return np.array(list(itertools.product(range(n_states), repeat=n)), dtype=int)


def _path_states(chain: FiniteChain, paths: np.ndarray) -> np.ndarray:
    """Prepend the deterministic initial state, shape (n_paths, n+1)."""
    first = np.full((paths.shape[0], 1), chain.init, dtype=int)
    return np.hstack([first, paths])


def enumerate_chain(chain: FiniteChain) -> ChainOracle:
    """Exact quantities by two independent routes.

    Z comes from both the forward potential-weighted recursion and brute
    path summation; the optimal twist from the backward recursion
    phi*_k = g_k * (P phi*_{k+1}), phi*_n = g_n.
    """
    P, g, n, S = chain.P, chain.g, chain.n, chain.n_states

    alpha = np.zeros(S)
    alpha[chain.init] = g[0, chain.init]
    for k in range(1, n + 1):
        alpha = (alpha @ P) * g[k]
    z = float(alpha.sum())

    phi_star = np.empty_like(g)
    phi_star[n] = g[n]
    for k in range(n - 1, -1, -1):
        phi_star[k] = g[k] * (P @ phi_star[k + 1])

    paths = _all_paths(S, n)
    states = _path_states(chain, paths)
    base = np.ones(paths.shape[0])
    weight = np.full(paths.shape[0], g[0, chain.init])
    for k in range(1, n + 1):
        base *= P[states[:, k - 1], states[:, k]]
        weight *= g[k, states[:, k]]
    z_by_paths = float(np.sum(base * weight))
    target = base * weight / z_by_paths if z_by_paths > 0 else base * weight

    return ChainOracle(chain=chain, z=z, z_by_paths=z_by_paths, phi_star=phi_star,
                       paths=paths, base_law=base, target_law=target)


def twisted_path_law(oracle: ChainOracle, phi: np.ndarray) -> np.ndarray:
    """Exact trajectory probabilities under the phi-twisted kernel.

    ``phi`` is an (n+1, S) positive table; row 0 is unused (the first
    twisted transition targets step 1).
    """
    chain = oracle.chain
    phi = np.asarray(phi, dtype=float)
    if np.any(phi[1:] <= 0):
        raise ValueError("twist table must be positive")
    states = _path_states(chain, oracle.paths)
    prob = np.ones(oracle.paths.shape[0])
    for k in range(1, chain.n + 1):
        norm = chain.P @ phi[k]
        prob *= phi[k, states[:, k]] * chain.P[states[:, k - 1], states[:, k]] \
            / norm[states[:, k - 1]]
    return prob


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for discrete laws on the same atoms; 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def chi_square(p: np.ndarray, q: np.ndarray) -> float:
    """chi^2(p | q) = sum p^2/q - 1."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] ** 2 / q[mask]) - 1.0)


def relative_variance(oracle: ChainOracle, phi: np.ndarray) -> float:
    """Relative second moment of the one-sample estimator under the twist.

    Equals chi^2(target | twisted law): the estimator Z * d(target)/d(law)
    is unbiased, and its relative variance is this chi-square divergence.
    """
    law = twisted_path_law(oracle, phi)
    return chi_square(oracle.target_law, law)


def check_dv_principle(oracle: ChainOracle, candidates: list[np.ndarray]) -> dict:
    """Variational bound -log E_P[e^{-W}] <= E_Q[W] + KL(Q || P).

    W is the negative log path weight; candidates are path laws Q. Returns
    the per-candidate gaps (all must be >= 0) and the gap at the optimal
    law (must be ~0).
    """
    chain = oracle.chain
    states = _path_states(chain, oracle.paths)
    logg = np.zeros(oracle.paths.shape[0])
    for k in range(chain.n + 1):
        with np.errstate(divide="ignore"):
            logg += np.log(chain.g[k, states[:, k]])
    w = -logg
    lhs = -np.log(np.sum(oracle.base_law * np.exp(-w)))
    gaps = []
    for q in candidates:
        q = np.asarray(q, dtype=float)
        mask = q > 0
        rhs = float(np.sum(q[mask] * w[mask])) + kl_divergence(q, oracle.base_law)
        gaps.append(rhs - lhs)
    opt_rhs = float(np.sum(oracle.target_law * w)) \
        + kl_divergence(oracle.target_law, oracle.base_law)
    return {"lhs": float(lhs), "gaps": np.array(gaps),
            "optimal_gap": float(opt_rhs - lhs)}


def check_variance_bounds(oracle: ChainOracle, phi: np.ndarray) -> dict:
    """Two-sided exponential-of-KL bounds on the relative variance.

    With density ratio rho = target/law on atoms, m = min rho, M = max rho:
      exp(m*KL(law||target) + KL(target||law)) - 1 <= r^2
      r^2 <= exp(M*KL(law||target) + KL(target||law)) - 1
      r^2 >= exp(KL(target||law)) - 1.
    """
    law = twisted_path_law(oracle, phi)
    target = oracle.target_law
    if np.any(law <= 0):
        return {"skipped": True, "reason": "zero-probability paths under the twist"}
    ratio = target / law
    m = float(ratio.min())
    big = float(ratio.max())
    kl_lt = kl_divergence(law, target)
    kl_tl = kl_divergence(target, law)
    r2 = chi_square(target, law)
    with np.errstate(over="ignore"):   # upper bound may overflow to inf
        return {
            "skipped": False,
            "m": m, "M": big, "r2": r2,
            "lower": np.exp(m * kl_lt + kl_tl) - 1.0,
            "upper": np.exp(big * kl_lt + kl_tl) - 1.0,
            "jensen_lower": np.exp(kl_tl) - 1.0,
        }


# ---------------------------------------------------------------------------
# discretization checks
# ---------------------------------------------------------------------------

def em_kernel_kl(eta: float, x: float = 1.0, d: int = 1) -> float:
    """Exact KL between the one-step Euler scheme and the true transition.

    For the linear drift b(x) = -x with unit diffusion pair (variance
    2*eta per step), the true transition is N(e^{-eta} x, 1 - e^{-2 eta})
    per coordinate, the Euler one N((1 - eta) x, 2 eta). Coordinates are
    independent, so the KL is d times the scalar KL.
    """
    m1, v1 = (1.0 - eta) * x, 2.0 * eta
    m2, v2 = np.exp(-eta) * x, 1.0 - np.exp(-2.0 * eta)
    scalar = 0.5 * (np.log(v2 / v1) + v1 / v2 + (m1 - m2) ** 2 / v2 - 1.0)
    return float(d * scalar)


def check_em_kernel_convergence(etas=(0.2, 0.1, 0.05, 0.025, 0.0125),
                                x: float = 1.0, d: int = 1) -> dict:
    """Log-log slope of the Euler kernel's KL error versus step size."""
    etas = np.asarray(etas, dtype=float)
    kls = np.array([em_kernel_kl(e, x=x, d=d) for e in etas])
    slope, _ = np.polyfit(np.log(etas), np.log(kls), 1)
    return {"etas": etas, "kls": kls, "slope": float(slope)}


def _zdis_model(eta: float, T: float, t0: float, y_fn) -> FeynmanKacModel:
    """Discretized 1-D tracking problem at step size eta.

    The potential at interior steps is the continuum log-potential scaled
    by eta; the terminal step carries the unscaled terminal potential.
    """
    n = int(round(T / eta))

    def log_pot(k, xs):
        t = k * eta
        var = t + t0
        dens = -0.5 * (xs[..., 0] - y_fn(t)) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
        return dens if k == n else eta * dens

    return FeynmanKacModel(dim=1, horizon=n, init=np.zeros(1),
                           kernel=gaussian_em_kernel(lambda x: -x, eta, 1),
                           log_potentials=log_pot)


def check_zdis_trend(etas=(0.1, 0.05, 0.025, 0.0125), T: float = 0.5,
                     t0: float = 0.1, n_particles: int = 256,
                     replicates: int = 400, seed: int = 0) -> dict:
    """Cauchy trend of the discretized target as the step size shrinks.

    One synthetic observation path is simulated on the finest grid and
    subsampled; for each eta the discretized target is estimated by many
    bootstrap filter replicates. Successive estimates must approach each
    other faster than the Monte Carlo noise.
    """
    from .filtering import run_replicates

    etas = sorted(etas, reverse=True)
    fine = etas[-1]
    steps = int(round(T / fine))
    seeds = SeedSpec(seed)
    rng = seeds.rng("zdis-path")
    # latent OU path and an independent Brownian disturbance on [t0, T+t0]
    x = 0.0
    b = np.sqrt(t0) * rng.standard_normal()
    y = np.empty(steps + 1)
    y[0] = x + b
    for k in range(1, steps + 1):
        x = x - fine * x + np.sqrt(2 * fine) * rng.standard_normal()
        b = b + np.sqrt(fine) * rng.standard_normal()
        y[k] = x + b

    def y_fn(t):
        return y[int(round(t / fine))]

    z_means, z_ses = [], []
    for eta in etas:
        model = _zdis_model(eta, T, t0, y_fn)
        log_z, _, _ = run_replicates(model, None, n_particles, replicates,
                                     SeedSpec(seed + 1))
        zhat = np.exp(log_z)
        z_means.append(float(zhat.mean()))
        z_ses.append(float(zhat.std(ddof=1) / np.sqrt(replicates)))
    diffs = np.abs(np.diff(z_means))
    return {"etas": np.asarray(etas), "z": np.asarray(z_means),
            "se": np.asarray(z_ses), "diffs": diffs}
