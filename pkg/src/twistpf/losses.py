"""Path-measure losses for twist training, and the training loop.

The losses compare the twisted path measure against the optimal one.
With S(X) = sum_k [log phi(k, X_k) - log P[phi](k, X_{k-1})] and
G(X) = sum_k log g_k(X_k), the reverse-KL loss on untwisted paths is
mean(exp(S) * (S - G)) and the cross-entropy loss is -sum_i w_i S_i with
w the self-normalized potential weights exp(G). Both omit an additive
constant that does not depend on the twist parameters.

Three trainable parameterizations are provided: a per-step Gaussian
(mean and variance tables, closed-form normalizers), a network twist
(Monte Carlo normalizers), and a tabular twist for finite-state chains
(exact normalizers, used by the enumeration-based tests).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .autodiff import AdamState, DenseNet, Params, Tensor, adam_step, stop_gradient
from .core import (DegenerateEnsembleError, EvaluationError, FeynmanKacModel,
                   GaussianKernel, SeedSpec, simulate_paths)
from .twisting import GaussianTwist, NNTwist, TwistFunction, simulate_twisted_paths


@dataclass
class LossEstimate:
    value: float
    grad: np.ndarray
    batch_size: int
    batch_ess: float
    parts: dict | None = None


class TrainableTwist:
    """A twist family with a flat parameter vector and a tape-tracked
    evaluator of the per-path functional S."""

    params: Params
    vector: np.ndarray

    def path_terms(self, theta: Tensor, paths: np.ndarray,
                   rng: np.random.Generator | None = None) -> Tensor:
        """S(X) = sum_{k=1}^n [log phi(k, X_k) - log P[phi](k, X_{k-1})],
        one entry per path in the batch."""
        raise NotImplementedError

    def filter_twist(self) -> TwistFunction:
        """Freeze the current parameters into a twist the filters can run."""
        raise NotImplementedError


class GaussianTableTwist(TrainableTwist):
    """Per-step Gaussian twist phi(k, x) = exp(-|x - mu_k|^2 / (2 s2_k)).

    Parameters are a mean table (n+1, d) and log-variance table (n+1,).
    Under an isotropic Gaussian kernel both the normalizer and the twisted
    sampler are closed form, so training and filtering are exact.
    """

    def __init__(self, kernel: GaussianKernel, horizon: int,
                 init_mu: np.ndarray | None = None, init_log_s2: float = 0.0):
        self.kernel = kernel
        self.horizon = int(horizon)
        self.params = Params()
        mu0 = np.zeros((horizon + 1, kernel.dim)) if init_mu is None \
            else np.asarray(init_mu, dtype=float)
        self.params.add("mu", mu0)
        self.params.add("rho", np.full(horizon + 1, float(init_log_s2)))
        self.vector = self.params.vector.copy()

    def path_terms(self, theta, paths, rng=None):
        c = self.kernel.var
        d = self.kernel.dim
        xk = paths[:, 1:, :]
        means = self.kernel.mean(paths[:, :-1, :])
        mu = self.params.slice(theta, "mu")[1:]
        s2 = self.params.slice(theta, "rho")[1:].exp()
        dx = Tensor(xk) - mu
        dm = Tensor(means) - mu
        s2c = s2 + c
        log_phi = (dx * dx).sum(axis=2) * (-0.5) / s2
        log_norm = (dm * dm).sum(axis=2) * (-0.5) / s2c
        per_k = log_phi - log_norm
        const = (s2 / s2c).log().sum() * (-0.5 * d)
        return per_k.sum(axis=1) + const

    def filter_twist(self):
        mu = self.params.get("mu", self.vector)
        s2 = np.exp(self.params.get("rho", self.vector))
        return GaussianTwist(mu=mu, s2=s2, kernel=self.kernel)


class NetworkTwist(TrainableTwist):
    """Network twist with (eps, 1) squashing and Monte Carlo normalizers.

    The normalizer P[phi](k, x) is approximated by n_inner kernel draws;
    those draws do not depend on the parameters, so the tape differentiates
    straight through the sample mean.
    """

    def __init__(self, kernel: GaussianKernel, horizon: int, hidden: int = 32,
                 eps: float = 0.01, n_inner: int = 50,
                 rng: np.random.Generator | None = None):
        self.kernel = kernel
        self.horizon = int(horizon)
        self.eps = float(eps)
        self.n_inner = int(n_inner)
        self.net = DenseNet(kernel.dim + 1, hidden, 1, rng=rng)
        self.params = self.net.params
        self.vector = self.params.vector.copy()

    def _with_step(self, k: int, x: np.ndarray) -> np.ndarray:
        kcol = np.full(x.shape[:-1] + (1,), k / max(self.horizon, 1))
        return np.concatenate([kcol, x], axis=-1)

    def _log_phi_t(self, theta, inputs: np.ndarray) -> Tensor:
        raw = self.net.forward(theta, inputs.reshape(-1, inputs.shape[-1]))
        phi = self.eps + (1.0 - self.eps) * 0.5 * (raw[:, 0].tanh() + 1.0)
        return phi.log().reshape(*inputs.shape[:-1])

    def path_terms(self, theta, paths, rng=None):
        if rng is None:
            raise ValueError("network path terms need an rng for the normalizers")
        m, _, d = paths.shape
        n, nin = self.horizon, self.n_inner
        # one network forward for every (step, particle, inner sample): the
        # first m rows of each step block are the path states, the rest the
        # kernel draws feeding the Monte Carlo normalizer
        blocks = []
        for k in range(1, n + 1):
            blocks.append(self._with_step(k, paths[:, k, :]))
            prev = np.broadcast_to(paths[:, k - 1, None, :], (m, nin, d)).copy()
            u = self.kernel.sample(rng, prev)
            blocks.append(self._with_step(k, u).reshape(m * nin, d + 1))
        flat = self._log_phi_t(theta, np.concatenate(blocks, axis=0))
        per_step = flat.reshape(n, m * (1 + nin))
        lp = per_step[:, :m]
        inner = per_step[:, m:].reshape(n, m, nin)
        lnorm = inner.logsumexp(axis=2) - np.log(nin)
        return (lp - lnorm).sum(axis=0)

    def filter_twist(self):
        return NNTwist(self.net, self.vector.copy(), self.horizon,
                       eps=self.eps, n_inner=self.n_inner).with_kernel(self.kernel)


class _ChainKernel:
    """Markov kernel on a finite state space; states ride in a length-1
    float coordinate so the generic path plumbing applies unchanged."""

    def __init__(self, P: np.ndarray):
        self.P = np.asarray(P, dtype=float)
        self.cum = np.cumsum(self.P, axis=1)
        self.cum[:, -1] = 1.0
        self.dim = 1

    def sample(self, rng, x):
        s = np.asarray(x)[..., 0].astype(int)
        u = rng.random(s.shape)
        idx = np.sum(self.cum[s] < u[..., None], axis=-1)
        return idx[..., None].astype(float)


def chain_model(chain) -> FeynmanKacModel:
    """Wrap a finite-state chain in the generic model interface."""
    g = chain.g

    def log_pot(k, x):
        s = np.asarray(x)[..., 0].astype(int)
        with np.errstate(divide="ignore"):
            return np.log(g[k, s])

    return FeynmanKacModel(dim=1, horizon=chain.n,
                           init=np.array([float(chain.init)]),
                           kernel=_ChainKernel(chain.P), log_potentials=log_pot)


class TabularChainTwist(TwistFunction):
    """Twist given by a positive table over (step, state); exact normalizers."""

    batchable = True

    def __init__(self, P: np.ndarray, log_table: np.ndarray):
        self.P = np.asarray(P, dtype=float)
        self.log_table = np.asarray(log_table, dtype=float)

    def _states(self, x):
        return np.asarray(x)[..., 0].astype(int)

    def log_phi(self, k, x):
        return self.log_table[k, self._states(x)]

    def log_normalizer(self, k, x, rng=None):
        norm = np.log(self.P @ np.exp(self.log_table[k]))
        return norm[self._states(x)]

    def sample_twisted(self, kernel, k, x, rng):
        s = self._states(x)
        w = self.P[s] * np.exp(self.log_table[k])
        cum = np.cumsum(w, axis=-1)
        cum /= cum[..., -1:]
        u = rng.random(s.shape)
        idx = np.sum(cum < u[..., None], axis=-1)
        return idx[..., None].astype(float)


class TabularTwist(TrainableTwist):
    """One free log-twist parameter per (step, state) of a finite chain."""

    def __init__(self, chain):
        self.P = np.asarray(chain.P, dtype=float)
        self.horizon = chain.n
        self.params = Params()
        self.params.add("logphi", np.zeros((chain.n + 1, chain.P.shape[0])))
        self.vector = self.params.vector.copy()

    def path_terms(self, theta, paths, rng=None):
        states = np.asarray(paths)[..., 0].astype(int)
        table = self.params.slice(theta, "logphi")
        total = None
        for k in range(1, self.horizon + 1):
            row = table[k]
            lphi = row[states[:, k]]
            lnorm = (Tensor(self.P) @ row.exp()).log()[states[:, k - 1]]
            term = lphi - lnorm
            total = term if total is None else total + term
        return total

    def log_table(self) -> np.ndarray:
        return self.params.get("logphi", self.vector)

    def filter_twist(self):
        return TabularChainTwist(self.P, self.log_table())


# ---------------------------------------------------------------------------
# loss estimators
# ---------------------------------------------------------------------------

def _log_weight(model: FeynmanKacModel, paths: np.ndarray) -> np.ndarray:
    """G(X) = sum_k log g_k(X_k) per path."""
    g = np.zeros(paths.shape[0])
    for k in range(model.horizon + 1):
        g += model.log_g(k, paths[:, k, :])
    return g


def _batch_ess(log_w: np.ndarray) -> float:
    lw = log_w - logsumexp(log_w)
    return float(np.exp(-logsumexp(2.0 * lw)) / len(log_w))


def loss_re(model: FeynmanKacModel, twist: TrainableTwist, m: int,
            rng: np.random.Generator, mode: str = "untwisted_chain") -> LossEstimate:
    """Reverse-KL loss (twisted law against the optimal one), up to an
    additive constant that does not depend on the twist.

    ``untwisted_chain`` evaluates mean(exp(S) * (S - G)) on plain model
    paths and differentiates it directly. ``twisted_chain`` evaluates
    mean(S - G) on twisted paths; since those paths depend on the
    parameters, the gradient uses the score-style surrogate
    mean(detach(1 + S - G) * S).
    """
    if m < 2:
        raise ValueError("batch size must be >= 2")
    if mode not in ("untwisted_chain", "twisted_chain"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    theta = Tensor(twist.vector)
    if mode == "untwisted_chain":
        paths = simulate_paths(model, rng, m)
        g = _log_weight(model, paths)
        s = twist.path_terms(theta, paths, rng)
        bracket = s - g
        loss = (s.exp() * bracket).mean()
        value = float(loss.value)
        ess = _batch_ess(s.value)
        loss.backward()
    else:
        paths = simulate_twisted_paths(model, twist.filter_twist(), m, rng)
        g = _log_weight(model, paths)
        s = twist.path_terms(theta, paths, rng)
        value = float(np.mean(s.value - g))
        ess = 1.0
        # E[grad S] = 0 on twisted paths, so centering the score coefficient
        # keeps the gradient unbiased while removing its dominant constant
        raw_coeff = 1.0 + s.value - g
        coeff = stop_gradient(Tensor(raw_coeff - raw_coeff.mean()))
        surrogate = (coeff * s).mean()
        surrogate.backward()
    if not np.isfinite(value):
        bad = int(np.argmax(~np.isfinite(s.value - g)))
        raise EvaluationError(f"non-finite loss bracket (first bad path {bad})")
    return LossEstimate(value=value, grad=theta.grad.copy(), batch_size=m,
                        batch_ess=ess)


def loss_ce(model: FeynmanKacModel, twist: TrainableTwist, m: int,
            rng: np.random.Generator) -> LossEstimate:
    """Cross-entropy loss: -sum_i w_i S_i on untwisted paths, with w the
    self-normalized potential weights exp(G)."""
    if m < 2:
        raise ValueError("batch size must be >= 2")
    paths = simulate_paths(model, rng, m)
    g = _log_weight(model, paths)
    if np.all(np.isneginf(g)):
        raise DegenerateEnsembleError("all batch weights are zero")
    w = np.exp(g - logsumexp(g))
    theta = Tensor(twist.vector)
    s = twist.path_terms(theta, paths, rng)
    loss = -(s * w).sum()
    value = float(loss.value)
    if not np.isfinite(value):
        raise EvaluationError("non-finite cross-entropy loss")
    loss.backward()
    return LossEstimate(value=value, grad=theta.grad.copy(), batch_size=m,
                        batch_ess=_batch_ess(g))


def loss_rece(model: FeynmanKacModel, twist: TrainableTwist, m: int,
              rng: np.random.Generator) -> LossEstimate:
    """Sum of the two losses evaluated on one shared untwisted batch."""
    if m < 2:
        raise ValueError("batch size must be >= 2")
    paths = simulate_paths(model, rng, m)
    g = _log_weight(model, paths)
    if np.all(np.isneginf(g)):
        raise DegenerateEnsembleError("all batch weights are zero")
    w = np.exp(g - logsumexp(g))
    theta = Tensor(twist.vector)
    s = twist.path_terms(theta, paths, rng)
    re_part = (s.exp() * (s - g)).mean()
    ce_part = -(s * w).sum()
    loss = re_part + ce_part
    value = float(loss.value)
    if not np.isfinite(value):
        raise EvaluationError("non-finite combined loss")
    loss.backward()
    return LossEstimate(value=value, grad=theta.grad.copy(), batch_size=m,
                        batch_ess=_batch_ess(g),
                        parts={"re": float(re_part.value), "ce": float(ce_part.value)})


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    loss: str = "re"               # re | ce | rece
    m: int = 512
    iters: int = 2000
    lr: float = 1e-3
    mode: str = "untwisted_chain"  # sampling mode for the RE loss

    def __post_init__(self):
        if self.loss not in ("re", "ce", "rece"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.iters < 0:
            raise ValueError("iteration count must be >= 0")


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)   # dicts: iter, loss, grad_norm, batch_ess, wall_time

    def append(self, **row):
        self.rows.append(row)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iter,loss,grad_norm,batch_ess,wall_time\n")
            for r in self.rows:
                fh.write(f"{r['iter']},{r['loss']:.10g},{r['grad_norm']:.10g},"
                         f"{r['batch_ess']:.10g},{r['wall_time']:.6g}\n")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, trace: TrainingTrace):
        super().__init__(msg)
        self.trace = trace


def train_tppf(model: FeynmanKacModel, twist: TrainableTwist,
               config: TrainConfig, seeds: SeedSpec) -> tuple[TrainableTwist, TrainingTrace]:
    """Stochastic gradient training of a twist (loss estimate, Adam step).

    Aborts if the loss is non-finite three iterations in a row; the trace
    accumulated so far is attached to the raised error.
    """
    rng = seeds.rng("train")
    state = AdamState.zeros(twist.vector.size)
    trace = TrainingTrace()
    bad_streak = 0
    t0 = time.perf_counter()
    for it in range(config.iters):
        try:
            if config.loss == "re":
                est = loss_re(model, twist, config.m, rng, mode=config.mode)
            elif config.loss == "ce":
                est = loss_ce(model, twist, config.m, rng)
            else:
                est = loss_rece(model, twist, config.m, rng)
            twist.vector, state = adam_step(twist.vector, est.grad, state, lr=config.lr)
            bad_streak = 0
        except (EvaluationError, FloatingPointError) as exc:
            bad_streak += 1
            trace.append(iter=it, loss=float("nan"), grad_norm=float("nan"),
                         batch_ess=float("nan"), wall_time=time.perf_counter() - t0)
            if bad_streak >= 3:
                raise TrainingDiverged(f"loss non-finite 3 iterations in a row: {exc}", trace)
            continue
        trace.append(iter=it, loss=est.value,
                     grad_norm=float(np.linalg.norm(est.grad)),
                     batch_ess=est.batch_ess, wall_time=time.perf_counter() - t0)
    return twist, trace
