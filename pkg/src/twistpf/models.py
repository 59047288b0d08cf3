"""Benchmark state-space models and dataset generation.

Three models are bundled: a linear Gaussian model (discretized OU process
with linear observations), the NGM-78 nonlinear model, and the Lorenz-96
model with partial observations. Observations are indexed y_{0:n}, with a
potential at every step including k=0. Datasets are generated once per
experiment seed and shared by all methods and replicates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from functools import partial
from pathlib import Path

import numpy as np

from .core import FeynmanKacModel, GaussianKernel, SeedSpec, gaussian_em_kernel


@dataclass(frozen=True)
class LinearGaussianSpec:
    d: int
    dt: float = 0.01
    T: float = 0.5
    obs_var: float = 1.0     # Sigma_OB = obs_var * I
    proc_var: float = 1.0    # Sigma = proc_var * I

    @property
    def n(self) -> int:
        n = round(self.T / self.dt)
        if abs(n * self.dt - self.T) > 1e-9:
            raise ValueError("dt must divide T")
        return n


@dataclass(frozen=True)
class Ngm78Spec:
    d: int
    a0: float = 0.5
    a1: float = 25.0
    a2: float = 0.05
    f: float = 0.0           # constant forcing; the benchmark uses f = 0
    sigma_v2: float = 0.01
    sigma_u2: float = 1.0
    n: int = 50


@dataclass(frozen=True)
class Lorenz96Spec:
    d: int
    alpha: float = 3.0
    sigma: float = 1.0
    obs_var: float = 1.0
    dt: float = 0.05         # discretization step, not stated by the benchmark
    n: int = 50

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("Lorenz-96 needs d >= 3")

    def obs_mask(self) -> np.ndarray:
        h = np.ones(self.d)
        h[self.d - 2:] = 0.0
        return h


@dataclass(frozen=True)
class Dataset:
    model_id: str
    spec_fields: dict
    seed: int
    y: np.ndarray            # (n+1, d_obs)

    def save(self, path: str | Path) -> None:
        payload = {
            "model": self.model_id,
            "spec": self.spec_fields,
            "seed": self.seed,
            "y": self.y.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @staticmethod
    def load(path: str | Path) -> "Dataset":
        payload = json.loads(Path(path).read_text())
        return Dataset(
            model_id=payload["model"],
            spec_fields=payload["spec"],
            seed=payload["seed"],
            y=np.asarray(payload["y"], dtype=float),
        )


def _lgm_drift(x: np.ndarray) -> np.ndarray:
    return -2.0 * x


def _lgm_kernel(spec: LinearGaussianSpec) -> GaussianKernel:
    # EM step of dX = A X dt + dW Sigma^(1/2): mean (I + dt*A) x, cov dt*Sigma.
    # With A = -I this is gaussian_em_kernel(drift 2*A*x, eta = dt/2).
    return gaussian_em_kernel(_lgm_drift, eta=spec.dt * spec.proc_var / 2.0, dim=spec.d)


def _ngm_drift(spec: Ngm78Spec, x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=-1, keepdims=True)
    return spec.a0 * x + spec.a1 * x / (1.0 + sq) + spec.f


def _ngm_kernel(spec: Ngm78Spec) -> GaussianKernel:
    # functools.partial keeps the kernel (and any twist built on it) picklable
    return GaussianKernel(partial(_ngm_drift, spec), var=spec.sigma_v2, dim=spec.d)


def lorenz96_drift(x: np.ndarray, alpha: float) -> np.ndarray:
    """drift_i = -x_{i-1} x_{i-2} + x_{i-1} x_{i+1} - x_i + alpha, indices mod d."""
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return -xm1 * xm2 + xm1 * xp1 - x + alpha


def _lorenz_mean(spec: Lorenz96Spec, x: np.ndarray) -> np.ndarray:
    return x + spec.dt * lorenz96_drift(x, spec.alpha)


def _lorenz_kernel(spec: Lorenz96Spec) -> GaussianKernel:
    return GaussianKernel(partial(_lorenz_mean, spec), var=spec.sigma ** 2 * spec.dt, dim=spec.d)


def _gauss_log_density(resid: np.ndarray, var: float) -> np.ndarray:
    d = resid.shape[-1]
    return -0.5 * np.sum(resid * resid, axis=-1) / var - 0.5 * d * np.log(2.0 * np.pi * var)


def _check_dataset(spec_n: int, model_id: str, d_obs: int, dataset: Dataset) -> None:
    if dataset.model_id != model_id:
        raise ValueError(f"dataset is for model {dataset.model_id!r}, expected {model_id!r}")
    if dataset.y.shape != (spec_n + 1, d_obs):
        raise ValueError(
            f"dataset shape {dataset.y.shape} does not match expected {(spec_n + 1, d_obs)}"
        )


def build_lgm(spec: LinearGaussianSpec, dataset: Dataset) -> FeynmanKacModel:
    _check_dataset(spec.n, "lgm", spec.d, dataset)
    y = dataset.y

    def log_potentials(k, x):
        return _gauss_log_density(x - y[k], spec.obs_var)

    return FeynmanKacModel(
        dim=spec.d, horizon=spec.n, init=np.zeros(spec.d),
        kernel=_lgm_kernel(spec), log_potentials=log_potentials,
        meta={"obs": "gauss_linear", "y": y, "var": spec.obs_var},
    )


def build_ngm78(spec: Ngm78Spec, dataset: Dataset) -> FeynmanKacModel:
    _check_dataset(spec.n, "ngm78", spec.d, dataset)
    y = dataset.y

    def log_potentials(k, x):
        # observation mean is the componentwise square scaled by a2
        return _gauss_log_density(spec.a2 * x * x - y[k], spec.sigma_u2)

    return FeynmanKacModel(
        dim=spec.d, horizon=spec.n, init=np.zeros(spec.d),
        kernel=_ngm_kernel(spec), log_potentials=log_potentials,
        meta={"obs": "gauss_square", "y": y, "var": spec.sigma_u2, "a2": spec.a2},
    )


def build_lorenz96(spec: Lorenz96Spec, dataset: Dataset) -> FeynmanKacModel:
    _check_dataset(spec.n, "lorenz96", spec.d, dataset)
    y = dataset.y
    mask = spec.obs_mask()

    def log_potentials(k, x):
        return _gauss_log_density(x * mask - y[k], spec.obs_var)

    return FeynmanKacModel(
        dim=spec.d, horizon=spec.n, init=np.zeros(spec.d),
        kernel=_lorenz_kernel(spec), log_potentials=log_potentials,
        meta={"obs": "gauss_mask", "y": y, "var": spec.obs_var, "mask": mask},
    )


_BUILDERS = {
    "lgm": (LinearGaussianSpec, build_lgm),
    "ngm78": (Ngm78Spec, build_ngm78),
    "lorenz96": (Lorenz96Spec, build_lorenz96),
}


def model_id_of(spec) -> str:
    for mid, (cls, _) in _BUILDERS.items():
        if isinstance(spec, cls):
            return mid
    raise TypeError(f"unknown spec type {type(spec)!r}")


def build_model(spec, dataset: Dataset) -> FeynmanKacModel:
    return _BUILDERS[model_id_of(spec)][1](spec, dataset)


def generate_dataset(spec, seeds: SeedSpec) -> Dataset:
    """Simulate one latent trajectory and draw observations from it."""
    model_id = model_id_of(spec)
    rng = seeds.rng("dataset")
    if model_id == "lgm":
        kernel, n, d = _lgm_kernel(spec), spec.n, spec.d
        obs = lambda x: x + np.sqrt(spec.obs_var) * rng.standard_normal(d)
    elif model_id == "ngm78":
        kernel, n, d = _ngm_kernel(spec), spec.n, spec.d
        obs = lambda x: spec.a2 * x * x + np.sqrt(spec.sigma_u2) * rng.standard_normal(d)
    else:
        kernel, n, d = _lorenz_kernel(spec), spec.n, spec.d
        mask = spec.obs_mask()
        obs = lambda x: x * mask + np.sqrt(spec.obs_var) * rng.standard_normal(d)

    x = np.zeros(d)
    y = np.empty((n + 1, d))
    y[0] = obs(x)
    for k in range(1, n + 1):
        x = kernel.sample(rng, x)
        y[k] = obs(x)
    return Dataset(model_id=model_id, spec_fields=asdict(spec), seed=seeds.master_seed, y=y)


def spec_from_fields(model_id: str, fields: dict):
    cls = _BUILDERS[model_id][0]
    return cls(**fields)
