"""Conditional 2D toy distributions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dmdlab.errors import ContractViolation, UnsupportedOperation

GAUSSIAN_MIXTURE = "gaussian_mixture"
TWO_MOONS = "two_moons"
CHECKERBOARD = "checkerboard"

UNCONDITIONAL = "unconditional"
COMPONENT_LABEL = "component_label"


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]


@dataclass(frozen=True)
class DatasetSpec:
    family: str = GAUSSIAN_MIXTURE
    components: tuple[Component, ...] = ()
    condition_mode: str = COMPONENT_LABEL
    noise: float = 0.1  # moons jitter
    scale: float = 1.0  # applied to moons/checkerboard draws

    def __post_init__(self):
        if self.family not in (GAUSSIAN_MIXTURE, TWO_MOONS, CHECKERBOARD):
            raise ContractViolation(f"unknown family {self.family!r}")
        if self.condition_mode not in (UNCONDITIONAL, COMPONENT_LABEL):
            raise ContractViolation(f"unknown condition mode {self.condition_mode!r}")
        if self.family == GAUSSIAN_MIXTURE:
            if not self.components:
                raise ContractViolation("mixture needs at least one component")
            w = np.array([c.weight for c in self.components])
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ContractViolation("mixture weights must be positive and sum to 1")
            for c in self.components:
                cov = np.asarray(c.cov, dtype=np.float64)
                if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=0, rtol=0):
                    raise ContractViolation("covariances must be symmetric 2x2")
                if np.linalg.eigvalsh(cov).min() <= 0:
                    raise ContractViolation("covariances must be positive definite")
        if self.family == CHECKERBOARD and self.condition_mode == COMPONENT_LABEL:
            raise ContractViolation("checkerboard is unconditional only")

    @property
    def n_conditions(self) -> int:
        if self.condition_mode == UNCONDITIONAL:
            return 1
        if self.family == GAUSSIAN_MIXTURE:
            return len(self.components)
        return 2  # moons

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components], dtype=np.float64)

    @property
    def covs(self) -> np.ndarray:
        return np.array([c.cov for c in self.components], dtype=np.float64)


def gaussian_mixture(weights, means, covs, condition_mode: str = COMPONENT_LABEL) -> DatasetSpec:
    comps = tuple(
        Component(float(w), tuple(map(float, m)), tuple(tuple(map(float, r)) for r in np.asarray(c)))
        for w, m, c in zip(weights, means, covs)
    )
    return DatasetSpec(GAUSSIAN_MIXTURE, comps, condition_mode)


def ring_mixture(k: int = 8, radius: float = 4.0, std: float = 0.3, condition_mode: str = COMPONENT_LABEL) -> DatasetSpec:
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    # exact 1/k weights summing to 1 within float tolerance
    weights = np.full(k, 1.0 / k)
    weights[-1] = 1.0 - weights[:-1].sum()
    covs = np.repeat((std**2 * np.eye(2))[None], k, axis=0)
    return gaussian_mixture(weights, means, covs, condition_mode)


def mixture_moments(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    w, m, c = spec.weights, spec.means, spec.covs
    mu = w @ m
    second = np.einsum("k,kij->ij", w, c + np.einsum("ki,kj->kij", m, m))
    return mu, second - np.outer(mu, mu)


def standardize(spec: DatasetSpec) -> DatasetSpec:
    """Affinely rescale a mixture to zero mean and unit average per-coordinate variance."""
    if spec.family != GAUSSIAN_MIXTURE:
        raise UnsupportedOperation("standardization is analytic for mixtures only")
    mu, cov = mixture_moments(spec)
    scale = np.sqrt(np.trace(cov) / 2.0)
    return gaussian_mixture(spec.weights, (spec.means - mu) / scale, spec.covs / scale**2, spec.condition_mode)


def default_benchmark() -> DatasetSpec:
    return standardize(ring_mixture())


def sample_batch(spec: DatasetSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ContractViolation("batch size must be positive")
    if spec.family == GAUSSIAN_MIXTURE:
        labels = rng.choice(len(spec.components), size=n, p=spec.weights)
        chol = np.linalg.cholesky(spec.covs)
        eps = rng.standard_normal((n, 2))
        x = spec.means[labels] + np.einsum("nij,nj->ni", chol[labels], eps)
    elif spec.family == TWO_MOONS:
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
        x = spec.scale * (x + spec.noise * rng.standard_normal((n, 2)))
    else:
        labels = np.zeros(n, dtype=np.int64)
        cells = rng.integers(0, 8, size=n)
        col = cells % 4
        row = 2 * (cells // 4) + (col % 2)
        u = rng.uniform(0.0, 1.0, size=(n, 2))
        x = spec.scale * (np.stack([col + u[:, 0], row + u[:, 1]], axis=1) - 2.0)
    if spec.condition_mode == UNCONDITIONAL:
        labels = np.zeros(n, dtype=np.int64)
    return x, labels.astype(np.int64)


def sample_condition(spec: DatasetSpec, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points sharing one condition label."""
    if spec.condition_mode == UNCONDITIONAL:
        return sample_batch(spec, n, rng)[0]
    if spec.family == GAUSSIAN_MIXTURE:
        chol = np.linalg.cholesky(spec.covs[label])
        return spec.means[label] + rng.standard_normal((n, 2)) @ chol.T
    out = np.empty((0, 2))
    while len(out) < n:
        x, lab = sample_batch(spec, 2 * n, rng)
        out = np.concatenate([out, x[lab == label]])
    return out[:n]


def target_log_density(spec: DatasetSpec, x: np.ndarray) -> np.ndarray | float:
    """Exact log density of a Gaussian mixture at one point or an (n, 2) array."""
    if spec.family != GAUSSIAN_MIXTURE:
        raise UnsupportedOperation(f"{spec.family} has no analytic normalized density")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    covs = spec.covs
    inv = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    diff = pts[:, None, :] - spec.means[None]
    maha = np.einsum("nki,kij,nkj->nk", diff, inv, diff)
    logc = np.log(spec.weights)[None] - 0.5 * maha - 0.5 * logdet[None] - np.log(2.0 * np.pi)
    top = logc.max(axis=1, keepdims=True)
    out = (top + np.log(np.exp(logc - top).sum(axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out
