"""Sample-based divergences and training diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from dmdlab.data import DatasetSpec, sample_batch, target_log_density
from dmdlab.errors import ContractViolation
from dmdlab.samplers import CoarseGrid, euler_sample, uniform_grid
from dmdlab.schedules import Schedule, forward_diffuse, velocity_to_x0

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    fd: float
    mmd: float
    kl_est: float | None = None
    xi_curve: list[tuple[float, float]] = field(default_factory=list)
    step_drift: dict[tuple[int, int], float] = field(default_factory=dict)
    diversity: float | None = None
    fd_regularized: bool = False


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    ra = _sym_sqrt(cov_a)
    cross = _sym_sqrt(ra @ cov_b @ ra)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(d, 0.0)


def frechet_gaussian_distance(a: np.ndarray, b: np.ndarray, return_flag: bool = False):
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) of fitted Gaussians."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 32 or len(b) < 32:
        raise ContractViolation("each sample set needs at least 32 points")
    covs = []
    flagged = False
    for s in (a, b):
        c = np.cov(s, rowvar=False)
        if np.linalg.eigvalsh(c).min() <= 1e-12:
            c = c + 1e-8 * np.eye(c.shape[0])
            flagged = True
        covs.append(c)
    if flagged:
        log.warning("degenerate covariance regularized with 1e-8 I")
    fd = frechet_from_moments(a.mean(axis=0), covs[0], b.mean(axis=0), covs[1])
    return (fd, flagged) if return_flag else fd


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    if len(pooled) > 2000:
        pooled = pooled[np.linspace(0, len(pooled) - 1, 2000).astype(int)]
    d = pdist(pooled)
    return float(np.median(d[d > 0])) if np.any(d > 0) else 1.0


def mmd_rbf(a: np.ndarray, b: np.ndarray, bandwidth: float | str = "median") -> float:
    """Unbiased MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2)), clamped at 0.

    A singleton set has no off-diagonal pairs; its within-set term falls back to k(x, x) = 1.
    """
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if h <= 0:
        raise ContractViolation("bandwidth must be positive")
    return max(mmd_rbf_raw(a, b, h), 0.0)


def mmd_rbf_raw(a: np.ndarray, b: np.ndarray, h: float) -> float:
    def within(s):
        n = len(s)
        if n == 1:
            return 1.0
        k = np.exp(-cdist(s, s, "sqeuclidean") / (2 * h * h))
        return (k.sum() - np.trace(k)) / (n * (n - 1))

    cross = np.exp(-cdist(a, b, "sqeuclidean") / (2 * h * h)).mean()
    return float(within(a) + within(b) - 2.0 * cross)


def kde_log_density(train: np.ndarray, x: np.ndarray, bandwidth: float) -> np.ndarray:
    """Log of an isotropic Gaussian KDE fitted on ``train`` evaluated at ``x``."""
    d = train.shape[1]
    sq = cdist(x, train, "sqeuclidean")
    return logsumexp(-sq / (2 * bandwidth**2), axis=1) - np.log(len(train)) - 0.5 * d * np.log(2 * np.pi * bandwidth**2)


def kl_estimate(model_samples: np.ndarray, spec: DatasetSpec, kde_bandwidth: float) -> float:
    """Split-half estimate of KL(model || target): KDE on one half, scored on the other."""
    x = np.asarray(model_samples, dtype=np.float64)
    half = len(x) // 2
    fit, score = x[:half], x[half:]
    log_p = target_log_density(spec, score)
    log_q = np.concatenate([kde_log_density(fit, chunk, kde_bandwidth) for chunk in np.array_split(score, max(1, len(score) // 2000))])
    return float(np.mean(log_q - log_p))


def xi_raw(net, schedule: Schedule, spec: DatasetSpec, t_grid, n: int, rng: np.random.Generator):
    """Per-t mean and standard error of ||x0_hat(x_t, t) - x0||^2."""
    means, ses = [], []
    for t in t_grid:
        x0, cond = sample_batch(spec, n, rng)
        xt = forward_diffuse(schedule, x0, float(t), rng.standard_normal(x0.shape))
        err = np.sum((velocity_to_x0(schedule, xt, float(t), net.velocity(xt, float(t), cond)) - x0) ** 2, axis=1)
        means.append(err.mean())
        ses.append(err.std(ddof=1) / np.sqrt(n))
    return np.asarray(means), np.asarray(ses)


def xi_profile(net, schedule: Schedule, spec: DatasetSpec, t_grid, n: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    means, _ = xi_raw(net, schedule, spec, t_grid, n, rng)
    top = means.max()
    norm = means / top if top > 0 else means
    return [(float(t), float(v)) for t, v in zip(t_grid, norm)]


def step_consistency(G, S: CoarseGrid, step_counts=(4, 8, 16), n: int = 1024, seeds=(0,), n_cond: int = 1) -> dict[tuple[int, int], float]:
    """Mean endpoint distance between Euler samplers of different step counts on shared noise."""
    for k in step_counts:
        if k % len(S) != 0:
            raise ContractViolation(f"{k} steps do not refine the {len(S)}-anchor grid")
    totals = {pair: 0.0 for pair in combinations(step_counts, 2)}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, 2))
        cond = rng.integers(0, n_cond, size=n)
        ends = {k: euler_sample(G, uniform_grid(k), z, cond) for k in step_counts}
        for a, b in totals:
            totals[(a, b)] += float(np.linalg.norm(ends[a] - ends[b], axis=1).mean()) / len(seeds)
    return totals


def pairwise_diversity(groups: dict) -> float:
    vals = []
    for label, pts in groups.items():
        pts = np.asarray(pts, dtype=np.float64)
        if len(pts) < 2:
            log.warning("condition %s has a single sample; skipped", label)
            continue
        vals.append(pdist(pts).mean())
    if not vals:
        raise ContractViolation("no condition has two or more samples")
    return float(np.mean(vals))
