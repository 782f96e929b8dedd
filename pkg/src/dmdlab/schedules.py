"""Forward processes and the score/velocity conversion along them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dmdlab.errors import ContractViolation, UnsupportedOperation

FMOT = "fmot"
DDPM = "ddpm"


def _linear_beta_integral(t):
    # beta(s) = 0.1 + 19.9 s, integrated from 0 to t
    return 0.1 * t + 0.5 * 19.9 * t * t


@dataclass(frozen=True)
class Schedule:
    kind: str = FMOT
    t_min: float = 1e-3
    t_max: float = 1.0
    # integral of beta over [0, t]; only used by DDPM
    beta_integral: Callable = field(default=_linear_beta_integral, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in (FMOT, DDPM):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.t_min < self.t_max <= 1.0):
            raise ContractViolation("need 0 < t_min < t_max <= 1")


@dataclass
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float | np.ndarray
    xt: np.ndarray
    v_target: np.ndarray


def _check_t(t, lo=0.0, hi=1.0):
    arr = np.asarray(t, dtype=np.float64)
    if not np.all((arr >= lo) & (arr <= hi)):
        raise ContractViolation(f"time outside [{lo}, {hi}]: {t}")
    return arr


def alpha_sigma(s: Schedule, t):
    """Signal and noise coefficients of q(x_t | x_0).

    The DDPM branch uses mean coefficient exp(-B/2) and variance 1 - exp(-B/2),
    B the integrated beta; the standard deviation is the square root of that.
    """
    t = _check_t(t)
    if s.kind == FMOT:
        alpha, sigma = 1.0 - t, t
    else:
        decay = np.exp(-0.5 * s.beta_integral(t))
        alpha, sigma = decay, np.sqrt(1.0 - decay)
    if np.ndim(alpha) == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def forward_diffuse(s: Schedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    if np.shape(x0) != np.shape(noise):
        raise ContractViolation(f"shape mismatch: x0 {np.shape(x0)} vs noise {np.shape(noise)}")
    alpha, sigma = alpha_sigma(s, t)
    return alpha * x0 + sigma * noise


def make_path(s: Schedule, x0: np.ndarray, t, rng: np.random.Generator, x1: np.ndarray | None = None) -> PathSample:
    _check_t(t, s.t_min, 1.0)
    if x1 is None:
        x1 = rng.standard_normal(np.shape(x0))
    xt = forward_diffuse(s, x0, t, x1)
    return PathSample(x0=x0, x1=x1, t=t, xt=xt, v_target=x1 - x0)


def score_velocity_factor(s: Schedule, t):
    """a(t) with s_f - s_g = a(t) (v_f - v_g) on the FM-OT path.

    From x_t = (1-t) x_0 + t x_1, Tweedie gives E[x_1 | x_t] = -t * score and
    v = E[x_1 - x_0 | x_t] = -(t * score + x_t) / (1 - t), so a(t) = -(1-t)/t.
    """
    if s.kind != FMOT:
        raise UnsupportedOperation("score/velocity factor is derived for FM-OT only")
    t = _check_t(t, s.t_min, 1.0)
    if np.any(t >= 1.0):
        raise ContractViolation("score/velocity factor is degenerate at t = 1")
    out = -(1.0 - t) / t
    return float(out) if np.ndim(out) == 0 else out


def velocity_to_x0(s: Schedule, xt: np.ndarray, t, v: np.ndarray) -> np.ndarray:
    if s.kind != FMOT:
        raise UnsupportedOperation("x0 reconstruction from velocity requires FM-OT")
    return xt - t * v


def ddpm_index_to_time(index: int, n_steps: int = 1000) -> float:
    """Map a discrete DDPM index (0-based) to continuous time."""
    return (index + 1) / n_steps
