"""Euler, stochastic anchor, and backward-simulation samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmdlab.errors import ContractViolation
from dmdlab.nets import generator_step

DEFAULT_ANCHORS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class CoarseGrid:
    anchors: tuple[float, ...] = DEFAULT_ANCHORS

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.ndim != 1 or len(a) < 1:
            raise ContractViolation("anchor grid must be a non-empty sequence")
        if np.any(np.diff(a) <= 0):
            raise ContractViolation("anchors must be strictly increasing")
        if a[0] <= 0.0 or a[-1] != 1.0:
            raise ContractViolation("anchors must lie in (0, 1] with the last anchor exactly 1")

    def __len__(self) -> int:
        return len(self.anchors)

    def index(self, tau: float) -> int:
        try:
            return self.anchors.index(tau)
        except ValueError:
            raise ContractViolation(f"{tau} is not an anchor of {self.anchors}") from None

    def lower(self, i: int) -> float:
        """Lower end of the segment (tau_{i-1}, tau_i]; 0 below the first anchor."""
        return 0.0 if i == 0 else self.anchors[i - 1]

    def shifted(self, shift: float) -> "CoarseGrid":
        """Monotone time-shift reparameterisation s*t / (1 + (s-1)*t)."""
        a = np.asarray(self.anchors)
        return CoarseGrid(tuple(float(v) for v in shift * a / (1.0 + (shift - 1.0) * a)))


def uniform_grid(steps: int) -> np.ndarray:
    return np.linspace(1.0, 0.0, steps + 1)


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 1 or len(g) < 2 or g[0] != 1.0 or g[-1] != 0.0 or np.any(np.diff(g) >= 0):
        raise ContractViolation("grid must decrease strictly from 1 to 0")
    return g


def euler_sample(net, grid, z: np.ndarray, cond) -> np.ndarray:
    x = z
    g = _check_grid(grid)
    for t_from, t_to in zip(g[:-1], g[1:]):
        x = generator_step(net, x, float(t_from), float(t_to), cond)
    return x


def _anchor_descent(net, anchors, x, cond, rng, stop_at: float | None, eta: float):
    taus = sorted(anchors, reverse=True)
    for k, tau in enumerate(taus):
        if stop_at is not None and tau == stop_at:
            return x
        x0_hat = x - tau * net.velocity(x, tau, cond)
        if k == len(taus) - 1:
            return x0_hat
        nxt = taus[k + 1]
        eps_hat = (x - (1.0 - tau) * x0_hat) / tau
        noise = eta * rng.standard_normal(x.shape) + np.sqrt(1.0 - eta * eta) * eps_hat if eta < 1.0 else rng.standard_normal(x.shape)
        x = (1.0 - nxt) * x0_hat + nxt * noise
    return x


def stochastic_anchor_sample(net, S: CoarseGrid, z: np.ndarray, cond, rng: np.random.Generator, eta: float = 1.0) -> np.ndarray:
    """Predict x0 at each anchor and re-noise to the next one.

    ``eta`` mixes fresh noise with the noise implied by the prediction; eta = 0 is
    the deterministic anchor sampler (identical to Euler over the anchors).
    """
    if not 0.0 <= eta <= 1.0:
        raise ContractViolation("eta must lie in [0, 1]")
    return _anchor_descent(net, S.anchors, z, cond, rng, None, eta)


def backward_simulate(net, S: CoarseGrid, z: np.ndarray, tau_target: float, cond, rng: np.random.Generator) -> np.ndarray:
    """Noisy state at ``tau_target`` reached by running the anchor sampler from 1."""
    S.index(tau_target)
    return _anchor_descent(net, S.anchors, z, cond, rng, tau_target, 1.0)
