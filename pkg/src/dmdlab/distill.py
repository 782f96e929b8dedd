"""Distribution-matching distillation with fake-model alignment and segment guidance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dmdlab import ndgrad as nd
from dmdlab.data import DatasetSpec, sample_batch, sample_condition
from dmdlab.errors import ContractViolation, NumericFailure
from dmdlab.ndgrad import AdamW, ParamVector, Tensor, blend_params, param_distance
from dmdlab.nets import Discriminator, DiscConfig, VelocityNet
from dmdlab.samplers import CoarseGrid, backward_simulate
from dmdlab.schedules import Schedule, alpha_sigma, score_velocity_factor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    lambda_ida: float = 0.95
    lambda_isg: float = 1.0
    lambda_g: float = 0.5
    ttur_f: int = 5
    lr_g: float = 1e-4
    lr_fake: float = 1e-4
    lr_d: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    iters: int = 6000
    batch: int = 256
    seed: int = 0
    anchors: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    logitnormal_mu: float = 0.0
    logitnormal_sigma: float = 1.0
    backward_sim_prob: float = 0.5
    isg_final_hop: bool = True
    dmd_t_max: float = 0.98
    dmd_normalizer: str = "velocity"  # or "dmd2"

    def __post_init__(self):
        if not 0.0 < self.lambda_ida <= 1.0:
            raise ContractViolation("lambda_ida must lie in (0, 1]")
        if self.ttur_f < 1 or int(self.ttur_f) != self.ttur_f:
            raise ContractViolation("ttur_f must be a positive integer")
        if not 0.0 <= self.backward_sim_prob <= 1.0:
            raise ContractViolation("backward_sim_prob must lie in [0, 1]")
        if self.lambda_isg < 0:
            raise ContractViolation("lambda_isg must be nonnegative")
        if self.dmd_normalizer not in ("velocity", "dmd2"):
            raise ContractViolation(f"unknown DMD normalizer {self.dmd_normalizer!r}")
        CoarseGrid(tuple(self.anchors))

    @property
    def grid(self) -> CoarseGrid:
        return CoarseGrid(tuple(self.anchors))


@dataclass
class LossBreakdown:
    iter: int
    l_dmd: float
    l_adv_g: float
    l_isg: float
    l_fake_denoise: float
    l_disc: float


@dataclass
class TrainerState:
    theta: ParamVector
    phi: ParamVector
    d_head: ParamVector
    opt_g: AdamW
    opt_fake: AdamW
    opt_d: AdamW
    disc: Discriminator
    k: int = 0

    @classmethod
    def start(cls, teacher: VelocityNet, disc: Discriminator, cfg: TrainConfig) -> "TrainerState":
        n = len(teacher.params)
        return cls(
            theta=teacher.params.copy(),
            phi=teacher.params.copy(),
            d_head=disc.head_params.copy(),
            opt_g=AdamW(n, cfg.lr_g, cfg.betas, weight_decay=cfg.weight_decay),
            opt_fake=AdamW(n, cfg.lr_fake, cfg.betas, weight_decay=cfg.weight_decay),
            opt_d=AdamW(len(disc.head_params), cfg.lr_d, cfg.betas, weight_decay=cfg.weight_decay),
            disc=disc,
        )

    @property
    def discriminator(self) -> Discriminator:
        return self.disc.with_head(self.d_head)


# --------------------------------------------------------------------------
# losses


def sample_logit_normal(n: int, mu: float, sigma: float, rng: np.random.Generator, t_min: float = 1e-3) -> np.ndarray:
    u = rng.normal(mu, sigma, size=n)
    return np.clip(1.0 / (1.0 + np.exp(-u)), t_min, 1.0 - 1e-4)


def dmd_direction(v_fake: np.ndarray, v_real: np.ndarray, t: np.ndarray, schedule: Schedule,
                  normalizer: str = "velocity", x0: np.ndarray | None = None, xt: np.ndarray | None = None) -> np.ndarray:
    """Per-sample distribution-matching direction g (rows), computed without gradient.

    ``velocity``: a(t) (v_fake - v_real) / (mean|v_fake - v_real| + 1e-8).
    ``dmd2``: a(t) (v_fake - v_real) scaled by t^2 / ((1-t) mean|x0 - x0_real|), i.e. the
    x0-space difference over the teacher's reconstruction error.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    diff = v_fake - v_real
    a = score_velocity_factor(schedule, t)
    if normalizer == "velocity":
        g = a * diff / (np.abs(diff).mean(axis=1, keepdims=True) + 1e-8)
    else:
        x0_real = xt - t * v_real
        g = (-t * diff) / (np.abs(x0 - x0_real).mean(axis=1, keepdims=True) + 1e-8)
    if not np.isfinite(g).all():
        bad = t[~np.isfinite(g).all(axis=1)][:, 0]
        raise NumericFailure(f"non-finite DMD direction at t={bad[:3]}", primitive="dmd_direction", t=bad)
    return g


def dmd_generator_loss(x_hat0: Tensor, cond, fake: VelocityNet, teacher: VelocityNet, schedule: Schedule,
                       rng: np.random.Generator, t_max: float = 0.98, normalizer: str = "velocity",
                       t: np.ndarray | None = None, noise: np.ndarray | None = None) -> Tensor:
    """Surrogate 1/2 mean ||x_t - sg(x_t - g)||^2; its gradient is alpha_t * g per sample."""
    x_hat0 = nd.as_tensor(x_hat0)
    n = x_hat0.shape[0]
    if t is None:
        t = rng.uniform(schedule.t_min, t_max, size=n)
    if noise is None:
        noise = rng.standard_normal(x_hat0.shape)
    tc = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    alpha, sigma = alpha_sigma(schedule, tc)
    xt = nd.add(nd.mul(x_hat0, alpha), sigma * noise)
    v_fake = fake.velocity(xt.value, t, cond)
    v_real = teacher.velocity(xt.value, t, cond)
    g = dmd_direction(v_fake, v_real, t, schedule, normalizer, x0=x_hat0.value, xt=xt.value)
    target = nd.stop_gradient(xt.value - g)
    return nd.mul(nd.mean(nd.sum(nd.square(nd.sub(xt, target)), axis=1)), 0.5)


def isg_loss(v_gen: Tensor, x_tau: np.ndarray, tau: float, lower: float, G: VelocityNet, teacher: VelocityNet,
             cond, rng: np.random.Generator, t_mid: np.ndarray | None = None) -> Tensor:
    """Segment guidance for the hop tau -> lower.

    ``v_gen`` is the differentiable generator velocity at (x_tau, tau). The target
    is a teacher Euler step to t_mid followed by a generator step to ``lower``.
    """
    n = x_tau.shape[0]
    if t_mid is None:
        t_mid = rng.uniform(lower, tau, size=n)
    t_mid = np.asarray(t_mid, dtype=np.float64)
    if np.any(t_mid <= lower) or np.any(t_mid >= tau):
        raise ContractViolation("t_mid must lie strictly inside the segment")
    tm = t_mid.reshape(-1, 1) if t_mid.ndim else t_mid
    x_mid = x_tau + (tm - tau) * teacher.velocity(x_tau, tau, cond)
    x_tar = x_mid + (lower - tm) * G.velocity(x_mid, t_mid, cond)
    x_pred = nd.add(x_tau, nd.mul(v_gen, lower - tau))
    return nd.mean(nd.sum(nd.square(nd.sub(x_pred, nd.stop_gradient(x_tar))), axis=1))


def adversarial_weight(schedule: Schedule, tau: float) -> float:
    alpha, _ = alpha_sigma(schedule, tau)
    return alpha * alpha


def adversarial_g_loss(logits: Tensor, tau: float, schedule: Schedule) -> Tensor:
    """-alpha_tau^2 * mean D(x_hat0)."""
    return nd.mul(nd.mean(logits), -adversarial_weight(schedule, tau))


def hinge_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return nd.add(
        nd.mean(nd.clamp_min(nd.sub(1.0, real_logits), 0.0)),
        nd.mean(nd.clamp_min(nd.add(1.0, fake_logits), 0.0)),
    )


def discriminator_loss(D: Discriminator, head: dict, x_real, x_fake, cond, ref_real, ref_fake) -> Tensor:
    """Hinge loss on points; x_fake is detached."""
    x_fake = nd.stop_gradient(x_fake).value
    return discriminator_loss_features(
        D, head, D.backbone(np.asarray(x_real)), D.backbone(x_fake), cond, D.backbone(ref_real), D.backbone(ref_fake)
    )


def discriminator_loss_features(D: Discriminator, head: dict, f_real, f_fake, cond, r_real, r_fake) -> Tensor:
    """Hinge loss from precomputed frozen-backbone features."""
    return hinge_loss(
        D.apply_features(head, nd.as_tensor(f_real), cond, r_real),
        D.apply_features(head, nd.as_tensor(f_fake), cond, r_fake),
    )


def fake_denoise_loss(net: VelocityNet, p: dict, x: np.ndarray, cond, schedule: Schedule, rng: np.random.Generator,
                      mu: float = 0.0, sigma: float = 1.0, t: np.ndarray | None = None,
                      x1: np.ndarray | None = None) -> Tensor:
    """Flow-matching regression of the fake velocity onto x1 - x along the path from stop_grad(x)."""
    x = np.asarray(nd.stop_gradient(x).value)
    n = x.shape[0]
    if t is None:
        t = sample_logit_normal(n, mu, sigma, rng, schedule.t_min)
    if x1 is None:
        x1 = rng.standard_normal(x.shape)
    tc = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    xt = (1.0 - tc) * x + tc * x1
    pred = net.apply(p, xt, t, cond)
    return nd.mean(nd.sum(nd.square(nd.sub(pred, x1 - x)), axis=1))


def ida_update(state: TrainerState, lambda_ida: float) -> None:
    state.phi = blend_params(state.phi, state.theta, lambda_ida)


# --------------------------------------------------------------------------
# training loop


def pick_references(x_real: np.ndarray, real_cond: np.ndarray, cond: np.ndarray, data: DatasetSpec,
                    rng: np.random.Generator, real_values: np.ndarray | None = None) -> np.ndarray:
    """For each label in ``cond`` choose a real batch sample with that label (resampled when absent).

    ``real_values`` (rows aligned with ``x_real``, e.g. backbone features) is gathered
    instead of the points themselves when given; resampled points are returned raw.
    """
    src = x_real if real_values is None else real_values
    ref = np.empty((len(cond), src.shape[1]))
    for label in np.unique(cond):
        rows = np.flatnonzero(cond == label)
        pool = np.flatnonzero(real_cond == label)
        if len(pool):
            ref[rows] = src[pool[rng.integers(0, len(pool), size=len(rows))]]
        else:
            if real_values is not None:
                raise ContractViolation(f"no real sample with label {label} to take features from")
            ref[rows] = sample_condition(data, int(label), len(rows), rng)
    return ref


@dataclass
class Streams:
    """Independent RNG streams so optional terms never shift other draws."""

    data: np.random.Generator
    sim: np.random.Generator
    dmd: np.random.Generator
    isg: np.random.Generator
    fake: np.random.Generator
    disc: np.random.Generator
    init: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        kids = np.random.SeedSequence(seed).spawn(7)
        return cls(*[np.random.default_rng(k) for k in kids])


@dataclass
class TrainLog:
    losses: list[LossBreakdown] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    tracking: list = field(default_factory=list)
    n_generator_updates: int = 0
    n_ida: int = 0


def _guard(it: int, **losses):
    for name, v in losses.items():
        if v is None:
            continue
        if not np.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            raise NumericFailure(f"divergence at iteration {it}: {name}={v}", primitive=name, iteration=it)


def train(cfg: TrainConfig, teacher: VelocityNet, data: DatasetSpec, schedule: Schedule | None = None,
          disc_config: DiscConfig | None = None, callback: Callable | None = None,
          tracker=None) -> tuple[TrainerState, TrainLog]:
    """Run the distillation loop.

    ``callback(it, state, row)`` runs at the end of each iteration and may add
    columns to ``row``. ``tracker`` (if given) is called as
    ``tracker.before(state)`` / ``tracker.after(state)`` around each generator round.
    """
    schedule = schedule or Schedule()
    grid = cfg.grid
    rs = Streams.from_seed(cfg.seed)
    disc = Discriminator.init(disc_config or DiscConfig(n_cond=teacher.config.n_cond), rs.init)
    state = TrainerState.start(teacher, disc, cfg)
    tlog = TrainLog()

    for it in range(1, cfg.iters + 1):
        G = teacher.with_params(state.theta)
        fake = teacher.with_params(state.phi)
        x_real, cond = sample_batch(data, cfg.batch, rs.data)
        z = rs.data.standard_normal(x_real.shape)
        i = int(rs.data.integers(0, len(grid)))
        tau = grid.anchors[i]
        if rs.sim.random() < cfg.backward_sim_prob:
            x_tau = backward_simulate(G, grid, z, tau, cond, rs.sim)
        else:
            x_tau = (1.0 - tau) * x_real + tau * z
        feat_real = disc.backbone(x_real)
        ref = pick_references(x_real, cond, cond, data, rs.disc, feat_real)

        row = {"iter": it}
        l_dmd = l_adv = l_isg = None
        if it % cfg.ttur_f == 0:
            if tracker is not None:
                tracker.before(state)
            theta_old = state.theta
            lower = grid.lower(i)
            use_isg = cfg.lambda_isg > 0 and (i > 0 or cfg.isg_final_hop)
            parts = {}

            def gen_loss(p):
                v = G.apply(p, x_tau, tau, cond)
                x_hat0 = nd.sub(x_tau, nd.mul(v, tau))
                ldmd = dmd_generator_loss(x_hat0, cond, fake, teacher, schedule, rs.dmd, cfg.dmd_t_max, cfg.dmd_normalizer)
                total = ldmd
                parts["dmd"] = ldmd.item()
                if cfg.lambda_g > 0:
                    fx = disc.features(disc.backbone_params.unflatten(), x_hat0)
                    logits = disc.apply_features(state.d_head.unflatten(), fx, cond, ref)
                    ladv = adversarial_g_loss(logits, tau, schedule)
                    parts["adv"] = ladv.item()
                    total = nd.add(total, nd.mul(ladv, cfg.lambda_g))
                if use_isg:
                    lisg = isg_loss(v, x_tau, tau, lower, G, teacher, cond, rs.isg)
                    parts["isg"] = lisg.item()
                    total = nd.add(total, nd.mul(lisg, cfg.lambda_isg))
                parts["x0"] = x_hat0.value
                return total

            _, g = nd.value_and_grad(gen_loss, state.theta)
            x_fake = parts["x0"]
            l_dmd, l_adv, l_isg = parts["dmd"], parts.get("adv", 0.0), parts.get("isg", 0.0)
            _guard(it, l_dmd=l_dmd, l_adv_g=l_adv, l_isg=l_isg)
            state.theta = state.opt_g.step(state.theta, g)
            ida_update(state, cfg.lambda_ida)
            state.k += 1
            tlog.n_generator_updates += 1
            tlog.n_ida += 1
            row["theta_step"] = param_distance(state.theta, theta_old)
            if tracker is not None:
                tlog.tracking.append(tracker.after(state, theta_old))
        else:
            x_fake = x_tau - tau * G.velocity(x_tau, tau, cond)

        fake_net = teacher.with_params(state.phi)
        l_fake, gf = nd.value_and_grad(
            lambda p: fake_denoise_loss(fake_net, p, x_fake, cond, schedule, rs.fake, cfg.logitnormal_mu, cfg.logitnormal_sigma),
            state.phi,
        )
        _guard(it, l_fake=l_fake)
        state.phi = state.opt_fake.step(state.phi, gf)

        ref_real = pick_references(x_real, cond, cond, data, rs.disc, feat_real)
        feat_fake = disc.backbone(x_fake)
        l_disc, gd = nd.value_and_grad(
            lambda hp: discriminator_loss_features(disc, hp, feat_real, feat_fake, cond, ref_real, ref), state.d_head
        )
        _guard(it, l_disc=l_disc)
        state.d_head = state.opt_d.step(state.d_head, gd)

        row.update(l_dmd=l_dmd, l_adv_g=l_adv, l_isg=l_isg, l_fake=l_fake, l_disc=l_disc)
        if l_dmd is not None:
            tlog.losses.append(LossBreakdown(it, l_dmd, l_adv, l_isg, l_fake, l_disc))
        if callback is not None:
            callback(it, state, row)
        tlog.rows.append(row)
    return state, tlog
