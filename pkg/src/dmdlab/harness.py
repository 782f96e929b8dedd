"""Experiment orchestration: teacher training, distillation runs, ablation grids, run directories."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import dmdlab
from dmdlab import ndgrad as nd
from dmdlab.config import ExperimentConfig, dump_config
from dmdlab.data import sample_batch
from dmdlab.distill import TrainConfig, fake_denoise_loss, train
from dmdlab.errors import ConfigError, NumericFailure, SchemaError
from dmdlab.metrics import frechet_gaussian_distance
from dmdlab.nets import VelocityNet, load_net, save_net
from dmdlab.samplers import CoarseGrid, euler_sample, stochastic_anchor_sample, uniform_grid
from dmdlab.schedules import Schedule
from dmdlab.theorylab import NeuralTracker, TrackRecord, check_recursions, neural_constants

log = logging.getLogger(__name__)

SCHEMA = "# schema=1"
LOG_COLUMNS = ("iter", "l_dmd", "l_adv_g", "l_isg", "l_fake", "l_disc", "e_k", "delta_k", "dbar_k", "betabar_k", "fd_to_teacher")
TRACK_COLUMNS = ("k", "e_k", "delta_k", "dbar_k", "betabar_k", "theta_step", "e_post", "delta_post", "dbar_post", "dtilde_k", "betatilde_k")


# --------------------------------------------------------------------------
# CSV and run directories


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip decimal
    return str(v)


def write_csv(path, columns, rows) -> None:
    lines = [SCHEMA, ",".join(columns)]
    lines += [",".join(_fmt(r.get(c)) for c in columns) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path, required=()) -> tuple[list[str], list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SCHEMA:
        raise SchemaError(f"{path}: missing '{SCHEMA}' header line")
    if len(lines) < 2:
        raise SchemaError(f"{path}: missing column header")
    columns = lines[1].split(",")
    for c in required:
        if c not in columns:
            raise SchemaError(f"{path}: missing column {c!r}")
    rows = [dict(zip(columns, map(_parse, ln.split(",")))) for ln in lines[2:] if ln]
    return columns, rows


def code_version() -> str:
    root = Path(dmdlab.__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{dmdlab.__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    started: str
    finished: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, run_dir) -> None:
        Path(run_dir, "manifest.json").write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        return cls(**json.loads(Path(run_dir, "manifest.json").read_text()))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def prepare_run_dir(path, overwrite: bool = False) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        if not overwrite:
            raise ConfigError(f"run directory {p} already exists; pass --overwrite to replace it")
        shutil.rmtree(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def completed_run(path, cfg: ExperimentConfig) -> bool:
    """A finished run of exactly this config and code version lives at ``path``."""
    try:
        m = RunManifest.read(path)
    except (OSError, json.JSONDecodeError, TypeError):
        return False
    return m.finished is not None and m.config_hash == cfg.hash() and m.code_version == code_version()


# --------------------------------------------------------------------------
# teacher


def train_teacher(cfg: ExperimentConfig, out=None, overwrite: bool = False) -> tuple[VelocityNet, float]:
    """Flow-matching regression with uniform t and a cosine learning-rate decay.

    Returns the net and the FD between 32-step Euler samples and data.
    """
    cfg = _teacher_view(cfg)
    started = _now()
    tc = cfg.teacher
    spec = cfg.dataset.build()
    schedule = Schedule(cfg.schedule)
    rng = np.random.default_rng(tc.seed)
    net = VelocityNet.init(cfg.net, rng)
    opt = nd.AdamW(len(net.params), tc.lr)
    p = net.params
    rows = []
    for it in range(1, tc.iters + 1):
        x, cond = sample_batch(spec, tc.batch, rng)
        t = rng.uniform(schedule.t_min, 1.0, tc.batch)
        opt.lr = tc.lr * 0.5 * (1.0 + math.cos(math.pi * it / tc.iters))
        loss, g = nd.value_and_grad(lambda q: fake_denoise_loss(net, q, x, cond, schedule, rng, t=t), p)
        if not np.isfinite(loss) or loss > 1e6:
            raise NumericFailure(f"teacher diverged at iteration {it}: loss={loss}", primitive="teacher", iteration=it)
        p = opt.step(p, g)
        if it % 100 == 0:
            rows.append({"iter": it, "loss": loss})
    net = net.with_params(p)
    ev = Evaluator.data_only(cfg)
    fd = frechet_gaussian_distance(euler_sample(net, uniform_grid(tc.eval_steps), ev.z, ev.cond), ev.x_data)
    if out is not None:
        d = prepare_run_dir(out, overwrite)
        manifest = RunManifest(cfg.hash(), code_version(), started)
        (d / "config.yaml").write_text(dump_config(cfg))
        save_net(d / "teacher.ckpt", net, fd_to_data=fd)
        rows.append({"iter": tc.iters, "loss": None, "fd_to_data": fd})
        write_csv(d / "teacher.csv", ("iter", "loss", "fd_to_data"), rows)
        manifest.finished = _now()
        manifest.outputs = {"checkpoint": "teacher.ckpt", "log": "teacher.csv"}
        manifest.write(d)
    log.info("teacher FD to data %.5f", fd)
    return net, fd


def teacher_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "teacher" / "teacher.ckpt"


def ensure_teacher(cfg: ExperimentConfig) -> VelocityNet:
    """Load the experiment's teacher, training it first if no finished teacher run exists."""
    d = teacher_path(cfg).parent
    if completed_run(d, _teacher_view(cfg)):
        return load_net(teacher_path(cfg))
    net, _ = train_teacher(_teacher_view(cfg), d, overwrite=True)
    return net


def _teacher_view(cfg: ExperimentConfig) -> ExperimentConfig:
    # the teacher depends only on data, net and teacher settings
    return ExperimentConfig(dataset=cfg.dataset, schedule=cfg.schedule, net=cfg.net, teacher=cfg.teacher,
                            eval=cfg.eval, seeds=(0,), out=cfg.out)


# --------------------------------------------------------------------------
# evaluation


class Evaluator:
    """Fixed evaluation noise, data and teacher reference samples shared by every run."""

    def __init__(self, cfg: ExperimentConfig, teacher: VelocityNet | None):
        ec = cfg.eval
        spec = cfg.dataset.build()
        rng = np.random.default_rng(ec.seed)
        self.x_data, _ = sample_batch(spec, ec.n, rng)
        self.z = rng.standard_normal((ec.n, 2))
        self.cond = rng.integers(0, spec.n_conditions, size=ec.n)
        self.grid = CoarseGrid(tuple(cfg.train.anchors))
        self.sampler_seed = ec.seed + 1
        self.x_teacher = None
        if teacher is not None:
            self.x_teacher = euler_sample(teacher, uniform_grid(cfg.teacher.eval_steps), self.z, self.cond)

    @classmethod
    def data_only(cls, cfg: ExperimentConfig) -> "Evaluator":
        return cls(cfg, None)

    def generate(self, G: VelocityNet) -> np.ndarray:
        return stochastic_anchor_sample(G, self.grid, self.z, self.cond, np.random.default_rng(self.sampler_seed))

    def fd_to_teacher(self, G: VelocityNet) -> float:
        return frechet_gaussian_distance(self.generate(G), self.x_teacher)


# --------------------------------------------------------------------------
# distillation runs


@dataclass
class DistillResult:
    run_dir: Path | None
    curve: list[tuple[int, float]]
    fd_teacher: float
    fd_data: float
    tracking: list[TrackRecord]
    generator: VelocityNet
    constants: dict | None = None

    def fd_at(self, it: int) -> float:
        for i, v in self.curve:
            if i == it:
                return v
        raise KeyError(it)

    def trailing_std(self, frac: float = 0.25) -> float:
        return trailing_window_std(self.curve, frac)


def trailing_window_std(curve, frac: float = 0.25) -> float:
    """Sample std of FD over the evaluations in the last ``frac`` of training."""
    its = np.array([c[0] for c in curve], dtype=float)
    fds = np.array([c[1] for c in curve], dtype=float)
    tail = fds[its > (1.0 - frac) * its.max()]
    return float(tail.std(ddof=1)) if len(tail) > 1 else 0.0


def distill_run(cfg: ExperimentConfig, teacher: VelocityNet, seed: int, out=None, overwrite: bool = False,
                evaluator: Evaluator | None = None) -> DistillResult:
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed, "anchors": tuple(cfg.train.anchors), "betas": tuple(cfg.train.betas)})
    ev = evaluator or Evaluator(cfg, teacher)
    run_dir = prepare_run_dir(out, overwrite) if out is not None else None
    manifest = RunManifest(cfg.hash(), code_version(), _now())
    if run_dir is not None:
        (run_dir / "config.yaml").write_text(dump_config(cfg))
        manifest.write(run_dir)

    tracker = None
    if cfg.track.enabled:
        tracker = NeuralTracker(teacher, tcfg.grid, cfg.track.n, cfg.track.seed, cfg.track.keep_every, Schedule(cfg.schedule))
    curve = []

    def on_iter(it, state, row):
        if it % cfg.eval.every == 0 or it == tcfg.iters:
            fd = ev.fd_to_teacher(teacher.with_params(state.theta))
            row["fd_to_teacher"] = fd
            curve.append((it, fd))

    state, tlog = train(tcfg, teacher, cfg.dataset.build(), Schedule(cfg.schedule), cfg.disc, on_iter, tracker)
    # tracking values land on the row of the iteration that ran the generator round
    gen_rows = [r for r in tlog.rows if r.get("l_dmd") is not None]
    for row, rec in zip(gen_rows, tlog.tracking):
        row.update(e_k=rec.e_k, delta_k=rec.delta_k, dbar_k=rec.dbar_k, betabar_k=rec.betabar_k)

    G = teacher.with_params(state.theta)
    x_gen = ev.generate(G)
    result = DistillResult(
        run_dir, curve, frechet_gaussian_distance(x_gen, ev.x_teacher), frechet_gaussian_distance(x_gen, ev.x_data),
        tlog.tracking, G,
    )
    if tracker is not None and tracker.snapshots:
        c = neural_constants(teacher, tracker.snapshots, tcfg.grid, cfg.track.probe_scale, cfg.track.n_probes, seed)
        result.constants = {"L": c.L, "C_v": c.C_v, "C_vhat": c.C_vhat, "safety": c.safety,
                            "raw": list(c.raw), "lambda_ida": tcfg.lambda_ida}
        if len(tlog.tracking) >= 2:
            rep = check_recursions(tlog.tracking, tcfg.lambda_ida, c)
            result.constants["pass"] = {k: v[0] for k, v in rep.summary().items()}
            result.constants["worst_slack"] = {k: v[1] for k, v in rep.summary().items()}
        tracker.snapshots.clear()
    if run_dir is not None:
        write_csv(run_dir / "log.csv", LOG_COLUMNS, tlog.rows)
        write_csv(run_dir / "tracking.csv", TRACK_COLUMNS, [asdict(r) for r in tlog.tracking])
        save_net(run_dir / "generator.ckpt", G, seed=seed)
        save_net(run_dir / "fake.ckpt", teacher.with_params(state.phi), seed=seed)
        summary = {"fd_teacher": result.fd_teacher, "fd_data": result.fd_data,
                   "trailing_std": result.trailing_std(), "constants": result.constants}
        (run_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        manifest.finished = _now()
        manifest.outputs = {"log": "log.csv", "tracking": "tracking.csv", "generator": "generator.ckpt",
                            "fake": "fake.ckpt", "summary": "summary.json"}
        manifest.write(run_dir)
    return result


def load_result(run_dir, teacher: VelocityNet) -> DistillResult:
    """Rebuild a result from a finished run directory."""
    d = Path(run_dir)
    _, rows = read_csv(d / "log.csv", LOG_COLUMNS)
    curve = [(r["iter"], r["fd_to_teacher"]) for r in rows if r["fd_to_teacher"] is not None]
    _, trows = read_csv(d / "tracking.csv", TRACK_COLUMNS)
    tracking = [TrackRecord(**r, proxy=True) for r in trows]
    summary = json.loads((d / "summary.json").read_text())
    G = load_net(d / "generator.ckpt")
    return DistillResult(d, curve, summary["fd_teacher"], summary["fd_data"], tracking, G, summary["constants"])


def cached_run(cfg: ExperimentConfig, teacher: VelocityNet, seed: int, out, evaluator=None) -> DistillResult:
    """Reuse a finished run of the same config and code version, otherwise run it."""
    if completed_run(out, cfg):
        return load_result(out, teacher)
    return distill_run(cfg, teacher, seed, out, overwrite=True, evaluator=evaluator)


# --------------------------------------------------------------------------
# ablations


def _cell_name(ttur: int, lam: float, seed: int) -> str:
    tag = "off" if lam == 1.0 else f"{lam:g}"
    return f"ttur{ttur}_ida{tag}_seed{seed}"


def run_ablation_ida_ttur(cfg: ExperimentConfig, teacher: VelocityNet, out, ttur_values=(5, 10, 20),
                          lambdas=None, seeds=None, reuse: bool = False) -> list[dict]:
    """IDA on/off across TTUR ratios; one run directory per (ttur, lambda, seed) cell."""
    lambdas = lambdas if lambdas is not None else (cfg.train.lambda_ida, 1.0)
    seeds = seeds if seeds is not None else cfg.seeds
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev = Evaluator(cfg, teacher)
    rows = []
    for ttur in ttur_values:
        for lam in lambdas:
            for seed in seeds:
                cell = cfg.with_train(ttur_f=ttur, lambda_ida=lam, seed=seed)
                d = out / _cell_name(ttur, lam, seed)
                res = cached_run(cell, teacher, seed, d, ev) if reuse else distill_run(cell, teacher, seed, d, evaluator=ev)
                rows.append({"ttur": ttur, "lambda_ida": lam, "seed": seed, "terminal_fd": res.curve[-1][1],
                             "trailing_std": res.trailing_std(), "fd_data": res.fd_data, "run": d.name})
    write_csv(out / "summary.csv", ("ttur", "lambda_ida", "seed", "terminal_fd", "trailing_std", "fd_data", "run"), rows)
    return rows


ISG_CHECKPOINTS = (0.10, 0.25, 0.50, 1.00)


def run_ablation_isg(cfg: ExperimentConfig, teacher: VelocityNet, out, seeds=None, reuse: bool = False) -> list[dict]:
    """With and without segment guidance; FD at 10/25/50/100% of training."""
    seeds = seeds if seeds is not None else cfg.seeds
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev = Evaluator(cfg, teacher)
    iters = cfg.train.iters
    marks = [max(1, round(f * iters)) for f in ISG_CHECKPOINTS]
    if any(m % cfg.eval.every and m != iters for m in marks):
        raise ConfigError(f"eval cadence {cfg.eval.every} does not hit the checkpoints {marks}")
    rows = []
    for setting, lam in (("isg", cfg.train.lambda_isg or 1.0), ("no_isg", 0.0)):
        for seed in seeds:
            cell = cfg.with_train(lambda_isg=lam, seed=seed)
            d = out / f"{setting}_seed{seed}"
            res = cached_run(cell, teacher, seed, d, ev) if reuse else distill_run(cell, teacher, seed, d, evaluator=ev)
            for frac, m in zip(ISG_CHECKPOINTS, marks):
                rows.append({"setting": setting, "seed": seed, "fraction": frac, "iter": m, "fd": res.fd_at(m)})
    write_csv(out / "summary.csv", ("setting", "seed", "fraction", "iter", "fd"), rows)
    return rows


def isg_early_wins(rows: list[dict]) -> int:
    """Seeds where FD at the 10% checkpoint with guidance is <= without."""
    early = {(r["setting"], r["seed"]): r["fd"] for r in rows if r["fraction"] == ISG_CHECKPOINTS[0]}
    seeds = sorted({s for _, s in early})
    return sum(early[("isg", s)] <= early[("no_isg", s)] for s in seeds)
