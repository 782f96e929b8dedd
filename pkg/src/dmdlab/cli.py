"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dmdlab.charts import emit_charts, emit_summary_chart
from dmdlab.config import ExperimentConfig, dump_config, load_config
from dmdlab.errors import ConfigError, ContractViolation, NumericFailure, SchemaError
from dmdlab.harness import (
    Evaluator, RunManifest, _now, code_version, distill_run, ensure_teacher, isg_early_wins, prepare_run_dir,
    read_csv, run_ablation_ida_ttur, run_ablation_isg, train_teacher, write_csv, LOG_COLUMNS, TRACK_COLUMNS,
)
from dmdlab.metrics import (
    frechet_gaussian_distance, kl_estimate, mmd_rbf, pairwise_diversity, step_consistency, xi_profile,
)
from dmdlab.nets import load_net
from dmdlab.samplers import CoarseGrid, euler_sample, stochastic_anchor_sample, uniform_grid
from dmdlab.schedules import Schedule
from dmdlab.theorylab import (
    Constants, MeanFamily, TrackRecord, check_recursions, family_constants, gaussian_checks, t_grid,
)

log = logging.getLogger("dmdlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _out(args, cfg: ExperimentConfig, sub: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.out) / sub


def _seeds(args, cfg: ExperimentConfig) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.seeds


def _begin(out: Path, cfg: ExperimentConfig, overwrite: bool) -> RunManifest:
    d = prepare_run_dir(out, overwrite)
    (d / "config.yaml").write_text(dump_config(cfg))
    return RunManifest(cfg.hash(), code_version(), _now())


def _finish(out: Path, manifest: RunManifest, **outputs) -> None:
    manifest.finished = _now()
    manifest.outputs = outputs
    manifest.write(out)


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, teacher=replace(cfg.teacher, seed=args.seed))
    _, fd = train_teacher(cfg, _out(args, cfg, "teacher"), args.overwrite)
    print(f"teacher FD(32-step samples, data) = {fd:.5f}")
    return EXIT_OK


def _teacher(args, cfg):
    return load_net(args.teacher) if args.teacher else ensure_teacher(cfg)


def cmd_distill(args) -> int:
    cfg = _config(args)
    teacher = _teacher(args, cfg)
    root = _out(args, cfg, "distill")
    ev = Evaluator(cfg, teacher)
    for seed in _seeds(args, cfg):
        res = distill_run(cfg, teacher, seed, root / f"seed{seed}", args.overwrite, ev)
        emit_charts(res.run_dir)
        print(f"seed {seed}: FD(teacher) {res.fd_teacher:.5f}  FD(data) {res.fd_data:.5f}  "
              f"trailing std {res.trailing_std():.5f}")
    return EXIT_OK


def _generator(args, cfg):
    if args.checkpoint:
        return load_net(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return load_net(Path(cfg.out) / "distill" / f"seed{seed}" / "generator.ckpt")


def _draw(G, cfg, steps: int, n: int, seed: int):
    rng = np.random.default_rng(seed)
    n_cond = cfg.dataset.build().n_conditions
    z = rng.standard_normal((n, 2))
    cond = rng.integers(0, n_cond, size=n)
    if steps == 0:
        x = stochastic_anchor_sample(G, CoarseGrid(tuple(cfg.train.anchors)), z, cond, rng)
    else:
        x = euler_sample(G, uniform_grid(steps), z, cond)
    return x, cond


def cmd_sample(args) -> int:
    cfg = _config(args)
    G = _generator(args, cfg)
    seed = args.seed if args.seed is not None else 0
    x, cond = _draw(G, cfg, args.steps, args.n, seed)
    out = _out(args, cfg, "samples")
    manifest = _begin(out, cfg, args.overwrite)
    rows = [{"x": a, "y": b, "cond": int(c), "seed": seed, "steps": args.steps} for (a, b), c in zip(x, cond)]
    write_csv(out / "samples.csv", ("x", "y", "cond", "seed", "steps"), rows)
    _finish(out, manifest, samples="samples.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    G = _generator(args, cfg)
    teacher = _teacher(args, cfg)
    spec = cfg.dataset.build()
    ev = Evaluator(cfg, teacher)
    x = ev.generate(G)
    groups = {int(c): x[ev.cond == c][:64] for c in np.unique(ev.cond)}
    report = {
        "fd_data": frechet_gaussian_distance(x, ev.x_data),
        "fd_teacher": frechet_gaussian_distance(x, ev.x_teacher),
        "mmd_data": mmd_rbf(x[:2000], ev.x_data[:2000]),
        "kl_est": kl_estimate(x, spec, 0.1) if spec.family == "gaussian_mixture" else None,
        "diversity": pairwise_diversity(groups),
    }
    drift = step_consistency(G, CoarseGrid(tuple(cfg.train.anchors)), (4, 8, 16), 1024, (0,), spec.n_conditions)
    report.update({f"drift_{a}_{b}": v for (a, b), v in drift.items()})
    out = _out(args, cfg, "eval")
    manifest = _begin(out, cfg, args.overwrite)
    write_csv(out / "metrics.csv", ("metric", "value"), [{"metric": k, "value": v} for k, v in sorted(report.items())])
    _finish(out, manifest, metrics="metrics.csv")
    print(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_profile_xi(args) -> int:
    cfg = _config(args)
    net = load_net(args.checkpoint) if args.checkpoint else _teacher(args, cfg)
    seed = args.seed if args.seed is not None else 0
    sched = Schedule(cfg.schedule)
    grid = np.linspace(sched.t_min, 1.0, 40)
    curve = xi_profile(net, sched, cfg.dataset.build(), grid, 4096, np.random.default_rng(seed))
    out = _out(args, cfg, "xi")
    manifest = _begin(out, cfg, args.overwrite)
    write_csv(out / "xi.csv", ("t", "xi"), [{"t": t, "xi": v} for t, v in curve])
    emit_charts(out)
    _finish(out, manifest, xi="xi.csv", chart="xi.svg")
    return EXIT_OK


def _neural_recursions(run_dir: Path):
    _, trows = read_csv(run_dir / "tracking.csv", TRACK_COLUMNS)
    trace = [TrackRecord(**r, proxy=True) for r in trows]
    summary = json.loads((run_dir / "summary.json").read_text())
    c = summary.get("constants")
    if not c:
        raise ConfigError(f"{run_dir} has no estimated constants; rerun with tracking enabled")
    consts = Constants(c["L"], c["C_v"], c["C_vhat"], tuple(c["raw"]), c["safety"])
    return trace, check_recursions(trace, c["lambda_ida"], consts)


def cmd_verify_theory(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else 0
    checks, trace = gaussian_checks(seed)
    out = _out(args, cfg, "theory")
    manifest = _begin(out, cfg, args.overwrite)
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in checks]
    ok = all(c.passed for c in checks)
    rep_rows = []
    if args.run:
        ntrace, rep = _neural_recursions(Path(args.run))
        i_ok = rep.pass_fraction("i") == 1.0
        rest = min(rep.pass_fraction("ii"), rep.pass_fraction("iii"))
        ok = ok and i_ok and rest >= 0.95
        lines.append(f"{'PASS' if i_ok else 'FAIL'} recursion_i_neural: {rep.pass_fraction('i'):.3f} of rounds, worst slack {rep.worst_slack('i'):.2e}")
        lines.append(f"{'PASS' if rest >= 0.95 else 'FAIL'} recursions_ii_iii_neural: "
                     f"{rep.pass_fraction('ii'):.3f} / {rep.pass_fraction('iii'):.3f} of rounds")
        rep_rows = [{"k": r.k, "slack_i": a, "slack_ii": b, "slack_iii": c}
                    for r, a, b, c in zip(ntrace, rep.slacks["i"], rep.slacks["ii"], rep.slacks["iii"])]
    else:
        fam = MeanFamily(np.array([[1.0, 0.3], [0.3, 0.5]]), np.array([0.2, -0.1]), t_grid())
        rep = check_recursions(trace, 0.95, family_constants(fam))
        rep_rows = [{"k": r.k, "slack_i": a, "slack_ii": b, "slack_iii": c}
                    for r, a, b, c in zip(trace, rep.slacks["i"], rep.slacks["ii"], rep.slacks["iii"])]
    write_csv(out / "slack.csv", ("k", "slack_i", "slack_ii", "slack_iii"), rep_rows)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    emit_charts(out)
    _finish(out, manifest, slack="slack.csv", summary="summary.txt")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_ablate_ida_ttur(args) -> int:
    cfg = _config(args)
    teacher = _teacher(args, cfg)
    out = _out(args, cfg, "ablate_ida_ttur")
    prepare_run_dir(out, args.overwrite)
    ttur = tuple(int(v) for v in args.ttur.split(","))
    rows = run_ablation_ida_ttur(cfg, teacher, out, ttur, seeds=_seeds(args, cfg))
    curves = {}
    for r in rows:
        _, lrows = read_csv(out / r["run"] / "log.csv", LOG_COLUMNS)
        curves[r["run"]] = [(x["iter"] // r["ttur"], x["fd_to_teacher"]) for x in lrows if x["fd_to_teacher"] is not None]
    emit_summary_chart(curves, out / "fd_vs_update.svg", "FD to teacher per cell")
    seeds = _seeds(args, cfg)
    wins = 0
    for s in seeds:
        on = next(r for r in rows if r["ttur"] == ttur[0] and r["lambda_ida"] != 1.0 and r["seed"] == s)
        off = next(r for r in rows if r["ttur"] == ttur[0] and r["lambda_ida"] == 1.0 and r["seed"] == s)
        wins += on["trailing_std"] < off["trailing_std"]
        print(f"ttur {ttur[0]} seed {s}: trailing std {on['trailing_std']:.5f} (IDA) vs {off['trailing_std']:.5f}")
    print(f"IDA steadier in {wins}/{len(seeds)} seeds at ttur {ttur[0]}")
    return EXIT_OK if 2 * wins > len(seeds) else EXIT_CHECK


def cmd_ablate_isg(args) -> int:
    cfg = _config(args)
    teacher = _teacher(args, cfg)
    out = _out(args, cfg, "ablate_isg")
    prepare_run_dir(out, args.overwrite)
    rows = run_ablation_isg(cfg, teacher, out, seeds=_seeds(args, cfg))
    wins = isg_early_wins(rows)
    n = len(_seeds(args, cfg))
    print(f"early checkpoint: guidance <= no guidance in {wins}/{n} seeds")
    return EXIT_OK if 2 * wins > n else EXIT_CHECK


def cmd_charts(args) -> int:
    if not args.out:
        raise ConfigError("charts needs --out pointing at a run directory")
    for p in emit_charts(args.out):
        print(p)
    return EXIT_OK


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "profile-xi": cmd_profile_xi,
    "verify-theory": cmd_verify_theory,
    "ablate-ida-ttur": cmd_ablate_ida_ttur,
    "ablate-isg": cmd_ablate_isg,
    "charts": cmd_charts,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmdlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment YAML (defaults when omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        if name in ("distill", "eval", "profile-xi", "ablate-ida-ttur", "ablate-isg"):
            p.add_argument("--teacher", help="teacher checkpoint (trained on demand when omitted)")
        if name in ("sample", "eval", "profile-xi"):
            p.add_argument("--checkpoint", help="network checkpoint")
        if name == "sample":
            p.add_argument("--steps", type=int, default=4, help="Euler steps; 0 uses the stochastic anchor sampler")
            p.add_argument("--n", type=int, default=1024)
        if name == "verify-theory":
            p.add_argument("--run", help="distill run directory whose tracking log to check")
        if name == "ablate-ida-ttur":
            p.add_argument("--ttur", default="5,10,20", help="comma-separated TTUR ratios")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractViolation, SchemaError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericFailure as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
