"""Distill with each DMD gradient normalizer and print FD curves side by side.

velocity: a(t) (v_fake - v_real) / mean|v_fake - v_real|
dmd2:     x0-space difference over the teacher's reconstruction error
"""

import argparse
from dataclasses import replace

from dmdlab.config import ExperimentConfig, load_config
from dmdlab.harness import Evaluator, distill_run, ensure_teacher


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--iters", type=int, default=None)
    a = ap.parse_args()
    cfg = load_config(a.config) if a.config else ExperimentConfig()
    if a.iters:
        cfg = cfg.with_train(iters=a.iters)
    cfg = replace(cfg, track=replace(cfg.track, enabled=False))
    teacher = ensure_teacher(cfg)
    ev = Evaluator(cfg, teacher)
    for seed in (int(s) for s in a.seeds.split(",")):
        for norm in ("velocity", "dmd2"):
            res = distill_run(cfg.with_train(dmd_normalizer=norm, seed=seed), teacher, seed, evaluator=ev)
            tail = [v for _, v in res.curve[-5:]]
            print(f"seed {seed} {norm:8s} FD(teacher) {res.fd_teacher:.4f} FD(data) {res.fd_data:.4f} "
                  f"trailing std {res.trailing_std():.4f} last evals {' '.join(f'{v:.4f}' for v in tail)}")


if __name__ == "__main__":
    main()
