"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The distillation criteria (6 to 9, 11, 12) share one set of cached runs under
``runs/acceptance``; a run is reused only when its manifest matches the current
config hash and code version, so the first invocation trains everything.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from dmdlab import ndgrad as nd
from dmdlab.config import ExperimentConfig
from dmdlab.data import default_benchmark, gaussian_mixture, sample_batch
from dmdlab.distill import fake_denoise_loss
from dmdlab.harness import (
    TRACK_COLUMNS, Evaluator, cached_run, distill_run, ensure_teacher, read_csv, trailing_window_std,
)
from dmdlab.metrics import step_consistency, xi_profile, xi_raw
from dmdlab.nets import NetConfig, VelocityNet
from dmdlab.samplers import CoarseGrid
from dmdlab.schedules import Schedule, forward_diffuse
from dmdlab.theorylab import Constants, TrackRecord, check_recursions, gaussian_checks, gaussian_target_field

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1] / "runs" / "acceptance"
SEEDS = (0, 1, 2)
FM = Schedule()


def report(capsys, n: int, ok: bool, detail: str, elapsed: float | None = None) -> None:
    took = f" [{elapsed:.1f}s]" if elapsed is not None else ""
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'} {detail}{took}")
    assert ok, detail


# ---- closed-form and unit-scale criteria


def test_c01_autodiff_matches_finite_differences(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    spec = default_benchmark()
    worst = 0.0
    for i in range(50):
        cfg = NetConfig(width=int(rng.integers(4, 17)), depth=int(rng.integers(1, 4)), time_dim=4, cond_dim=3)
        net = VelocityNet.init(cfg, rng)
        x, cond = sample_batch(spec, 8, rng)
        t = rng.uniform(0.01, 1.0, 8)
        if i % 2:
            x1 = rng.standard_normal(x.shape)

            def loss(p):
                return fake_denoise_loss(net, p, x, cond, FM, None, t=t, x1=x1)
        else:
            w = rng.standard_normal(x.shape)

            def loss(p):
                return nd.mean(nd.mul(nd.tanh(net.apply(p, x, t, cond)), w))

        g = nd.grad(loss, net.params).flat
        idx = rng.choice(len(net.params), 20, replace=False)
        fd = np.empty(len(idx))
        for j, k in enumerate(idx):
            up, dn = net.params.flat.copy(), net.params.flat.copy()
            up[k] += 1e-6
            dn[k] -= 1e-6
            fd[j] = (loss(net.params.with_flat(up).unflatten()).item() - loss(net.params.with_flat(dn).unflatten()).item()) / 2e-6
        worst = max(worst, np.linalg.norm(g[idx] - fd) / max(np.linalg.norm(fd), 1e-12))
    elapsed = time.perf_counter() - start
    report(capsys, 1, worst < 1e-4 and elapsed < 10, f"50 instances, worst relative error {worst:.2e}", elapsed)


def test_c02_forward_kernel_moments(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    n = 100_000
    x0 = np.array([1.5, -0.7])
    ok = True
    worst = 0.0
    for t in (0.25, 0.5, 0.9):
        xt = forward_diffuse(FM, np.tile(x0, (n, 1)), t, rng.standard_normal((n, 2)))
        var = t * t
        z_mean = np.abs(xt.mean(0) - (1 - t) * x0) / np.sqrt(var / n)
        cov = np.cov(xt.T)
        target = var * np.eye(2)
        # sample covariance entries have variance (S_ii S_jj + S_ij^2) / n
        se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
        z_cov = np.abs(cov - target) / se
        worst = max(worst, z_mean.max(), z_cov.max())
        ok &= bool(np.all(z_mean < 3) and np.all(z_cov < 3))
    elapsed = time.perf_counter() - start
    report(capsys, 2, ok and elapsed < 5, f"largest deviation {worst:.2f} standard errors", elapsed)


@pytest.fixture(scope="module")
def closed_form():
    start = time.perf_counter()
    checks, _ = gaussian_checks(seed=0)
    return {c.name: c for c in checks}, time.perf_counter() - start


def test_c03_score_velocity_factor(capsys):
    start = time.perf_counter()
    from dmdlab.theorylab import random_world, score_velocity_residual

    rng = np.random.default_rng(3)
    pts = np.stack(np.meshgrid(np.linspace(-3, 3, 10), np.linspace(-3, 3, 10)), -1).reshape(-1, 2)
    worst = 0.0
    for _ in range(20):
        w = random_world(rng)
        for t in np.arange(1, 10) / 10:
            worst = max(worst, score_velocity_residual((w.fake, w.generator), float(t), pts))
    elapsed = time.perf_counter() - start
    report(capsys, 3, worst < 1e-8 and elapsed < 5, f"max residual {worst:.2e} over 20 pairs x 9 times x 100 points", elapsed)


def test_c04_epsilon_bound(capsys, closed_form):
    checks, elapsed = closed_form
    c = checks["epsilon_bound"]
    report(capsys, 4, c.passed, c.detail)


def test_c05_sandwich(capsys, closed_form):
    checks, elapsed = closed_form
    c = checks["sandwich"]
    report(capsys, 5, c.passed and elapsed < 60, c.detail, elapsed)


# ---- distillation criteria


@pytest.fixture(scope="module")
def suite():
    cfg = ExperimentConfig(out=str(ROOT))
    teacher = ensure_teacher(cfg)
    ev = Evaluator(cfg, teacher)
    runs = {}
    timings = {}
    for lam, tag in ((cfg.train.lambda_ida, "ida"), (1.0, "noida")):
        for s in SEEDS:
            cell = cfg.with_train(ttur_f=5, lambda_ida=lam, seed=s)
            start = time.perf_counter()
            runs[tag, s] = (cell, cached_run(cell, teacher, s, ROOT / "ablate_ida_ttur" / f"ttur5_{tag}_seed{s}", ev))
            timings[tag, s] = time.perf_counter() - start
    for s in SEEDS:
        cell = cfg.with_train(lambda_isg=0.0, seed=s)
        runs["noisg", s] = (cell, cached_run(cell, teacher, s, ROOT / "ablate_isg" / f"no_isg_seed{s}", ev))
    return {"cfg": cfg, "teacher": teacher, "runs": runs, "timings": timings}


def test_c06_recursions(capsys, suite, closed_form):
    fractions = []
    for (tag, s), (cell, res) in suite["runs"].items():
        if cell.train.lambda_ida == 1.0:
            continue
        _, rows = read_csv(res.run_dir / "tracking.csv", TRACK_COLUMNS)
        trace = [TrackRecord(**r, proxy=True) for r in rows]
        rep = check_recursions(trace, cell.train.lambda_ida, Constants(1.0, 1.0, 1.0))
        fractions.append(rep.pass_fraction("i"))
    scripted = closed_form[0]["recursions_scripted"]
    neural = suite["runs"]["ida", 0][1].constants["pass"]
    ok = min(fractions) == 1.0 and scripted.passed and min(neural["ii"], neural["iii"]) >= 0.95
    report(capsys, 6, ok, f"(i) min pass {min(fractions):.3f} over {len(fractions)} IDA runs; scripted {scripted.detail}; "
                          f"neural (ii) {neural['ii']:.3f} (iii) {neural['iii']:.3f}")


def test_c07_ida_stability(capsys, suite):
    runs = suite["runs"]
    std_wins = term_wins = 0
    parts = []
    for s in SEEDS:
        on, off = runs["ida", s][1], runs["noida", s][1]
        a, b = trailing_window_std(on.curve), trailing_window_std(off.curve)
        std_wins += a < b
        term_wins += on.curve[-1][1] <= off.curve[-1][1]
        parts.append(f"s{s}: std {a:.4f}/{b:.4f} term {on.curve[-1][1]:.4f}/{off.curve[-1][1]:.4f}")
    grid_time = sum(suite["timings"].values())
    ok = std_wins >= 2 and term_wins >= 2
    report(capsys, 7, ok, f"std wins {std_wins}/3, terminal wins {term_wins}/3 (IDA/no-IDA) " + "; ".join(parts)
           + f"; grid {grid_time:.0f}s")


def test_c08_isg_early(capsys, suite):
    runs = suite["runs"]
    mark = round(0.1 * suite["cfg"].train.iters)
    wins = 0
    parts = []
    for s in SEEDS:
        a, b = runs["ida", s][1].fd_at(mark), runs["noisg", s][1].fd_at(mark)
        wins += a <= b
        parts.append(f"s{s}: {a:.4f}/{b:.4f}")
    report(capsys, 8, wins >= 2, f"ISG <= no-ISG at iteration {mark} in {wins}/3 seeds (ISG/no-ISG) " + "; ".join(parts))


def test_c09_step_consistency(capsys, suite):
    start = time.perf_counter()
    cfg = suite["cfg"]
    n_cond = cfg.dataset.build().n_conditions
    drifts = []
    for s in SEEDS:
        G = suite["runs"]["ida", s][1].generator
        drifts.append(step_consistency(G, CoarseGrid(tuple(cfg.train.anchors)), (4, 8, 16), 1024, (0,), n_cond)[(4, 16)])
    elapsed = time.perf_counter() - start
    ok = max(drifts) <= 0.1 and elapsed < 60
    report(capsys, 9, ok, "4-vs-16-step drift " + ", ".join(f"{d:.4f}" for d in drifts), elapsed)


def test_c10_xi_profiler(capsys, suite):
    start = time.perf_counter()
    single = gaussian_mixture([1.0], [[0.0, 0.0]], [np.eye(2)])

    class Perfect:
        def velocity(self, x, t, cond):
            return gaussian_target_field(np.zeros(2), np.eye(2), float(t), x)

    grid = np.linspace(FM.t_min, 1.0, 30)
    curve = xi_profile(Perfect(), FM, single, grid, 4000, np.random.default_rng(10))
    vals = [v for _, v in curve]
    means, ses = xi_raw(Perfect(), FM, single, grid[1:], 4000, np.random.default_rng(11))
    analytic = 2 * grid[1:] ** 2 / ((1 - grid[1:]) ** 2 + grid[1:] ** 2)
    matches = bool(np.all(np.abs(means - analytic) < 3 * ses))
    taught = [v for _, v in xi_profile(suite["teacher"], FM, suite["cfg"].dataset.build(), grid, 4096, np.random.default_rng(12))]
    ok = vals[0] < 0.02 and max(vals) == 1.0 and matches and taught[0] < 0.02 and max(taught) == 1.0
    elapsed = time.perf_counter() - start
    report(capsys, 10, ok and elapsed < 30,
           f"single Gaussian: xi(t_min) {vals[0]:.2e}, max {max(vals)}, analytic match within 3 SE {matches}; "
           f"teacher: xi(t_min) {taught[0]:.2e}, max {max(taught)}", elapsed)


def test_c11_end_to_end_quality(capsys, suite):
    good = 0
    parts = []
    for s in SEEDS:
        res = suite["runs"]["ida", s][1]
        good += res.fd_teacher < 0.15 and res.fd_data < 0.2
        parts.append(f"s{s}: teacher {res.fd_teacher:.4f} data {res.fd_data:.4f}")
    report(capsys, 11, good >= 2, f"{good}/3 seeds under thresholds; " + "; ".join(parts))


def test_c12_determinism(capsys, suite, tmp_path):
    cell, res = suite["runs"]["noida", 0]
    start = time.perf_counter()
    again = distill_run(cell, suite["teacher"], 0, tmp_path / "rerun")
    same = all((res.run_dir / f).read_bytes() == (again.run_dir / f).read_bytes() for f in ("log.csv", "tracking.csv"))
    summary = json.loads((res.run_dir / "summary.json").read_text())
    report(capsys, 12, same, f"rerun of {res.run_dir.name} byte-identical CSVs: {same} (fd {summary['fd_teacher']:.4f})",
           time.perf_counter() - start)
