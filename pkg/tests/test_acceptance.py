"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The summary lines are printed past pytest's output capture.
Every check also enforces its runtime budget.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from spotrank.concentration import validate
from spotrank.experiments import default_plan, detection_pairs, loglog_slope, run_plan
from spotrank.ranktest import rank_estimate
from spotrank.realized import block_covariance_array
from spotrank.simulate import SimulationSpec, lower_bound_pair, rotating_model, sample_increments, wishart_path
from spotrank.specmat import partial_trace_gt, sym_eigvals

pytestmark = pytest.mark.acceptance


@pytest.fixture(autouse=True)
def _uncaptured(capsys):
    global _capsys
    _capsys = capsys
    yield


def report(number, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{elapsed:.1f}s of {budget:.0f}s]"
    with _capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_criterion_01_closed_form_average_eigenvalue():
    t0 = time.perf_counter()
    worst = 0.0
    for beta in (0.3, 0.5, 0.8):
        for lam in (0.5, 1.0, 2.0):
            for h in (0.1, 0.01):
                path = rotating_model(lam, beta, h, 0.0)
                avg = path.integral(np.array([0.0]), np.array([h]))[0] / h
                worst = max(worst, abs(sym_eigvals(avg)[1] - h ** (2 * beta) / (2 * lam)))
    report(1, "closed-form average eigenvalue", worst <= 1e-8, f"max error {worst:.2e}",
           time.perf_counter() - t0, 1)


def _random_low_rank_path(g, d, r, cells):
    """A rank-r piecewise-smooth PSD path, discretized on ``cells`` equal cells of [0, 1]."""
    t = (np.arange(cells) + 0.5) / cells
    B0 = g.standard_normal((d, r))
    B1 = g.standard_normal((d, r)) * g.uniform(0, 1)
    B2 = g.standard_normal((d, r)) * g.uniform(0, 1)
    B3 = g.standard_normal((d, r)) * g.uniform(0, 0.5)
    freq, phase, tau = g.uniform(0.5, 3), g.uniform(0, 2 * np.pi), g.uniform(0.2, 0.8)
    B = (B0[None] + np.sin(2 * np.pi * freq * t + phase)[:, None, None] * B1[None]
         + (t**2)[:, None, None] * B2[None] + (t > tau)[:, None, None] * B3[None])
    return B @ np.swapaxes(B, 1, 2)


def test_criterion_02_perturbation_bound():
    t0 = time.perf_counter()
    g = np.random.default_rng(2024)
    cells = 80
    violations, worst_ratio = 0, 0.0
    iu = np.triu_indices(cells, 1)
    for _ in range(1000):
        d = int(g.integers(2, 6))
        r = int(g.integers(1, d))
        S = _random_low_rank_path(g, d, r, cells)
        lam_r = max(float(np.linalg.eigvalsh(S)[:, d - r].min()), 0.0)
        avg_lam = sym_eigvals(S.mean(axis=0))[r]
        diff = S[iu[0]] - S[iu[1]]
        norms = np.abs(np.linalg.eigvalsh(diff)).max(axis=1)
        delta1 = 2 * norms.sum() / cells**2
        delta2_sq = 2 * (norms**2).sum() / cells**2
        bound = min(2 * delta2_sq / lam_r, delta1) if lam_r > 0 else delta1
        if avg_lam > bound + 1e-9:
            violations += 1
        worst_ratio = max(worst_ratio, avg_lam / bound)
    report(2, "perturbation bound", violations == 0,
           f"{violations} violations in 1000 paths, max lambda/bound {worst_ratio:.3f}", time.perf_counter() - t0, 30)


def test_criterion_03_concavity():
    t0 = time.perf_counter()
    g = np.random.default_rng(3)
    violations = 0
    worst = -np.inf
    for d in (2, 3, 4, 5):
        N = 2500
        A = g.standard_normal((N, d, d))
        B = g.standard_normal((N, d, d))
        S, T = (A + np.swapaxes(A, 1, 2)) / 2, (B + np.swapaxes(B, 1, 2)) / 2
        for r in range(d):
            gap = (partial_trace_gt(S, r) + partial_trace_gt(T, r)) / 2 - partial_trace_gt((S + T) / 2, r)
            violations += int(np.sum(gap > 1e-10))
            worst = max(worst, float(gap.max()))
    report(3, "partial-trace concavity", violations == 0,
           f"{violations} violations in 10^4 pairs, max excess {worst:.2e}", time.perf_counter() - t0, 10)


def test_criterion_04_level():
    t0 = time.perf_counter()
    cells, _ = run_plan(default_plan("level", replications=1000), output_dir=None)
    rej = {c.coords["mode"]: c.rejection for c in cells}
    report(4, "level under the null", all(v <= 0.1 for v in rej.values()),
           ", ".join(f"{m} rejection {v:.3f}" for m, v in rej.items()), time.perf_counter() - t0, 120)


def test_criterion_05_power_transition():
    t0 = time.perf_counter()
    plan = default_plan("power", replications=500, grid=dict(gaps=[1.0], signal_multipliers=[1 / 3, 3.0]))
    low, high = run_plan(plan, output_dir=None)[0]
    report(5, "power phase transition", high.rejection >= 0.9 and low.rejection <= 0.2,
           f"power {low.rejection:.3f} at kappa/3, {high.rejection:.3f} at 3 kappa", time.perf_counter() - t0, 120)


def test_criterion_06_detection_slopes():
    t0 = time.perf_counter()
    cells, summary = run_plan(default_plan("detection", replications=200), output_dir=None)
    gap, nogap = summary["slope_gap"], summary["slope_nogap"]
    resolved = len(detection_pairs(cells, "gap")) == 5 and len(detection_pairs(cells, "nogap")) == 5
    ok = resolved and abs(gap + 1) <= 0.15 and abs(nogap + 0.5) <= 0.15
    ratios = [c.extra.get("ratio_to_kappa", float("nan")) for c in cells]
    report(6, "detection-rate slopes", ok,
           f"gap slope {gap:.3f}, no-gap slope {nogap:.3f}, EV2/kappa in [{min(ratios):.2f}, {max(ratios):.2f}]",
           time.perf_counter() - t0, 1200)


def test_criterion_07_wishart_averaging():
    t0 = time.perf_counter()
    hs = 2.0 ** -np.arange(4, 10)
    steps = 2**16
    lam2 = np.empty((1000, len(hs)))
    b0 = np.array([[1.0, 0.0]])
    for rep in range(1000):
        path = wishart_path(2, 1, b0, steps, seed=7, replication=rep)
        avg = path.integral(np.zeros(len(hs)), hs) / hs[:, None, None]
        lam2[rep] = sym_eigvals(avg)[:, 1]
    med = np.median(lam2, axis=0)
    slope = loglog_slope(list(zip(hs, med)))
    report(7, "Wishart averaging", abs(slope - 1) <= 0.15, f"slope {slope:.3f}", time.perf_counter() - t0, 120)


def test_criterion_08_explained_variance():
    t0 = time.perf_counter()
    (cell,), _ = run_plan(default_plan("evstudy", replications=500, schedule=[0.2]), output_dir=None)
    ok = 0.003 <= cell.stat_q50 <= 0.03 and cell.stat_q90 <= 0.06
    report(8, "explained-variance study", ok,
           f"median {100 * cell.stat_q50:.2f}%, 90% quantile {100 * cell.stat_q90:.2f}%, max {100 * cell.extra['max']:.2f}%",
           time.perf_counter() - t0, 180)


def test_criterion_09_volofvol():
    t0 = time.perf_counter()
    (cell,), _ = run_plan(default_plan("nvstudy"), output_dir=None)
    nv1, nv2 = cell.extra["nv1"], cell.extra["nv2"]
    report(9, "vol-of-vol estimator", 0.8 <= nv2 <= 1.2 and 0.7 <= nv1 <= 0.9,
           f"NV2 {nv2:.3f}, NV1 {nv1:.3f}, BNV1 {cell.extra['bnv1']:.3f}", time.perf_counter() - t0, 300)


def test_criterion_10_datadriven_level():
    t0 = time.perf_counter()
    cells, _ = run_plan(default_plan("ddlevel", grid=dict(modes=["gap", "nogap"])), output_dir=None)
    rej = {c.coords["mode"]: c.rejection for c in cells}
    report(10, "data-driven level", all(v <= 0.08 for v in rej.values()),
           ", ".join(f"{m} rejection {v:.3f}" for m, v in rej.items()), time.perf_counter() - t0, 600)


def test_criterion_11_concentration_bounds():
    t0 = time.perf_counter()
    rows = validate("bernstein", 100_000, seed=11) + validate("triangular", 100_000, seed=11)
    bad = [r for r in rows if not r["ok"]]
    report(11, "concentration bounds", not bad, f"{len(rows) - len(bad)}/{len(rows)} checks within bound + 3 SE",
           time.perf_counter() - t0, 300)


def test_criterion_12_rank_estimator():
    t0 = time.perf_counter()
    plan = default_plan("rank", replications=1000)
    cells, _ = run_plan(plan, output_dir=None)
    over_ok = all(c.extra["p_over"] <= plan.alpha + 3 * math.sqrt(plan.alpha * (1 - plan.alpha) / c.replications)
                  for c in cells)
    correct = next(c.extra["p_correct"] for c in cells if c.coords["model"] == "wishart3r2")
    g = np.random.default_rng(12)
    for _ in range(10_000):
        d = int(g.integers(1, 8))
        lam = np.sort(g.exponential(size=d) * g.choice([0.01, 1, 100], size=d))[::-1]
        kap = np.sort(g.exponential(size=d) * g.choice([0.01, 1, 100]))
        rank_estimate(lam, kap)  # raises if the sequential and argmin forms differ
    over = ", ".join(f"{c.coords['model']} {c.extra['p_over']:.3f}" for c in cells)
    report(12, "rank estimator", over_ok and correct >= 0.9,
           f"P(r_hat > r): {over}; P(r_hat = 2) Wishart {correct:.3f}; 10^4 equivalence checks",
           time.perf_counter() - t0, 180)


def test_criterion_13_indistinguishable_pair():
    t0 = time.perf_counter()
    worst = 0.0
    for n in (100, 1000):
        rot, const = lower_bound_pair(n, 0.5, 4 * math.pi, 1.0)
        e = np.arange(n + 1) / n
        worst = max(worst, float(np.max(np.abs(rot.integral(e[:-1], e[1:]) - const.integral(e[:-1], e[1:])))))
    n, m = 1000, 100
    rot, const = lower_bound_pair(n, 0.5, 4 * math.pi, 1.0)
    samples = []
    for seed, path in ((1, rot), (2, const)):
        spec = SimulationSpec(n, path, seed)
        dx = np.stack([sample_increments(spec, rep) for rep in range(2000)])
        samples.append((m / n) * sym_eigvals(block_covariance_array(dx, m))[..., 1].sum(axis=-1))
    p = stats.ks_2samp(*samples).pvalue
    report(13, "indistinguishable pair", worst <= 1e-12 and p >= 0.01,
           f"max block-integral gap {worst:.1e}, KS p-value {p:.3f}", time.perf_counter() - t0, 120)
