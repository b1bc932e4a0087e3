"""Monte Carlo experiments: level, power surface, detection rates, explained variance.

An :class:`ExperimentPlan` names an experiment kind and its parameters.
:func:`run_plan` enumerates the plan's cells, evaluates the missing ones,
and appends each finished cell to ``<output>/<name>/cells.csv``.  That
makes interrupted runs resumable.

Replications are grouped into fixed units of :data:`UNIT` draws.  Each
unit's random numbers come from streams keyed by ``(seed, replication)``,
so results do not depend on the number of worker processes.  All cells of
a plan reuse the same replication streams (common random numbers).  This
keeps power curves smooth in the signal strength and makes bisection
well behaved.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .errors import InputError
from .ranktest import HypothesisParams, critical_value, rank_estimate
from .realized import BlockingScheme, BlockSet, block_covariance_array, eigen_totals, spot_gap_estimate
from .simulate import (SimulationSpec, gamma_for_signal, reflected_scalar_path, rotating_model,
                       rotating_signal, sample_increments, wishart_path)
from .specmat import sym_eigvals
from .volofvol import CoarseScheme, bnv_hat, calibrate, nv_hat

#: Replications per work unit.  Fixed so that results are independent of workers.
UNIT = 25
BISECTION_RTOL = 0.02
BISECTION_MAX_ITER = 25
KINDS = ("level", "power", "detection", "evstudy", "rank", "ddlevel", "nvstudy")


@dataclass
class ExperimentPlan:
    """Everything needed to reproduce one experiment.

    ``model`` holds model constants (``lam``, ``beta``, ``L``, ``eps``,
    ``d``, ``r``, ...), ``grid`` the swept coordinates, and ``schedule`` the
    ``n`` or ``h`` schedule where the kind needs one.
    """

    name: str
    kind: str
    replications: int = 200
    alpha: float = 0.1
    seed: int = 20240601
    n: int = 2000
    h: float = 0.02
    hprime: Optional[float] = None
    schedule: list = field(default_factory=list)
    model: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown experiment kind {self.kind!r}")
        if self.replications < 1:
            raise InputError("replications must be at least 1")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        if self.seed < 0:
            raise InputError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class CellResult:
    coords: dict
    replications: int
    rejection: Optional[float] = None
    stat_mean: Optional[float] = None
    stat_q10: Optional[float] = None
    stat_q50: Optional[float] = None
    stat_q90: Optional[float] = None
    kappa: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        """Binomial standard error of the rejection frequency."""
        p = self.rejection or 0.0
        return math.sqrt(max(p * (1 - p), 0.25 / self.replications) / self.replications)


def _summary(values: np.ndarray) -> dict:
    q10, q50, q90 = np.quantile(values, [0.1, 0.5, 0.9])
    return dict(stat_mean=float(np.mean(values)), stat_q10=float(q10), stat_q50=float(q50), stat_q90=float(q90))


# ---------------------------------------------------------------------------
# Defaults


def default_plan(kind: str, paper_scale: bool = False, **overrides) -> ExperimentPlan:
    """Desk-scale default plan for ``kind``; ``paper_scale`` restores the full grids."""
    reps = 1000 if paper_scale else 200
    rot = dict(lam=1.0, beta=0.5, L=0.25, eps=0.0, d=2, r=1)
    if kind == "level":
        plan = ExperimentPlan("level", kind, reps, 0.1, n=2000, h=0.02, model=rot)
    elif kind == "power":
        signals = np.geomspace(0.005, 1.0, 12 if paper_scale else 8).round(6).tolist()
        plan = ExperimentPlan("power", kind, reps, 0.1, n=2000, h=0.02, model=rot,
                              grid=dict(gaps=[0.25, 0.5, 1.0, 2.0], signals=signals))
    elif kind == "detection":
        plan = ExperimentPlan("detection", kind, reps, 0.1, model=dict(rot, nh=40),
                              schedule=[250 * 2**k for k in range(3, 8)], grid=dict(modes=["gap", "nogap"]))
    elif kind == "evstudy":
        b0 = [[1.0, 0.0, 0.0], [0.0, math.sqrt(0.5), 0.0]]
        plan = ExperimentPlan("evstudy", kind, 1000 if paper_scale else 500, 0.1, n=1950, h=0.2,
                              schedule=[1 / 5, 1 / 10, 1 / 25, 1 / 50, 1 / 130, 1 / 390],
                              model=dict(d=3, r=2, b0=b0, steps_per_obs=1))
    elif kind == "rank":
        plan = ExperimentPlan("rank", kind, reps, 0.1, n=2000, h=0.0025, hprime=0.1,
                              model=dict(beta=0.5, L=0.25, eps=0.0),
                              grid=dict(models=["wishart3r2", "wishart2r1", "rotating"]))
    elif kind == "ddlevel":
        plan = ExperimentPlan("ddlevel", kind, 500, 0.05, n=100_000, h=0.002, hprime=0.02,
                              model=dict(d=2, r=1, b0=[[1.0, 0.0]]), grid=dict(modes=["gap", "nogap"]))
    elif kind == "nvstudy":
        plan = ExperimentPlan("nvstudy", kind, 20, 0.05, n=1_000_000, h=0.001, hprime=0.01,
                              model=dict(sigma0=0.5, gamma=1.0))
    else:
        raise InputError(f"unknown experiment kind {kind!r}")
    for key, val in overrides.items():
        if val is None:
            continue
        if key in ("model", "grid"):
            getattr(plan, key).update(val)
        elif hasattr(plan, key):
            setattr(plan, key, val)
        else:
            raise InputError(f"unknown plan field {key!r}")
    plan.__post_init__()
    return plan


# ---------------------------------------------------------------------------
# Work units (top-level so they can be shipped to worker processes)


def _units(reps: int):
    return [(s, min(s + UNIT, reps)) for s in range(0, reps, UNIT)]


def _rotating_unit(args):
    n, h, lam, beta, gamma, seed, start, stop = args
    spec = SimulationSpec(n, rotating_model(lam, beta, h, gamma), seed)
    dx = np.stack([sample_increments(spec, rep) for rep in range(start, stop)])
    ev = sym_eigvals(block_covariance_array(dx, round(n * h)))
    return h * ev[..., 1].sum(axis=-1)


def _wishart(d, r, b0, n, steps_per_obs, seed, rep):
    path = wishart_path(d, r, np.asarray(b0, dtype=float), n * steps_per_obs, seed, rep)
    return sample_increments(SimulationSpec(n, path, seed), rep)


def _ev_unit(args):
    d, r, b0, n, steps, h, seed, start, stop = args
    out = []
    for rep in range(start, stop):
        dx = _wishart(d, r, b0, n, steps, seed, rep)
        totals = eigen_totals(sym_eigvals(block_covariance_array(dx, round(n * h))), h)
        out.append(totals[r] / totals.sum())
    return np.array(out)


def _dd_kappa(dx, n, h, hprime, alpha, mode, r=1):
    fine = BlockSet(block_covariance_array(dx, round(n * h)), h, n, vectors=False)
    coarse = BlockSet(block_covariance_array(dx, round(n * hprime)), hprime, n, vectors=False)
    gap = spot_gap_estimate(fine, r) if mode == "gap" else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = calibrate(fine, coarse, alpha, mode, gap, trailing="drop")
    return fine, rep.kappa, "negative_variance" in rep.flags


def _ddlevel_unit(args):
    d, r, b0, n, h, hprime, alpha, mode, seed, start, stop = args
    out = []
    for rep in range(start, stop):
        dx = _wishart(d, r, b0, n, 1, seed, rep)
        fine, kappa, neg = _dd_kappa(dx, n, h, hprime, alpha, mode, r)
        T = h * float(fine.eigenvalues[:, r].sum())
        out.append((T, kappa, float(neg)))
    return np.array(out)


def _rank_unit(args):
    model, n, h, hprime, alpha, beta, L, eps, seed, start, stop = args
    out = []
    for rep in range(start, stop):
        if model == "wishart3r2":
            d, r = 3, 2
            dx = _wishart(3, 2, [[1.0, 0, 0], [0, 1.0, 0]], n, 1, seed, rep)
        elif model == "wishart2r1":
            d, r = 2, 1
            dx = _wishart(2, 1, [[1.0, 0]], n, 1, seed, rep)
        elif model == "rotating":
            d, r = 2, 1
            spec = SimulationSpec(n, rotating_model(1.0, beta, h, 0.0), seed)
            dx = sample_increments(spec, rep)
        else:
            raise InputError(f"unknown rank-study model {model!r}")
        if model == "rotating":
            fine = BlockSet(block_covariance_array(dx, round(n * h)), h, n, vectors=False)
            kappa = critical_value(HypothesisParams(0, beta, L, eps, None, alpha), n, h, d).kappa
        else:
            fine, kappa, _ = _dd_kappa(dx, n, h, hprime, alpha, "nogap")
        out.append((rank_estimate(fine, kappa).r_hat, r, kappa))
    return np.array(out, dtype=float)


def _nv_unit(args):
    sigma0, gamma, n, hprime, seed, start, stop = args
    out = []
    for rep in range(start, stop):
        path = reflected_scalar_path(sigma0, gamma, n, seed, rep)
        dx = sample_increments(SimulationSpec(n, path, seed), rep)
        coarse = BlockSet(block_covariance_array(dx, round(n * hprime)), hprime, n, vectors=False)
        kw = dict(trailing="drop")
        out.append((nv_hat(coarse, 1, **kw), nv_hat(coarse, 2, **kw), nv_hat(coarse, 4, **kw),
                    bnv_hat(coarse, 1, **kw), bnv_hat(coarse, 2, **kw)))
    return np.array(out)


class _Pool:
    """Order-preserving map over work units, optionally across processes."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._ex = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, args):
        if self._ex is None:
            return [fn(a) for a in args]
        return list(self._ex.map(fn, args))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Cell enumeration and evaluation


def _check_scheme(n, h):
    BlockingScheme(n, h)


def _rotating_T(plan, pool, n, h, lam, gamma):
    m = plan.model
    args = [(n, h, lam, m.get("beta", 0.5), gamma, plan.seed, s, e) for s, e in _units(plan.replications)]
    return np.concatenate(pool.map(_rotating_unit, args))


def _hyp(plan, gap=None):
    m = plan.model
    return HypothesisParams(m.get("r", 1), m.get("beta", 0.5), m.get("L", 0.25), m.get("eps", 0.0), gap, plan.alpha,
                            m.get("holder", False))


def _cells(plan: ExperimentPlan) -> list[dict]:
    g = plan.grid
    if plan.kind == "level":
        return [dict(mode=mode) for mode in g.get("modes", ["gap", "nogap"])]
    if plan.kind == "power":
        gaps = g.get("gaps", [1.0])
        if "signal_multipliers" in g:
            return [dict(gap=lam, multiplier=c) for lam in gaps for c in g["signal_multipliers"]]
        return [dict(gap=lam, signal=s) for lam in gaps for s in g.get("signals", [])]
    if plan.kind == "detection":
        return [dict(mode=mode, n=n) for mode in g.get("modes", ["gap", "nogap"]) for n in plan.schedule]
    if plan.kind == "evstudy":
        return [dict(h=h) for h in (plan.schedule or [plan.h])]
    if plan.kind == "rank":
        return [dict(model=mdl) for mdl in g.get("models", ["wishart3r2"])]
    if plan.kind == "ddlevel":
        return [dict(mode=mode) for mode in g.get("modes", ["gap"])]
    if plan.kind == "nvstudy":
        return [dict(quantity="nv")]
    raise InputError(f"unknown kind {plan.kind}")


def _validate(plan: ExperimentPlan) -> None:
    """Check every scheme in the plan before any sampling happens."""
    if plan.kind in ("level", "power", "rank", "ddlevel"):
        _check_scheme(plan.n, plan.h)
    if plan.kind in ("rank", "ddlevel", "nvstudy"):
        if plan.hprime is None:
            raise InputError("this experiment needs hprime")
        CoarseScheme(plan.n, plan.hprime, None if plan.kind == "nvstudy" else plan.h, trailing="drop")
    if plan.kind == "detection":
        nh = plan.model.get("nh", 40)
        for n in plan.schedule:
            _check_scheme(n, nh / n)
    if plan.kind == "evstudy":
        for h in plan.schedule or [plan.h]:
            _check_scheme(plan.n, h)


def _kappa_min(plan, n, h, lam):
    d = plan.model.get("d", 2)
    k_gap = critical_value(_hyp(plan, lam), n, h, d).kappa
    k_nogap = critical_value(_hyp(plan), n, h, d).kappa
    return min(k_gap, k_nogap), k_gap, k_nogap


def _eval_cell(plan: ExperimentPlan, cell: dict, pool: _Pool) -> CellResult:
    m = plan.model
    R = plan.replications
    if plan.kind == "level":
        lam = m.get("lam", 1.0)
        T = _rotating_T(plan, pool, plan.n, plan.h, lam, 0.0)
        gap = lam if cell["mode"] == "gap" else None
        kappa = critical_value(_hyp(plan, gap), plan.n, plan.h, m.get("d", 2)).kappa
        return CellResult(cell, R, float(np.mean(T > kappa)), kappa=kappa, **_summary(T))

    if plan.kind == "power":
        lam = cell["gap"]
        beta = m.get("beta", 0.5)
        kappa, k_gap, k_nogap = _kappa_min(plan, plan.n, plan.h, lam)
        signal = cell["multiplier"] * kappa if "multiplier" in cell else cell["signal"]
        gamma = gamma_for_signal(signal, lam, beta, plan.h)
        extra = dict(signal=signal, gamma=gamma, kappa_gap=k_gap, kappa_nogap=k_nogap)
        if gamma > 1 or lam < plan.h**beta / math.sqrt(2):
            extra["feasible"] = False
            return CellResult(cell, R, None, kappa=kappa, extra=extra)
        T = _rotating_T(plan, pool, plan.n, plan.h, lam, gamma)
        extra["feasible"] = True
        return CellResult(cell, R, float(np.mean(T > kappa)), kappa=kappa, extra=extra, **_summary(T))

    if plan.kind == "detection":
        return _detection_cell(plan, cell, pool)

    if plan.kind == "evstudy":
        h = cell["h"]
        args = [(m["d"], m["r"], m["b0"], plan.n, m.get("steps_per_obs", 1), h, plan.seed, s, e)
                for s, e in _units(R)]
        frac = np.concatenate(pool.map(_ev_unit, args))
        res = CellResult(cell, R, **_summary(frac))
        res.extra = dict(max=float(frac.max()))
        return res

    if plan.kind == "rank":
        args = [(cell["model"], plan.n, plan.h, plan.hprime, plan.alpha, m.get("beta", 0.5), m.get("L", 0.25),
                 m.get("eps", 0.0), plan.seed, s, e) for s, e in _units(R)]
        out = np.concatenate(pool.map(_rank_unit, args))
        r_hat, r = out[:, 0], out[:, 1]
        extra = dict(p_correct=float(np.mean(r_hat == r)), p_over=float(np.mean(r_hat > r)),
                     p_under=float(np.mean(r_hat < r)), rank=int(r[0]))
        return CellResult(cell, R, rejection=extra["p_over"], kappa=float(np.mean(out[:, 2])), extra=extra,
                          **_summary(r_hat))

    if plan.kind == "ddlevel":
        args = [(m["d"], m["r"], m["b0"], plan.n, plan.h, plan.hprime, plan.alpha, cell["mode"], plan.seed, s, e)
                for s, e in _units(R)]
        out = np.concatenate(pool.map(_ddlevel_unit, args))
        T, kap = out[:, 0], out[:, 1]
        extra = dict(negative_variance=float(np.mean(out[:, 2])))
        return CellResult(cell, R, float(np.mean(T > kap)), kappa=float(np.mean(kap)), extra=extra, **_summary(T))

    if plan.kind == "nvstudy":
        args = [(m.get("sigma0", 0.5), m.get("gamma", 1.0), plan.n, plan.hprime, plan.seed, s, e) for s, e in _units(R)]
        out = np.concatenate(pool.map(_nv_unit, args))
        names = ["nv1", "nv2", "nv4", "bnv1", "bnv2"]
        extra = {k: float(v) for k, v in zip(names, out.mean(axis=0))}
        extra.update({k + "_sd": float(v) for k, v in zip(names, out.std(axis=0, ddof=1) if R > 1 else np.zeros(5))})
        return CellResult(cell, R, extra=extra, **_summary(out[:, 1]))
    raise InputError(f"unknown kind {plan.kind}")


def _detection_cell(plan: ExperimentPlan, cell: dict, pool: _Pool) -> CellResult:
    m = plan.model
    n = cell["n"]
    h = m.get("nh", 40) / n
    lam, beta = m.get("lam", 1.0), m.get("beta", 0.5)
    target = m.get("target_power", 0.5)
    gap = lam if cell["mode"] == "gap" else None
    kappa = critical_value(_hyp(plan, gap), n, h, m.get("d", 2)).kappa
    cache = {}

    def power(signal):
        if signal not in cache:
            T = _rotating_T(plan, pool, n, h, lam, gamma_for_signal(signal, lam, beta, h))
            cache[signal] = float(np.mean(T > kappa))
        return cache[signal]

    hi = rotating_signal(lam, beta, h, 1.0)
    lo = min(kappa / 100, hi / 100)
    extra = dict(kappa=kappa, h=h, evaluations=0)
    if power(hi) < target or power(lo) >= target:
        extra.update(resolved=False, evaluations=len(cache))
        return CellResult(cell, plan.replications, kappa=kappa, extra=extra)
    it = 0
    while hi / lo > 1 + BISECTION_RTOL and it < BISECTION_MAX_ITER:
        mid = math.sqrt(lo * hi)
        if power(mid) >= target:
            hi = mid
        else:
            lo = mid
        it += 1
    ev2 = math.sqrt(lo * hi)
    extra.update(resolved=True, ev2=ev2, lo=lo, hi=hi, iterations=it, evaluations=len(cache),
                 ratio_to_kappa=ev2 / kappa)
    return CellResult(cell, plan.replications, rejection=power(hi), kappa=kappa, extra=extra)


# ---------------------------------------------------------------------------
# Public drivers


def _run(plan: ExperimentPlan, workers: int = 1, done: Optional[dict] = None, on_cell=None) -> list[CellResult]:
    _validate(plan)
    results = []
    with _Pool(workers) as pool:
        for idx, cell in enumerate(_cells(plan)):
            if done is not None and idx in done:
                results.append(done[idx])
                continue
            res = _eval_cell(plan, cell, pool)
            if on_cell is not None:
                on_cell(idx, res)
            results.append(res)
    return results


def power_surface(plan: ExperimentPlan, workers: int = 1) -> list[CellResult]:
    if plan.kind != "power":
        raise InputError("power_surface needs a 'power' plan")
    return _run(plan, workers)


def detection_rate_curve(plan: ExperimentPlan, workers: int = 1) -> list[CellResult]:
    if plan.kind != "detection":
        raise InputError("detection_rate_curve needs a 'detection' plan")
    return _run(plan, workers)


def ev_vs_blocklength(plan: ExperimentPlan, workers: int = 1) -> list[CellResult]:
    if plan.kind != "evstudy":
        raise InputError("ev_vs_blocklength needs an 'evstudy' plan")
    return _run(plan, workers)


def detection_pairs(cells: list[CellResult], mode: str) -> list[tuple[int, float]]:
    """Resolved ``(n, EV2 at 50%)`` pairs for one mode."""
    return [(c.coords["n"], c.extra["ev2"]) for c in cells
            if c.coords.get("mode") == mode and c.extra.get("resolved")]


def loglog_slope(pairs) -> float:
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def summarize(plan: ExperimentPlan, cells: list[CellResult]) -> dict:
    if plan.kind == "detection":
        return {f"slope_{mode}": loglog_slope(detection_pairs(cells, mode)) for mode in plan.grid.get("modes", [])}
    if plan.kind in ("level", "ddlevel", "rank"):
        return {"max_rejection": max((c.rejection or 0.0) for c in cells)}
    if plan.kind == "evstudy":
        return {"median_by_h": {str(c.coords["h"]): c.stat_q50 for c in cells}}
    if plan.kind == "nvstudy":
        return dict(cells[0].extra)
    return {}


# ---------------------------------------------------------------------------
# Result files


_FIXED = ["replications", "rejection", "stat_mean", "stat_q10", "stat_q50", "stat_q90", "kappa", "extra"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _coord_keys(plan):
    keys = []
    for c in _cells(plan):
        for k in c:
            if k not in keys:
                keys.append(k)
    return keys


def _row(idx, res, keys):
    row = [str(idx)] + [_fmt(res.coords.get(k)) for k in keys]
    row += [_fmt(res.replications), _fmt(res.rejection), _fmt(res.stat_mean), _fmt(res.stat_q10),
            _fmt(res.stat_q50), _fmt(res.stat_q90), _fmt(res.kappa), json.dumps(res.extra, sort_keys=True)]
    return row


def _parse_cell(row: dict, keys, cells) -> tuple[int, CellResult]:
    idx = int(row["cell"])
    num = lambda s: None if s == "" else float(s)  # noqa: E731
    res = CellResult(dict(cells[idx]), int(row["replications"]), num(row["rejection"]), num(row["stat_mean"]),
                     num(row["stat_q10"]), num(row["stat_q50"]), num(row["stat_q90"]), num(row["kappa"]),
                     json.loads(row["extra"]))
    return idx, res


def env_record(plan: ExperimentPlan) -> dict:
    return dict(seed=plan.seed, version=__version__, plan_hash=plan.digest(), numpy=np.__version__,
                python=platform.python_version())


def run_plan(plan: ExperimentPlan, output_dir: Optional[str] = "results", workers: int = 1,
             resume: bool = True) -> tuple[list[CellResult], dict]:
    """Run (or resume) ``plan``; write ``cells.csv``, ``manifest.json`` and ``env.json``."""
    _validate(plan)
    if output_dir is None:
        cells = _run(plan, workers)
        return cells, summarize(plan, cells)
    out = os.path.join(output_dir, plan.name)
    os.makedirs(out, exist_ok=True)
    env_path = os.path.join(out, "env.json")
    cells_path = os.path.join(out, "cells.csv")
    keys = _coord_keys(plan)
    header = ["cell"] + keys + _FIXED
    done = {}
    if os.path.exists(env_path) and os.path.exists(cells_path):
        with open(env_path) as fh:
            prev = json.load(fh)
        if prev.get("plan_hash") != plan.digest():
            if resume:
                raise InputError(f"{out} holds results of a different plan; choose another name or --fresh")
        elif resume:
            all_cells = _cells(plan)
            with open(cells_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    idx, res = _parse_cell(row, keys, all_cells)
                    done[idx] = res
    if not done:
        with open(cells_path, "w", newline="") as fh:
            csv.writer(fh).writerow(header)
    with open(env_path, "w") as fh:
        json.dump(env_record(plan), fh, indent=2, sort_keys=True)

    def append(idx, res):
        with open(cells_path, "a", newline="") as fh:
            csv.writer(fh).writerow(_row(idx, res, keys))

    cells = _run(plan, workers, done, append)
    summary = summarize(plan, cells)
    # Rewrite the cell file in index order so that resumed and fresh runs match byte for byte.
    with open(cells_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for idx, res in enumerate(cells):
            w.writerow(_row(idx, res, keys))
    manifest = dict(name=plan.name, kind=plan.kind, plan=plan.to_dict(), cells=len(cells),
                    files=["cells.csv", "env.json"], summary=summary)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
    return cells, summary

