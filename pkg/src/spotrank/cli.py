"""Command-line interface.

Every subcommand prints a JSON document on stdout.  Exit status is 0 on
success, 2 on bad input (including unknown flags), and 3 when a numerical
routine fails.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import concentration, experiments
from .errors import InputError, NumericalError
from .ranktest import HypothesisParams, rank_critical_values, rank_estimate, run_test
from .realized import BlockingScheme, block_covariances, explained_variance, spot_gap_estimate, truncate_jumps
from .simulate import (JumpSpec, SimulationSpec, constant_path, gamma_for_signal, read_csv, reflected_scalar_path,
                       rotating_model, sample_observations, wishart_path, write_csv)
from .volofvol import CoarseScheme, calibrate

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(f"{self.prog}: {message}")


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None


def _emit(obj, args):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)
    if getattr(args, "json_out", None):
        with open(args.json_out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


# ---------------------------------------------------------------------------
# simulate / ingest


def cmd_simulate(args):
    model = args.model
    if model == "rotating":
        h_rot = args.h_rot
        gamma = args.gamma if args.signal is None else gamma_for_signal(args.signal, args.lam, args.beta, h_rot)
        path = rotating_model(args.lam, args.beta, h_rot, gamma, args.d or 2)
    elif model == "wishart":
        d = args.d or 3
        r = args.r or 2
        b0 = np.asarray(args.b0, dtype=float) if args.b0 is not None else np.eye(r, d)
        path = wishart_path(d, r, b0, args.n * args.steps_per_obs, args.seed, args.replication)
    elif model == "constant":
        if args.matrix is None:
            raise InputError("--model constant needs --matrix")
        path = constant_path(args.matrix)
    else:
        path = reflected_scalar_path(args.sigma0, args.gamma if args.gamma else 1.0, args.n * args.steps_per_obs,
                                     args.seed, args.replication)
    spec = SimulationSpec(args.n, path, args.seed, idio_level=args.idio_level,
                          jumps=JumpSpec(args.jump_rate, args.jump_scale))
    obs = sample_observations(spec, args.replication)
    write_csv(obs, args.out)
    _emit(dict(out=args.out, **obs.meta), args)


def cmd_ingest(args):
    obs = read_csv(args.data)
    clean = truncate_jumps(obs, args.c_trunc, args.exponent) if not args.no_truncate else obs
    write_csv(clean, args.out)
    _emit(dict(out=args.out, n=obs.n, d=obs.d, truncated=clean.meta.get("truncated", []),
               threshold=clean.meta.get("truncation_threshold")), args)


def _load(args):
    obs = read_csv(args.data)
    if args.truncate:
        obs = truncate_jumps(obs)
    return obs


# ---------------------------------------------------------------------------
# test / rank / calibrate


def _blocks(obs, h, demean=False):
    return block_covariances(obs, BlockingScheme(obs.n, h), demean=demean, vectors=False)


def _coarse(obs, h, hprime, trailing, demean=False):
    CoarseScheme(obs.n, hprime, h, trailing=trailing)
    return block_covariances(obs, BlockingScheme(obs.n, hprime), demean=demean, vectors=False)


def cmd_test(args):
    obs = _load(args)
    fine = _blocks(obs, args.h, args.demean_blocks)
    gap_mode = args.mode == "gap" or (args.mode == "holder" and args.gap is not None)
    gap, gap_source = args.gap, "given"
    if gap_mode and gap is None:
        gap, gap_source = spot_gap_estimate(fine, args.rank), "estimated"
    if args.calibrated:
        if args.hprime is None:
            raise InputError("--calibrated needs --hprime")
        coarse = _coarse(obs, args.h, args.hprime, args.trailing, args.demean_blocks)
        if args.rank != 1 and not gap_mode:
            warnings.warn("the no-gap calibrated critical value does not depend on the rank")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cal = calibrate(fine, coarse, args.alpha, "gap" if gap_mode else "nogap", gap if gap_mode else None,
                            normalization=args.normalization, trailing=args.trailing)
        T = float(fine.h * fine.eigenvalues[:, args.rank].sum())
        out = dict(statistic=T, kappa=cal.kappa, reject=bool(T > cal.kappa), calibration=cal.to_dict(),
                   warnings=[str(w.message) for w in caught])
    else:
        params = HypothesisParams(args.rank, args.beta, args.L, args.eps, gap if gap_mode else None, args.alpha,
                                  args.mode == "holder")
        out = run_test(fine, params, obs.n).to_dict()
    out.update(n=obs.n, d=obs.d, h=fine.h, gap_source=gap_source if gap_mode else None)
    _emit(out, args)


def cmd_rank(args):
    obs = _load(args)
    fine = _blocks(obs, args.h, args.demean_blocks)
    if args.holder_L is not None:
        params = HypothesisParams(0, args.beta, args.holder_L, args.eps, None, args.alpha)
        kappa = rank_critical_values(params, obs.n, fine.h, obs.d, args.rank_specific)
        source = "theorem"
    else:
        coarse = _coarse(obs, args.h, args.hprime, args.trailing, args.demean_blocks)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cal = calibrate(fine, coarse, args.alpha, "nogap", normalization=args.normalization,
                            trailing=args.trailing)
        kappa = cal.kappa
        source = "calibrated"
    est = rank_estimate(fine, kappa)
    ev = explained_variance(fine)
    _emit(dict(r_hat=est.r_hat, decisions=est.decisions, lambda_hat=est.lambda_hat, kappas=est.kappas,
               kappa_source=source, explained_fractions=ev.fractions, n=obs.n, d=obs.d, h=fine.h), args)


def cmd_calibrate(args):
    obs = _load(args)
    fine = _blocks(obs, args.h, args.demean_blocks)
    coarse = _coarse(obs, args.h, args.hprime, args.trailing, args.demean_blocks)
    gap = args.gap
    if args.mode == "gap" and gap is None:
        gap = spot_gap_estimate(fine, args.rank)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cal = calibrate(fine, coarse, args.alpha, args.mode, gap, norm=args.norm,
                        normalization=args.normalization, trailing=args.trailing)
    _emit(dict(cal.to_dict(), warnings=[str(w.message) for w in caught]), args)


# ---------------------------------------------------------------------------
# experiments and bounds


def _plan(args, kind):
    if args.plan:
        plan = experiments.ExperimentPlan.from_json(args.plan)
        if plan.kind != kind:
            raise InputError(f"plan kind {plan.kind!r} does not match subcommand {kind!r}")
        for key in ("replications", "seed", "name"):
            val = getattr(args, key)
            if val is not None:
                setattr(plan, key, val)
        plan.__post_init__()
        return plan
    return experiments.default_plan(kind, args.paper_scale, replications=args.replications, seed=args.seed,
                                    name=args.name)


def cmd_experiment(args):
    plan = _plan(args, args.command)
    cells, summary = experiments.run_plan(plan, args.out, args.workers, resume=not args.fresh)
    _emit(dict(name=plan.name, kind=plan.kind, cells=len(cells), output=args.out, summary=summary,
               plan_hash=plan.digest()), args)


def cmd_bounds(args):
    rows = concentration.validate(args.preset, args.draws, args.seed)
    _emit(dict(preset=args.preset, draws=args.draws, all_ok=all(r["ok"] for r in rows), checks=rows), args)


# ---------------------------------------------------------------------------
# Parser


def _data_opts(p, h_default):
    p.add_argument("--data", required=True, help="CSV with header time,asset_1,...")
    p.add_argument("--h", type=float, default=h_default, help="block length (1/h blocks)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--truncate", action="store_true", help="truncate jumps before analysis")
    p.add_argument("--demean-blocks", action="store_true", help="subtract the block mean increment")
    p.add_argument("--normalization", choices=["kernel", "doubled"], default="kernel")
    p.add_argument("--trailing", choices=["error", "drop"], default="drop")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spotrank", description="Rank inference for spot covariance matrices")
    p.add_argument("--json-out", help="also write the JSON result to this file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate observations and write a CSV")
    s.add_argument("--model", choices=["rotating", "wishart", "constant", "reflected"], required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--replication", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--d", type=int)
    s.add_argument("--r", type=int)
    s.add_argument("--lam", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--h-rot", type=float, default=0.02, help="rotation period")
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--signal", type=float, help="target average second eigenvalue (overrides --gamma)")
    s.add_argument("--sigma0", type=float, default=0.5)
    s.add_argument("--b0", type=_json_arg, help="JSON r x d starting factor")
    s.add_argument("--matrix", type=_json_arg, help="JSON d x d covariance for --model constant")
    s.add_argument("--steps-per-obs", type=int, default=1)
    s.add_argument("--idio-level", type=float, default=0.0)
    s.add_argument("--jump-rate", type=float, default=0.0)
    s.add_argument("--jump-scale", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="validate a CSV and truncate jumps")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--c-trunc", type=float, default=4.0)
    s.add_argument("--exponent", type=float, default=0.49)
    s.add_argument("--no-truncate", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("test", help="test H0: rank <= r")
    _data_opts(s, 0.02)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--mode", choices=["gap", "nogap", "holder"], default="nogap")
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--L", type=float, default=0.25)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--gap", type=float, help="spectral gap; estimated from the data when omitted")
    s.add_argument("--calibrated", action="store_true", help="data-driven critical value")
    s.add_argument("--hprime", type=float)
    s.set_defaults(func=cmd_test)

    s = sub.add_parser("rank", help="estimate the rank")
    _data_opts(s, 0.0025)
    s.set_defaults(alpha=0.1)
    s.add_argument("--hprime", type=float, default=0.1)
    s.add_argument("--holder-L", type=float, help="use the theoretical critical value with this constant")
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--rank-specific", action="store_true")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("calibrate", help="vol-of-vol estimates and data-driven critical value")
    _data_opts(s, 0.0025)
    s.add_argument("--hprime", type=float, required=True)
    s.add_argument("--mode", choices=["gap", "nogap"], default="nogap")
    s.add_argument("--rank", type=int, default=1)
    s.add_argument("--gap", type=float)
    s.add_argument("--norm", choices=["spectral", "frobenius"], default="spectral")
    s.set_defaults(func=cmd_calibrate)

    for name, helptext in (("power", "power surface"), ("detection", "50%% detection rates"),
                           ("evstudy", "explained variance against block length")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--plan", help="JSON experiment plan")
        s.add_argument("--paper-scale", action="store_true")
        s.add_argument("--replications", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--name")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", default="results", help="results root directory")
        s.add_argument("--fresh", action="store_true", help="discard earlier results for this plan name")
        s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("bounds", help="Monte Carlo validation of concentration bounds")
    s.add_argument("action", choices=["validate"])
    s.add_argument("--preset", choices=["bernstein", "triangular", "lower"], required=True)
    s.add_argument("--draws", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bounds)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
