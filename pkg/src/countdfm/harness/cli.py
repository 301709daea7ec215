"""Command line entry point: ``countdfm simulate|fit|select|forecast|experiment``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..errors import (
    CountDFMError,
    DataFormatError,
    DegenerateMarginalError,
    DegenerateSeriesError,
    DomainError,
    FitError,
    ParameterError,
)
from ..estimation import fit
from ..model import simulate
from ..selection import LAG_METHODS, RANK_METHODS, select_lag, select_rank
from ..smc import DEFAULT_N, DEFAULT_QMC, DEFAULT_WINDOW, forecast_distribution, point_forecast, run_sisr
from . import io
from .experiment import ExperimentConfig, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_DATA_ERRORS = (DataFormatError, DomainError, ParameterError, DegenerateMarginalError, DegenerateSeriesError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> dict:
    return io.load_json(args.config) if args.config else {}


def _families(arg: str, d: int) -> list[str] | str:
    parts = [p.strip() for p in arg.split(",")]
    if len(parts) == 1:
        return parts[0]
    if len(parts) != d:
        raise ParameterError(f"--family lists {len(parts)} families for {d} series")
    return parts


def cmd_simulate(args) -> int:
    cfg = _config(args)
    for key in ("family", "psi", "d", "r", "T"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    keep = {k: v for k, v in cfg.items() if k in ("family", "psi", "d", "r", "T", "burn_in", "params", "marginals", "param_seed")}
    config = ExperimentConfig.from_dict({**keep, "seed": args.seed, "replications": 0})
    P, marg = config.true_model()
    sim = simulate(P, marg, config.T, burn_in=config.burn_in, seed=args.seed)
    io.write_counts(args.out, sim.X)
    if args.latent_out:
        io.write_table(args.latent_out, [f"z{i + 1}" for i in range(P.d)], sim.Z.tolist())
    return EXIT_OK


def cmd_fit(args) -> int:
    X, _ = io.load_csv(args.data)
    model = fit(X, _families(args.family, X.shape[1]), args.r, args.p, r_nb=args.r_nb)
    io.save_model(args.out, model)
    return EXIT_OK


def cmd_select(args) -> int:
    X, _ = io.load_csv(args.data)
    fams = _families(args.family, X.shape[1])
    method = args.method.upper()
    if method in RANK_METHODS:
        res = select_rank(X, fams, method, r_max=args.r_max, B=args.B, r_nb=args.r_nb, degenerate=args.degenerate)
    elif method in LAG_METHODS:
        if args.r is None:
            raise UsageError("lag selection needs --r")
        res = select_lag(X, fams, args.r, method, p_max=args.p_max, B=args.B, r_nb=args.r_nb, degenerate=args.degenerate)
    else:
        raise UsageError(f"unknown method {args.method!r}; choose from {RANK_METHODS + LAG_METHODS}")
    rows = []
    for c, s in zip(res.candidates, res.scores):
        rows.append([int(c), "all", s])
    if res.fold_scores is not None:
        for b, fs in enumerate(np.atleast_2d(res.fold_scores)):
            for c, s in zip(res.candidates, fs):
                rows.append([int(c), str(b + 1), s])
    io.write_table(args.out, ["candidate", "fold", "score"], rows)
    for note in res.notes:
        logging.getLogger(__name__).warning(note)
    print(res.selected)
    return EXIT_OK


def cmd_forecast(args) -> int:
    X, names = io.load_csv(args.data)
    model = io.load_model(args.model)
    if X.shape[1] != model.d:
        raise DataFormatError(f"data has {X.shape[1]} series, model has {model.d}")
    window = X[-args.window :]
    ens = run_sisr(window, model, args.N, args.seed, n_qmc=args.n_qmc)
    dist = forecast_distribution(ens, model, args.H)
    rows = []
    for i in range(dist.d):
        for h in range(dist.H):
            for v, pr in zip(dist.support[i], dist.pmf[i][h]):
                rows.append([names[i], h + 1, int(v), pr])
    io.write_table(args.out, ["series", "h", "value", "prob"], rows)
    point = point_forecast(dist)
    if args.point_out:
        io.write_table(args.point_out, ["h", *names], [[h + 1, *map(int, point[h])] for h in range(dist.H)])
    return EXIT_OK


def cmd_experiment(args) -> int:
    data = _config(args)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    config = ExperimentConfig.from_dict(data)
    report = run_experiment(config, args.out)
    print(json.dumps({"replications": len(report.results), "failed": report.n_failed, "files": sorted(report.files)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="countdfm", description="Latent Gaussian dynamic factor models for count time series.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_default=0):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", required=True)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("simulate", help="simulate a count panel from a preset or config")
    common(p)
    p.add_argument("--family")
    p.add_argument("--psi")
    p.add_argument("--d", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--latent-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model to a count CSV")
    common(p)
    p.add_argument("data")
    p.add_argument("--family", required=True, help="one family, or a comma list with one per series")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--r-nb", type=int, default=3)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="choose the number of factors or the lag order")
    common(p)
    p.add_argument("data")
    p.add_argument("--family", required=True)
    p.add_argument("--method", required=True, help=f"rank: {', '.join(RANK_METHODS)}; lag: {', '.join(LAG_METHODS)}")
    p.add_argument("--r", type=int, help="number of factors (lag selection)")
    p.add_argument("--r-max", type=int, default=8)
    p.add_argument("--p-max", type=int, default=6)
    p.add_argument("--B", type=int, default=5)
    p.add_argument("--r-nb", type=int, default=3)
    p.add_argument("--degenerate", choices=("error", "drop"), default="error")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("forecast", help="particle forecast from a fitted model")
    common(p)
    p.add_argument("data")
    p.add_argument("--model", required=True)
    p.add_argument("--H", type=int, default=5)
    p.add_argument("--N", type=int, default=DEFAULT_N)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--n-qmc", type=int, default=DEFAULT_QMC)
    p.add_argument("--point-out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment from a config")
    common(p, seed_default=None)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"countdfm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitError as exc:
        kind = "data error" if isinstance(exc.cause, _DATA_ERRORS) else "numeric failure"
        print(f"countdfm: {kind}: {exc}", file=sys.stderr)
        return EXIT_DATA if kind == "data error" else EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"countdfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CountDFMError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"countdfm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
