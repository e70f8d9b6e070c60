"""Command-line interface: ``consensusjm {simulate,fit,combine,report,bench}``.

Exit codes: 0 success, 2 usage or configuration error, 3 invalid data,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

from .consensus import METHODS, combine
from .data import DataValidationError, load_dataset, write_dataset
from .errors import ChainFailure, NumericalError
from .model import ModelSpec, ParamLayout
from .report import run_scenarios, summarize, write_figure_tables, write_scenario_results
from .sampler import ChainConfig
from .storage import (ConfigError, RunConfig, load_draw_grid, read_config, read_draws,
                      write_config, write_consensus, write_weights)

log = logging.getLogger("consensusjm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _cores(text: str) -> int | None:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("cores must be >= 0 (0 = unlimited)")
    return v or None


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


# commands -------------------------------------------------------------------
def cmd_simulate(args) -> int:
    from .simulator import default_params, simulate_dataset, with_params, write_truth

    try:
        params = with_params(default_params(), dict(args.param))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, truth = simulate_dataset(params, args.n, args.seed)
    write_dataset(data, out)
    write_truth(truth, out / "truth.csv")
    events = sum(s.survival.event for s in data)
    log.info("simulated %d subjects (%d events) into %s", len(data), events, out)
    return EXIT_OK


def _fit_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    updates = {}
    for key in ("splits", "seed", "longitudinal", "survival", "out_dir"):
        val = getattr(args, key)
        if val is not None:
            updates[key] = val
    if args.cores is not None:
        updates["cores"] = _cores(args.cores)
    return replace(cfg, **updates)


def cmd_fit(args) -> int:
    from .pipeline import fit_split, write_fit

    cfg = _fit_config(args)
    data = load_dataset(cfg.longitudinal, cfg.survival)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "run_config.txt")
    log.info("fitting %d subjects in %d subsample(s), %d chain(s) each, core cap %s",
             len(data), cfg.splits, cfg.chains.n_chains, cfg.cores or "unlimited")
    result = fit_split(data, cfg.model, cfg.chain_config(), cfg.splits, cfg.cores)
    write_fit(result, out, len(data))
    log.info("wall %.1fs, peak concurrency %d", result.timing.wall_seconds, result.timing.peak_concurrency)
    return EXIT_OK


def cmd_combine(args) -> int:
    try:
        grid = load_draw_grid(args.in_dir)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir or args.in_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = combine(grid, args.method)
    write_consensus(result, out)
    if result.weights is not None:
        write_weights(result.weights, out)
    log.info("%s consensus of S=%d, K=%d written to %s", args.method, len(grid), len(grid[0]), out)
    return EXIT_OK


_CONSENSUS_RE = re.compile(r"^consensus_(union|equal|precision)_c(\d+)\.csv$")


def _summaries(directory: Path, source: str):
    """``(label, names, (K, D, P) draws)`` for every draw set of ``directory``."""
    import numpy as np

    sets = []
    if source in ("auto", "draws"):
        try:
            grid = load_draw_grid(directory)
        except ValueError:
            grid = []
        for row in grid:
            sets.append((f"s{row[0].subsample}", row[0].names, np.stack([c.draws for c in row])))
    if source != "draws":
        found: dict[str, dict[int, Path]] = {}
        for p in sorted(directory.iterdir()):
            m = _CONSENSUS_RE.match(p.name)
            if m and source in ("auto", m.group(1)):
                found.setdefault(m.group(1), {})[int(m.group(2))] = p
        for method in METHODS:
            if method in found:
                mats = [read_draws(found[method][k]) for k in sorted(found[method])]
                sets.append((method, mats[0][0], np.stack([m for _, m in mats])))
    return sets


def cmd_report(args) -> int:
    directory = Path(args.in_dir)
    if not directory.is_dir():
        raise UsageError(f"draws directory not found: {directory}")
    sets = _summaries(directory, args.source)
    if not sets:
        raise UsageError(f"no draws found in {directory}")
    out = Path(args.out_dir or directory)
    out.mkdir(parents=True, exist_ok=True)
    for label, names, draws in sets:
        summ = summarize(draws, transform=ParamLayout.from_names(names))
        path = summ.write_csv(out / f"summary_{label}.csv")
        print(f"# {label}: {draws.shape[0]} chain(s) x {draws.shape[1]} draws -> {path}")
        print(f"{'parameter':<22}{'mean':>12}{'sd':>12}{'q2.5':>12}{'q97.5':>12}{'rhat':>8}")
        for j, name in enumerate(summ.names):
            print(f"{name:<22}{summ.mean[j]:>12.4g}{summ.sd[j]:>12.4g}{summ.lower[j]:>12.4g}"
                  f"{summ.upper[j]:>12.4g}{summ.rhat[j]:>8.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .executor import speedup_report, write_speedup_csv, write_timing_csv

    methods = tuple(m.strip() for m in args.methods.split(","))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    spec = ModelSpec(baseline=args.baseline)
    config = ChainConfig(n_chains=args.chains, n_iter=args.n_iter, n_warmup=args.n_warmup)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(n, S, r, fit):
        log.info("n=%d S=%d replica=%d: %.1fs", n, S, r, fit.timing.wall_seconds)

    splits = sorted(set(args.splits) | {1})
    results = run_scenarios(args.n, splits, methods, args.replicas, spec, config,
                            seed=args.seed, core_cap=_cores(args.cores), progress=progress)
    write_scenario_results(results, out / "scenario_results.csv")
    write_figure_tables(results, out)
    cells = {(r.n, r.S, r.replica): r for r in results if r.error is None}
    write_timing_csv(out / "timing.csv", [("bench", n, S, c.core_cap, f"replica{r}", c.wall_seconds)
                                          for (n, S, r), c in sorted(cells.items())])
    base = {(n, r): c.wall_seconds for (n, S, r), c in cells.items() if S == 1}
    runs = [(n, S, r, c.wall_seconds) for (n, S, r), c in sorted(cells.items())
            if S > 1 and (n, r) in base]
    write_speedup_csv(out / "speedup.csv", speedup_report(base, runs))
    failed = [r for r in results if r.error is not None]
    for r in failed:
        log.warning("n=%d S=%d replica=%d failed: %s", r.n, r.S, r.replica, r.error.splitlines()[0])
    return EXIT_OK


# parser ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="consensusjm", description="Split-and-combine MCMC for joint models.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a joint-model dataset")
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--param", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override a generating parameter (repeatable)")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="split, sample and write draws")
    f.add_argument("--config", help="key = value run configuration")
    f.add_argument("--splits", type=_positive)
    f.add_argument("--cores", help="core cap, 0 = one core per chain job")
    f.add_argument("--seed", type=int)
    f.add_argument("--longitudinal")
    f.add_argument("--survival")
    f.add_argument("--out-dir")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("combine", help="combine subsample draws")
    c.add_argument("--method", choices=METHODS, required=True)
    c.add_argument("--in-dir", required=True)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_combine)

    r = sub.add_parser("report", help="summaries and R-hat of a draws directory")
    r.add_argument("--in-dir", required=True)
    r.add_argument("--out-dir")
    r.add_argument("--source", choices=("auto", "draws") + METHODS, default="auto")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("bench", help="run a simulation-study grid")
    b.add_argument("--n", type=_int_list, default=[200, 500, 1000])
    b.add_argument("--splits", type=_int_list, default=[1, 2, 5])
    b.add_argument("--methods", default=",".join(METHODS))
    b.add_argument("--replicas", type=_positive, default=20)
    b.add_argument("--chains", type=_positive, default=3)
    b.add_argument("--n-iter", type=_positive, default=3500)
    b.add_argument("--n-warmup", type=int, default=500)
    b.add_argument("--baseline", choices=("weibull", "pspline"), default="pspline")
    b.add_argument("--cores", default="0", help="core cap, 0 = unlimited")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ChainFailure as exc:
        print(f"sampler failure in subsample {exc.subsample}, chain {exc.chain}: "
              f"{str(exc.message).splitlines()[0]}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericalError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
