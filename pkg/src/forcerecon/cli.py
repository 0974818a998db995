"""Command line entry point."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import harness
from .errors import ForceReconError, InfeasibleParametersError
from .io import read_csv

log = logging.getLogger("forcerecon")


def _common(p):
    p.add_argument("--config", required=True, help="experiment config (INI)")
    p.add_argument("--out", help="output directory (overrides [output] out_dir)")
    p.add_argument("--seed", type=int, help="rng seed override")
    p.add_argument("--threads", type=int, help="FFT worker threads (env FORCERECON_THREADS)")
    p.add_argument("--quiet", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="forcerecon", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "integrate the truth and archive it"),
                        ("sieve", "twin run of the (stationary) sieve"),
                        ("nudge", "twin run of the nudging system"),
                        ("check", "condition report, exit 0 iff feasible")):
        _common(sub.add_parser(name, help=help_))
    sw = sub.add_parser("sweep", help="one twin run per value of a config field")
    _common(sw)
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help="comma separated")
    sw.add_argument("--workers", type=int)
    ft = sub.add_parser("fit", help="decay-rate fit of a CSV column")
    ft.add_argument("csv")
    ft.add_argument("--column", required=True)
    ft.add_argument("--index", default=None, help="abscissa column (default t, else stage)")
    ft.add_argument("--start", type=float)
    ft.add_argument("--end", type=float)
    ft.add_argument("--min-samples", type=int, default=8)
    ft.add_argument("--quiet", action="store_true")
    return ap


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FORCERECON_THREADS")
    return int(env) if env else None


def _load(args):
    cfg = harness.load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    t = _threads(args)
    if t is not None:
        kw["threads"] = t
    if args.out:
        kw["out_dir"] = args.out
    return cfg.replace(**kw) if kw else cfg


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except InfeasibleParametersError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if exc.report is not None and not args.quiet:
            print(exc.report.to_text(), file=sys.stderr)
        return 3
    except (ForceReconError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args):
    if args.command == "fit":
        return _fit(args)
    cfg = _load(args)
    if args.command == "check":
        rep = harness.check(cfg)
        print(rep.to_text())
        for k, v in rep.to_kv().items():
            print(f"{k}={v}")
        return 0 if rep.feasible else 1
    if args.command == "simulate":
        if not cfg.out_dir:
            raise ValueError("simulate needs --out or [output] out_dir")
        traj, obs = harness.simulate(cfg, cfg.out_dir)
        _say(args, f"archived {len(traj.states)} states to {cfg.out_dir}")
        return 0
    if args.command == "sweep":
        rows = harness.sweep(cfg, args.axis, [v for v in args.values.split(",") if v.strip()],
                             workers=args.workers, out_dir=cfg.out_dir or None)
        cols = [args.axis] + harness.SWEEP_COLUMNS
        if not cfg.out_dir:
            w = csv.DictWriter(sys.stdout, cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        else:
            _say(args, f"{len(rows)} rows written to {cfg.out_dir}/sweep.csv")
        return 0 if all(r["status"] == "ok" for r in rows) else 4
    want = {"sieve": ("sieve", "sieve_stationary"), "nudge": ("nudging",)}[args.command]
    if cfg.algorithm not in want:
        if args.command == "nudge":
            cfg = cfg.replace(algorithm="nudging")
        else:
            cfg = cfg.replace(algorithm="sieve")
    res = harness.run_twin(cfg)
    s = res.series
    _say(args, f"N={res.N} " + " ".join(f"{k}={v:.6g}" for k, v in res.params.items() if k != "N"))
    for name in s.names():
        if name != s.index:
            _say(args, f"{name}: {s[name][0]:.3e} -> {s[name][-1]:.3e}")
    for c, fit in s.fits.items():
        _say(args, f"fit {c}: rate={fit.rate:.4g} residual={fit.residual:.3g}" + (" (floored)" if fit.floored else ""))
    if res.paths:
        _say(args, "wrote " + ", ".join(res.paths.values()))
    return 0


def _fit(args):
    data = read_csv(args.csv)
    if args.column not in data:
        raise ValueError(f"no column {args.column!r} in {args.csv}")
    index = args.index or ("t" if "t" in data else "stage")
    fit = harness.fit_decay_rate(data, args.column, (args.start, args.end), args.min_samples, index=index)
    print(f"rate={fit.rate!r}")
    print(f"intercept={fit.intercept!r}")
    print(f"residual={fit.residual!r}")
    print(f"samples={fit.n}")
    print(f"floored={str(fit.floored).lower()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
