"""Command-line interface: ``lmbtbd {illustrative,simulate,ospa,scenario}``."""
import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigError
from .filters import VARIANTS
from .harness import WORKERS_ENV, RunConfig, run_experiment
from .kld import GaussianCaseSpec, run_illustrative_case, write_grid_csv, write_kld_csv
from .metrics import OSPA_CUTOFF, OSPA_ORDER, OspaParams, ospa
from .models import SCENARIOS, build_scenario, save_scenario


def _cmd_illustrative(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = GaussianCaseSpec.standard_case(args.case, cells=args.cells)
    res = run_illustrative_case(spec, args.iters)
    path = write_kld_csv([res], out / f"kld_case{args.case}.csv")
    for n in range(len(res.klds)):
        write_grid_csv(res, n, out / f"grid_case{args.case}_n{n}.csv", stride=args.stride)
    for n, k in enumerate(res.klds):
        print(f"case {args.case}  n={n}  kld={k:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_simulate(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.out:
        cfg.out = args.out
    if cfg.out is None:
        raise ConfigError("no output directory: set field 'out' or pass --out")
    res = run_experiment(cfg, args.workers)
    for variant, s in res.summary["variants"].items():
        print(f"{variant:10s} runs={s['runs_ok']:3d}  rmsospa(avg)={s['rmsospa_time_avg']:.2f} m  "
              f"card_acc={s['card_accuracy']:.3f}")
    print(f"failed runs: {res.summary['failures']}; wrote {cfg.out}")
    return 0


def _read_points(path):
    pts = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"step", "x", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for row in reader:
            step = int(row["step"])
            if row["x"] == "" and row["y"] == "":
                pts[step]
                continue
            pts[step].append((float(row["x"]), float(row["y"])))
    return pts


def _cmd_ospa(args) -> int:
    est, truth = _read_points(args.est), _read_points(args.truth)
    params = OspaParams(args.cutoff, args.order)
    print("step,ospa_m")
    for step in sorted(set(est) | set(truth)):
        X = np.array(est.get(step, []), dtype=float).reshape(-1, 2)
        Y = np.array(truth.get(step, []), dtype=float).reshape(-1, 2)
        print(f"{step},{ospa(X, Y, params)!r}")
    return 0


def _cmd_scenario(args) -> int:
    model, truth = build_scenario(args.name, n_sensors_x=args.sensors_x,
                                  n_sensors_y=args.sensors_y)
    path = save_scenario(args.out, model, truth)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmbtbd",
                                description="LMB track-before-detect filters and experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("illustrative", help="iterated LMB improvement on a bivariate Gaussian")
    s.add_argument("--case", type=int, choices=(1, 2), required=True)
    s.add_argument("--iters", type=int, default=6, help="number of KLD values, n = 0..iters-1")
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--cells", type=int, default=400, help="grid cells per axis")
    s.add_argument("--stride", type=int, default=4, help="grid dump subsampling")
    s.set_defaults(func=_cmd_illustrative)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment from a JSON config",
                       epilog=f"filters: {', '.join(VARIANTS)}.  The worker count defaults "
                              f"to ${WORKERS_ENV} (1 if unset).")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (overrides the config)")
    s.add_argument("--workers", type=int, help="parallel worker processes")
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("ospa", help="per-step OSPA between two CSV files with columns step,x,y")
    s.add_argument("--est", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--cutoff", type=float, default=OSPA_CUTOFF)
    s.add_argument("--order", type=float, default=OSPA_ORDER)
    s.set_defaults(func=_cmd_ospa)

    s = sub.add_parser("scenario", help="write a scenario fixture as JSON")
    s.add_argument("--name", required=True, help=f"one of: {', '.join(SCENARIOS)}")
    s.add_argument("--out", required=True)
    s.add_argument("--sensors-x", type=int, default=21)
    s.add_argument("--sensors-y", type=int, default=12)
    s.set_defaults(func=_cmd_scenario)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"lmbtbd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
