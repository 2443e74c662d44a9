"""Command-line entry point: ``repfed run|ablate|sweep|gradcheck``.

Relative output paths are placed under ``$REPFED_OUTPUT_DIR`` when set.
"""

import argparse
import logging
import sys

from . import kernels
from .config import parse_config, parse_config_text
from .errors import ConfigurationError, NumericError
from .experiments import COMPONENT_ABLATION, run_ablation, run_comm_sweep, run_experiment
from .gradsuite import run_gradient_suite

GRAD_TOLERANCE = 1e-4


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _load(path):
    if path in (None, "-"):
        return parse_config_text("") if path is None else parse_config_text(sys.stdin.read(), "<stdin>")
    return parse_config(path)


def build_parser():
    parser = argparse.ArgumentParser(prog="repfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration")
    p.add_argument("config", nargs="?", help="INI config file (defaults: desk-bench-v1)")
    p.add_argument("--workers", type=int, default=None, help="client training threads")

    p = sub.add_parser("ablate", help="run a variant x seed matrix")
    p.add_argument("config", nargs="?")
    p.add_argument("--variants", default=",".join(COMPONENT_ABLATION),
                   help="comma list of aggregator+regularizer pairs, e.g. mean+none,gca+both")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--parallel", action="store_true", help="one process per run")

    p = sub.add_parser("sweep", help="communication sweep over public rows and representation dim")
    p.add_argument("config", nargs="?")
    p.add_argument("--batches", type=_ints, required=True, help="public rows per round")
    p.add_argument("--dims", type=_ints, required=True, help="representation dimensions")
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--parallel", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "gradcheck":
            worst = run_gradient_suite(args.seeds, args.probes, args.step)
            ok = True
            for name, err in worst.items():
                status = "ok" if err < GRAD_TOLERANCE else "FAIL"
                ok &= err < GRAD_TOLERANCE
                print(f"{name:16s} max_rel_err={err:.3e} {status}")
            print(f"kernel backend: {kernels.BACKEND}")
            return 0 if ok else 1
        cfg = _load(args.config)
        if args.command == "run":
            run_experiment(cfg, workers=args.workers)
        elif args.command == "ablate":
            variants = [v for v in args.variants.split(",") if v.strip()]
            rows, pivot = run_ablation(cfg, variants, args.seeds, parallel=args.parallel)
            for row in pivot:
                print(f"{row['variant']:20s} mean_final_r1_sum={row['mean_final_r1_sum']}")
            if any(r.get("error") for r in rows):
                return 1
        elif args.command == "sweep":
            rows = run_comm_sweep(cfg, args.batches, args.dims, args.seeds, parallel=args.parallel)
            for row in rows:
                print(f"{row['axis']}={row['value']} seed={row['seed']} bytes={row['total_comm_bytes']} "
                      f"r1_sum={row['final_r1_sum']}")
            if any(r.get("error") for r in rows):
                return 1
    except (ConfigurationError, NumericError, OSError) as exc:
        print(f"repfed: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
