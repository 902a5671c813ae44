"""Held-out prediction MSE on scenario 4 with a 70/30 per-study split.

Example:
    python scripts/mse_ordering.py --reps 1
"""

from _common import base_parser, print_rows

from bifa.bench.grid import BenchConfig, run_grid
from bifa.bench.report import metric_table
from bifa.methods import MethodConfig

SETTINGS = {"stackfa": {"K": 10}, "bmsfa": {"K": 6, "J": 2}, "sufa": {"K": 12}}


def main(argv=None):
    p = base_parser(__doc__.splitlines()[0], reps=1)
    p.add_argument("--methods", nargs="+", default=list(SETTINGS))
    args = p.parse_args(argv)
    bench = BenchConfig(
        scenarios=(4,),
        methods=tuple(args.methods),
        reps=args.reps,
        seed=args.seed,
        mini=not args.full,
        mse=True,
        method=MethodConfig(nrun=args.nrun, burn=args.burn),
        method_overrides={m: SETTINGS[m] for m in args.methods if m in SETTINGS},
        out_dir=args.out_dir,
    )
    records = run_grid(bench, workers=args.workers)
    rows = metric_table(records, args.methods)
    print_rows([{k: r[k] for k in ("method", "n_ok", "mse", "seconds") if k in r} for r in rows])
    ranked = sorted((r for r in rows if "mse" in r), key=lambda r: float(r["mse"].split("(")[0]))
    print("ordering (best first):", " < ".join(r["method"] for r in ranked))


if __name__ == "__main__":
    main()
