"""RV recovery of the shared and study-specific covariances across scenarios and methods.

Example:
    python scripts/scenario_recovery.py --scenarios 1 2 --methods stackfa bmsfa pfa momss --reps 3
"""

from _common import base_parser, print_rows

from bifa.bench.grid import BenchConfig, run_grid
from bifa.bench.report import metric_table
from bifa.methods import METHODS, MethodConfig


def main(argv=None):
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--scenarios", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--methods", nargs="+", default=["stackfa", "indfa", "bmsfa", "pfa", "momss", "sufa"])
    p.add_argument("--K", type=int, default=6)
    args = p.parse_args(argv)
    unknown = set(args.methods) - set(METHODS)
    if unknown:
        p.error(f"unknown methods {sorted(unknown)}")
    bench = BenchConfig(
        scenarios=tuple(args.scenarios),
        methods=tuple(args.methods),
        reps=args.reps,
        seed=args.seed,
        mini=not args.full,
        method=MethodConfig(K=args.K, nrun=args.nrun, burn=args.burn),
        out_dir=args.out_dir,
    )
    records = run_grid(bench, workers=args.workers)
    for sc in args.scenarios:
        print(f"\nscenario {sc}")
        print_rows(metric_table([r for r in records if r.scenario == sc], args.methods))
    for r in records:
        if r.status != "ok":
            print(f"{r.method} scenario {r.scenario} seed {r.seed}: {r.status}: {r.message}")


if __name__ == "__main__":
    main()
