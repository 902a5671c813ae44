"""Estimated shared and study-specific factor counts on scenario 2, mean(SD) over replicates.

Counts come from a single pass (no EVD refit), so they reflect what each
method infers from an over-specified starting dimension.

Example:
    python scripts/factor_count_table.py --reps 10
"""

from _common import base_parser, print_rows

from bifa.bench.grid import BenchConfig, run_grid
from bifa.bench.metrics import factor_count_report
from bifa.bench.scenarios import ScenarioSpec
from bifa.methods import MethodConfig


def main(argv=None):
    p = base_parser(__doc__.splitlines()[0], reps=10)
    p.add_argument("--methods", nargs="+", default=["stackfa", "indfa", "bmsfa", "pfa", "momss", "sufa"])
    p.add_argument("--K", type=int, default=6)
    args = p.parse_args(argv)
    bench = BenchConfig(
        scenarios=(2,),
        methods=tuple(args.methods),
        reps=args.reps,
        seed=args.seed,
        mini=not args.full,
        method=MethodConfig(K=args.K, nrun=args.nrun, burn=args.burn, two_pass=False),
        out_dir=args.out_dir,
    )
    records = run_grid(bench, workers=args.workers)
    ok = [r for r in records if r.status == "ok"]
    print_rows(factor_count_report({"method": r.method, "k_hat": r.k_hat, "j_hat": r.j_hat} for r in ok))
    spec = ScenarioSpec.default(2, seed=args.seed)
    spec = spec if args.full else spec.mini()
    print(f"truth: K={spec.K}, J_s={list(spec.J_s)}")


if __name__ == "__main__":
    main()
