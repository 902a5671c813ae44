"""Wall-clock and peak memory of each method on scenario 1 as P grows.

Example:
    python scripts/runtime_profile.py --P 50 100 200 --methods stackfa momss sufa
"""

import warnings

from _common import base_parser, print_rows

from bifa.bench.metrics import mean_sd
from bifa.bench.profiling import profile
from bifa.bench.scenarios import ScenarioSpec, generate_scenario
from bifa.errors import GuardRefusal
from bifa.methods import MethodConfig, prepare_data, run_method


def main(argv=None):
    p = base_parser(__doc__.splitlines()[0], reps=2, nrun=1000, burn=500)
    p.add_argument("--P", type=int, nargs="+", default=[50, 100, 200])
    p.add_argument("--methods", nargs="+", default=["stackfa", "indfa", "bmsfa", "pfa", "momss", "sufa"])
    p.add_argument("--K", type=int, default=6)
    args = p.parse_args(argv)
    rows = []
    for P in args.P:
        for m in args.methods:
            secs, mem, note = [], [], ""
            for r in range(args.reps):
                seed = args.seed + r
                ds, _ = generate_scenario(ScenarioSpec.default(1, seed=seed, P=P))
                cfg = MethodConfig(K=args.K, nrun=args.nrun, burn=args.burn, seed=seed)
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        prof = profile(lambda: run_method(m, prepare_data(m, ds), cfg))
                except GuardRefusal as exc:
                    note = f"refused: {exc}"
                    break
                secs.append(prof.seconds)
                mem.append(prof.peak_mib)
            rows.append({
                "P": P,
                "method": m,
                "seconds": mean_sd(secs) if secs else "-",
                "peak_mib": mean_sd(mem, 1) if mem else "-",
                "note": note,
            })
            print_rows(rows[-1:])
    print()
    print_rows(rows)


if __name__ == "__main__":
    main()
