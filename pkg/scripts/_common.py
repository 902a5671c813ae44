"""Shared argument handling for the experiment scripts."""

import argparse

def base_parser(description, reps=5, nrun=2000, burn=1000):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--reps", type=int, default=reps)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nrun", type=int, default=nrun)
    p.add_argument("--burn", type=int, default=burn)
    p.add_argument("--full", action="store_true", help="full-size dimensions instead of the desk-scale variants")
    p.add_argument("--workers", type=int, default=None, help="process pool size (default: IFA_WORKERS or 1)")
    p.add_argument("--out-dir", default=None)
    return p


def print_rows(rows):
    if not rows:
        return
    cols = list(dict.fromkeys(k for r in rows for k in r))
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in cols))
