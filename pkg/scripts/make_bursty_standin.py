"""Regenerate the bundled bursty inter-arrival file (synthetic, not trace data).

Two-state Markov-modulated Poisson process: 8 req/s bursts (mean stay 4 s)
alternating with 0.8 req/s lulls (mean stay 8 s); gaps normalized to mean 1.
"""

import argparse
from pathlib import Path

from remapsim.workload import cv, mmpp_gaps

OUT = Path(__file__).resolve().parents[1] / "src" / "remapsim" / "data" / "bursty_mmpp.csv"

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(OUT))
    args = ap.parse_args()
    gaps = mmpp_gaps(args.n, args.seed)
    with open(args.out, "w") as f:
        f.write("# synthetic two-state MMPP stand-in; unitless gaps with mean 1\n")
        f.write("gap\n")
        f.writelines(f"{g:.6f}\n" for g in gaps)
    print(f"wrote {len(gaps)} gaps to {args.out} (cv={cv(gaps):.3f})")
