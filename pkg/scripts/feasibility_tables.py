"""Write remap feasibility tables for a range of transfer/compute ratios."""

import argparse
import contextlib
from pathlib import Path

from remapsim.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratios", default="0.1,1,2,3.4,3.5,5,10,40")
    ap.add_argument("--preset", default="opt-13b")
    ap.add_argument("--out", default="tables")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in args.ratios.split(","):
        path = out / f"plan_{args.preset}_ratio_{r}.csv"
        with open(path, "w") as f, contextlib.redirect_stdout(f):
            main(["plan", "--preset", args.preset, "--ratio", r])
        print(f"wrote {path}")
