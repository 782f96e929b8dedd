"""Full IDA x TTUR ablation: TTUR in {5, 10, 20}, IDA on/off, three seeds each.

Writes one run directory per cell, summary.csv and an FD-vs-update chart.
"""

import argparse
import sys

from dmdlab.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ida_ttur")
    ap.add_argument("--ttur", default="5,10,20")
    ap.add_argument("--overwrite", action="store_true")
    a = ap.parse_args()
    argv = ["ablate-ida-ttur", "--out", a.out, "--ttur", a.ttur]
    argv += ["--config", a.config] if a.config else []
    argv += ["--overwrite"] if a.overwrite else []
    sys.exit(main(argv))
