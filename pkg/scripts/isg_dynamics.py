"""Segment guidance on/off over three seeds, FD at 10/25/50/100% of training."""

import argparse
import sys

from dmdlab.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/isg")
    ap.add_argument("--overwrite", action="store_true")
    a = ap.parse_args()
    argv = ["ablate-isg", "--out", a.out]
    argv += ["--config", a.config] if a.config else []
    argv += ["--overwrite"] if a.overwrite else []
    sys.exit(main(argv))
