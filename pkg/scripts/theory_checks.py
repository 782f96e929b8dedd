"""Closed-form Gaussian checks of the tracking theory, printed as PASS/FAIL lines."""

import argparse

from dmdlab.theorylab import gaussian_checks

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    checks, _ = gaussian_checks(a.seed)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
