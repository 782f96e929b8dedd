"""Run the twelve acceptance criteria and print one PASS/FAIL line per criterion.

Distillation runs are cached under runs/acceptance and reused while the code and
config are unchanged; a cold start trains the teacher plus nine 6k-iteration runs.
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    sys.exit(pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", *sys.argv[1:]]))
