"""``python -m dmdlab``."""

import sys

from dmdlab.cli import main

sys.exit(main())
