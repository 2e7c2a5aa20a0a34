#!/usr/bin/env python3
"""Run the BSDE benchmark from a source checkout: python run_bench.py --config run.json"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from bsde_bench.main import run  # noqa: E402

if __name__ == '__main__':
    sys.exit(run(sys.argv[1:]))
