"""Run the whole harness on a small configuration and print the generated summary.

Takes a few seconds on one CPU core. Pass an output directory as the first
argument to keep the artifacts; otherwise a temporary directory is used.
"""

import sys
import tempfile
from pathlib import Path

from steerlab.harness.cli import main

cfg = Path(__file__).resolve().parent.parent / "tests" / "data" / "mini.cfg"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="steerlab-mini-"))
code = main(["run", "--config", str(cfg), "--out", str(out)])
if code:
    sys.exit(code)
print((out / "summary.md").read_text())
print(f"artifacts in {out}")
