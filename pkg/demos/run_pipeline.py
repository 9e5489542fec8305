"""Drive the command-line pipeline on the smoke config and show the summary table.

The smoke config only checks the plumbing; use configs/i1_desk.yaml for meaningful numbers.
"""
import sys
import tempfile
from pathlib import Path

from gigpricing.cli import main

config = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
code = main(["all", "--config", str(config), "--out", str(out)])
print("exit code", code)
print((out / "report_summary.csv").read_text())
