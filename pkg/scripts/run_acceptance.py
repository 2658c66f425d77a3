"""Run the acceptance suite and print one PASS/FAIL line per criterion.

Takes roughly half an hour on one CPU core.
"""
import subprocess
import sys
from pathlib import Path

root = Path(__file__).resolve().parents[1]
sys.exit(subprocess.call([sys.executable, "-m", "pytest", str(root / "tests" / "test_acceptance.py"), "-v", "-s", *sys.argv[1:]], cwd=root))
