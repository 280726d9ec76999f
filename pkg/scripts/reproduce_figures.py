"""Regenerate every bundled experiment (CSV + SVG) into one output directory.

Usage::

    python scripts/reproduce_figures.py [OUT_DIR]

Each bundled scenario is run through the command-line verb it was written
for; the exit code of every verb is printed (1 marks a failed check, e.g.
the PI baseline collapsing in ``fig5_pi``).
"""
import sys
import time
from pathlib import Path

from idapbc_cpl.cli import main

JOBS = [
    ("run", "fig7_boost_step"),
    ("run", "fig8_buck_step"),
    ("gain-sweep", "fig2_gain_sweep"),
    ("phase-plot", "fig4_phase"),
    ("phase-plot", "fig4_phase_example_design"),
    ("pi-compare", "fig5_pi"),
    ("line-reg", "fig9_line_reg"),
    ("load-reg", "fig10_load_reg"),
    ("certify", "fig7_boost_step"),
    ("certify", "fig8_buck_step"),
]


def run(out: Path) -> int:
    worst = 0
    for verb, name in JOBS:
        t0 = time.perf_counter()
        print(f"=== {verb} {name}")
        code = main([verb, name, "--out-dir", str(out / name)])
        print(f"=== exit {code} ({time.perf_counter() - t0:.1f} s)\n")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(run(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("figures")))
