"""
Running the sample experiment end to end
========================================

The sample experiment shortens the metric export interval of the
recommendation service, then drops half of its packets for two minutes
while fifty users browse the shop. Everything runs against the simulated
backend, so ten minutes of experiment time take a few seconds.

Run from the repository root::

    python demos/01_sample_walkthrough.py
"""

from pathlib import Path

from oxn.plots import render_plots
from oxn.report import format_summary, run_experiment
from oxn.store import read_store

root = Path(__file__).resolve().parents[1]
out = root / "runs"

# One call parses, plans, starts the simulated SUE, drives load, injects
# the fault, collects the response and runs detection.
result = run_experiment(root / "experiments" / "recommendation-loss.yml", out=out, run_id="demo-sample", seed=0)
print(format_summary(result.report))

###############################################################################
# The fault window as the journal saw it
# --------------------------------------
# Treatment records carry the actual apply/revert times, not the plan.

for rec in result.report["treatments"]:
    print(rec["name"], rec["status"], rec["start"], rec["end"])

###############################################################################
# The stored frame
# ----------------
# Rows inside the fault window carry the treatment name as their label.

frames = read_store(result.run_dir)
lf = frames["recommendations_per_min"]
inside = lf.labels != "NoTreatment"
print(f"{len(lf)} rows, {inside.sum()} labeled with the fault")
print("mean outside the fault:", lf.frame.value[~inside].mean().round(1))
print("mean inside the fault: ", lf.frame.value[inside].mean().round(1))

###############################################################################
# Plots land next to the report.

for path in render_plots(result.run_dir):
    print("wrote", path.relative_to(root))
