"""Run a reduced detection-rate experiment and print the fitted slopes.

Results land in ``results/demo-detection``; rerunning resumes from the saved cells.
"""

from spotrank.experiments import default_plan, run_plan

plan = default_plan("detection", replications=50, name="demo-detection")
cells, summary = run_plan(plan, output_dir="results", workers=2)
for c in cells:
    print(c.coords, f"EV2={c.extra['ev2']:.3g}" if c.extra.get("resolved") else "unresolved")
print("slopes:", summary)
