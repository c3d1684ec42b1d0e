"""
A small ablation grid
=====================

Granularity against placement over three seeds. Runs land in their own
directories, so the grid can be interrupted and resumed; the summary holds
mean and std per cell.
"""

import json
import tempfile
from pathlib import Path

from msrs.harness.ablation import run_ablation

grid = {
    "granularity": ["same", "attribute", "rank"],
    "placement": ["last", "important"],
    "seeds": [42, 43, 44],
    "steps": 60,
}
out = Path(tempfile.mkdtemp()) / "grid"

# %%
# Stop after five runs, then resume: only the remaining runs execute.
first = run_ablation(grid, out, max_runs=5)
rest = run_ablation(grid, out, resume=True)
print("first pass", len(first.ran), "resumed", len(rest.ran), "skipped", len(rest.skipped))

# %%
for cell, s in rest.summary.items():
    acc = s["accuracy"]["mean"]
    print(f"{cell:60s} accuracy {acc['mean']:.3f} +- {acc['std']:.3f}")

print(json.loads((out / "summary.json").read_text())["ranking"]["granularity"])
