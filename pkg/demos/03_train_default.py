"""
Training on the default desk experiment
=======================================

A 2-layer toy transformer is frozen; two attribute tasks are read off its
layer-1 states. We extract subspaces, train one attribute-gated module for
200 steps and compare evaluation loss before and after.
"""

import time

from msrs.harness.ablation import run_cell
from msrs.harness.config import ExperimentConfig

cfg = ExperimentConfig()
print({k: getattr(cfg, k) for k in ("d_model", "n_layers", "layer", "granularity", "steps", "lr", "batch_size", "seed")})

t0 = time.perf_counter()
report = run_cell(cfg)
print(f"trained in {time.perf_counter() - t0:.1f}s")

# %%
# Task loss at the last position, per attribute.
for a, after in report.mean_task_loss.items():
    before = report.subspace["initial_task_loss"][a]
    print(f"{a}: {before:.3f} -> {after:.3f}  accuracy {report.subspace['initial_accuracy'][a]:.2f} -> {report.accuracy[a]:.2f}")

# %%
# Extracted ranks (capped to 8 rows in total) and the loss trajectory.
print("ranks", report.subspace["shared_rank"], report.subspace["private_ranks"])
for rec in report.trajectory[::40]:
    print(rec)
