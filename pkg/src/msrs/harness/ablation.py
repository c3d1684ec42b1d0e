"""Seeded ablation grids with resumable on-disk cells.

A grid is an :class:`ExperimentConfig` whose axis keys (``granularity``,
``placement``, ``layer``, ``alignment``) may hold lists, plus ``seeds``.
Every (axes, seed) run lives in its own directory with ``report.json`` and a
``manifest.json`` written last; a run with a valid manifest is skipped on
resume. Per-cell summaries aggregate the seeds as mean and standard
deviation (``ddof=0``).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from ..steering import StateCache, init_steering, train
from ..subspace import ActivationBank, aggregate, extract_subspaces, principal_angles
from ..toymodel import init_model
from .config import ConfigError, ExperimentConfig
from .evaluate import MetricsReport, evaluate
from .tasks import generate_linalg, generate_model_tasks

AXES = ("granularity", "placement", "layer", "alignment")
DEFAULT_SEEDS = (42, 43, 44)


@lru_cache(maxsize=8)
def _model(cfg_items: tuple):
    return init_model(ExperimentConfig.from_dict(dict(cfg_items)).model_config())


def _freeze(d: dict) -> tuple:
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items()))


_MODEL_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "model_seed")
_TASK_KEYS = _MODEL_KEYS + (
    "n_attributes",
    "samples_per_attribute",
    "seq_len",
    "shared_rank",
    "private_ranks",
    "noise_sigma",
    "shared_scale",
    "private_scale",
    "n_labels",
    "label_layer",
    "train_fraction",
    "data_seed",
)


def _subset(cfg: ExperimentConfig, keys) -> tuple:
    d = cfg.to_dict()
    return _freeze({k: d[k] for k in keys})


@lru_cache(maxsize=8)
def _tasks(task_items: tuple):
    cfg = ExperimentConfig.from_dict(dict(task_items))
    model = _model(_subset(cfg, _MODEL_KEYS))
    return generate_model_tasks(cfg.task_spec(), model)


def _alignment_kwargs(cfg: ExperimentConfig) -> dict:
    if cfg.alignment == "full":
        return {"r_init": "svd", "lambda1": cfg.lambda1, "lambda2": cfg.lambda2}
    if cfg.alignment == "svd_fixed":
        return {"r_init": "fixed", "freeze_r": True, "lambda1": cfg.lambda1, "lambda2": 0.0}
    return {"r_init": "random", "lambda1": 0.0, "lambda2": 0.0}


def subspace_diagnostics(shared, privates, cfg: ExperimentConfig, d: int) -> dict:
    """Ranks and energies of the extracted blocks, plus planted-recovery angles.

    The angles come from the linalg path of the same task spec (the model path
    has no planted subspace).
    """
    out = {
        "shared_rank": shared.rank,
        "shared_energy": shared.energy_captured,
        "private_ranks": {p.attribute: p.rank for p in privates},
        "private_energy": {p.attribute: p.energy_captured for p in privates},
    }
    lt = generate_linalg(cfg.task_spec(), d)
    bank = ActivationBank(lt.vectors, layer=-1)
    s2, p2, _ = extract_subspaces(bank, replace(cfg.extraction(), max_total_rank=None))
    out["planted_shared_angles"] = principal_angles(s2.basis, lt.shared_basis).tolist()
    out["planted_private_angles"] = {
        p.attribute: (principal_angles(p.basis, lt.private_bases[p.attribute]).tolist() if p.rank else [])
        for p in p2
    }
    return out


def run_cell(cfg: ExperimentConfig) -> MetricsReport:
    """Generate, extract, train and evaluate one configuration."""
    model = _model(_subset(cfg, _MODEL_KEYS))
    checksum = model.checksum()
    tasks = _tasks(_subset(cfg, _TASK_KEYS))
    cache = StateCache(model, cfg.layer)
    bank = aggregate({a: [e.tokens for e in ex] for a, ex in tasks.train.items()}, cfg.layer, model)
    shared, privates, aligned = extract_subspaces(bank, cfg.extraction())
    module = init_steering(aligned, cfg.granularity, cfg.seed, layer=cfg.layer, **_alignment_kwargs(cfg))
    before = evaluate(model, module, tasks.eval, cfg.placement, cache=cache)
    result = train(module, model, tasks.train, cfg.train_config(), cache=cache)
    report = evaluate(model, result.module, tasks.eval, cfg.placement, cache=cache)
    if model.checksum() != checksum:
        raise RuntimeError("frozen model weights changed during training")
    report.trajectory = result.log
    report.subspace = subspace_diagnostics(shared, privates, cfg, model.d)
    report.subspace["initial_task_loss"] = before.mean_task_loss
    report.subspace["initial_accuracy"] = before.accuracy
    report.config = cfg.to_dict()
    report.config["model_checksum"] = checksum
    report.seeds = {"model": cfg.model_seed, "data": cfg.data_seed, "train": cfg.seed}
    return report


# ---------------------------------------------------------------------------
# Grid


@dataclass
class Grid:
    base: ExperimentConfig
    axes: dict[str, list]
    seeds: list[int]

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        d = dict(d)
        seeds = d.pop("seeds", list(DEFAULT_SEEDS))
        if isinstance(seeds, int):
            seeds = [seeds]
        axes = {}
        for k in AXES:
            if isinstance(d.get(k), list):
                axes[k] = d.pop(k)
                if not axes[k]:
                    raise ConfigError(f"axis {k!r} is empty")
        base = ExperimentConfig.from_dict(d)
        for k, vals in axes.items():
            for v in vals:
                base.replace(**{k: v})  # validates each axis value
        return cls(base, axes, list(seeds))

    def runs(self) -> list[tuple[str, str, ExperimentConfig]]:
        """``(cell_key, run_key, config)`` for every axis combination and seed."""
        names = list(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[k] for k in names)):
            over = dict(zip(names, combo))
            cell = cell_key(self.base.replace(**over))
            for s in self.seeds:
                out.append((cell, f"{cell},seed={s}", self.base.replace(**over, seed=s)))
        return out


def cell_key(cfg: ExperimentConfig) -> str:
    return ",".join(f"{k}={getattr(cfg, k)}" for k in AXES)


def _dirname(run_key: str) -> str:
    return run_key.replace(",", "__").replace("=", "-")


def _run_and_store(run_key: str, cfg_dict: dict, run_dir: str) -> str:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    report = run_cell(cfg)
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").unlink(missing_ok=True)
    text = report.to_json()
    (path / "report.json").write_text(text)
    manifest = {"run": run_key, "config": cfg_dict, "status": "done", "checksum": report.checksum()}
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return report.checksum()


def _finished(run_dir: Path, cfg_dict: dict) -> bool:
    mf = run_dir / "manifest.json"
    rp = run_dir / "report.json"
    if not (mf.exists() and rp.exists()):
        return False
    try:
        manifest = json.loads(mf.read_text())
        report = MetricsReport.from_json(rp.read_text())
    except (json.JSONDecodeError, TypeError, ValueError):
        return False
    return manifest.get("status") == "done" and manifest.get("config") == cfg_dict and report.checksum() == manifest.get("checksum")


@dataclass
class AblationResult:
    reports: dict[str, MetricsReport]  # run key -> report
    summary: dict  # cell key -> aggregated metrics
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(list(AXES) + ["metric", "attribute", "mean", "std", "n"])
        for cell, s in self.summary.items():
            axes = dict(kv.split("=", 1) for kv in cell.split(","))
            for metric in ("accuracy", "mean_task_loss"):
                for attr, st in s[metric].items():
                    w.writerow([axes[k] for k in AXES] + [metric, attr, repr(st["mean"]), repr(st["std"]), st["n"]])
        return buf.getvalue()


def summarize(grid: Grid, reports: dict[str, MetricsReport]) -> dict:
    cells: dict[str, list[MetricsReport]] = {}
    for cell, run, _ in grid.runs():
        cells.setdefault(cell, []).append(reports[run])
    out = {}
    for cell, reps in cells.items():
        entry = {}
        for metric in ("accuracy", "mean_task_loss"):
            per_attr = {a: [getattr(r, metric)[a] for r in reps] for a in reps[0].accuracy}
            per_attr["mean"] = [float(np.mean(list(getattr(r, metric).values()))) for r in reps]
            entry[metric] = {
                a: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for a, v in per_attr.items()
            }
        out[cell] = entry
    return out


def ranking(summary: dict, axis: str = "granularity") -> list[tuple[str, float]]:
    """Axis values ordered by mean accuracy, averaged over the other axes."""
    acc: dict[str, list[float]] = {}
    for cell, s in summary.items():
        v = dict(kv.split("=", 1) for kv in cell.split(","))[axis]
        acc.setdefault(v, []).append(s["accuracy"]["mean"]["mean"])
    return sorted(((k, float(np.mean(v))) for k, v in acc.items()), key=lambda kv: (-kv[1], kv[0]))


def run_ablation(
    grid: Grid | dict,
    out_dir: str | Path,
    resume: bool = False,
    workers: int = 1,
    order: Sequence[int] | None = None,
    max_runs: int | None = None,
) -> AblationResult:
    """Run every (cell, seed) of ``grid`` under ``out_dir``.

    ``order`` permutes execution order; ``max_runs`` stops after that many
    fresh runs (an interrupted grid). With ``resume``, runs whose manifest
    validates are loaded instead of recomputed.
    """
    grid = grid if isinstance(grid, Grid) else Grid.from_dict(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = grid.runs()
    idx = list(order) if order is not None else list(range(len(runs)))
    todo, skipped = [], []
    for i in idx:
        cell, run, cfg = runs[i]
        rdir = out / "runs" / _dirname(run)
        if resume and _finished(rdir, cfg.to_dict()):
            skipped.append(run)
        else:
            todo.append((run, cfg.to_dict(), str(rdir)))
    if max_runs is not None:
        todo = todo[:max_runs]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_run_and_store, *zip(*todo)))
    else:
        for args in todo:
            _run_and_store(*args)
    ran = [t[0] for t in todo]
    reports = {}
    for cell, run, _ in runs:
        rp = out / "runs" / _dirname(run) / "report.json"
        if rp.exists():
            reports[run] = MetricsReport.from_json(rp.read_text())
    complete = len(reports) == len(runs)
    summary = summarize(grid, reports) if complete else {}
    if complete:
        payload = {"summary": summary, "ranking": {a: ranking(summary, a) for a in grid.axes}, "seeds": grid.seeds}
        (out / "summary.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return AblationResult(reports, summary, ran, skipped)
