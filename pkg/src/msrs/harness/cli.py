"""Command-line entry point: ``msrs generate | extract | train | eval | ablate``.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 I/O or corrupted artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from ..steering import GRANULARITIES, TrainConfig, init_steering, train
from ..subspace import ActivationBank, ExtractionConfig, aggregate, extract_subspaces, principal_angles
from ..toymodel import init_model
from .ablation import run_ablation
from .config import ALIGNMENTS, ConfigError, ExperimentConfig, describe_keys, read_flat
from .evaluate import evaluate
from .io import ArtifactError, load_artifact, save_artifact
from .tasks import TaskBundle, generate_linalg, generate_model_tasks, load_dataset, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = ExperimentConfig.from_file(args.spec)
    model = init_model(cfg.model_config())
    spec = cfg.task_spec()
    bundle = TaskBundle(spec, generate_linalg(spec, model.d), generate_model_tasks(spec, model))
    out = Path(args.out)
    save_dataset(bundle, out)
    save_artifact(out / "model.msrs", model)
    _write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {out}/data.jsonl, meta.json, model.msrs")
    return EXIT_OK


def cmd_extract(args) -> int:
    bundle = load_dataset(args.data)
    model = load_artifact(args.model, "model")
    if bundle.model is None:
        raise ConfigError(f"{args.data} has no model-path samples")
    ext = ExtractionConfig(
        args.threshold, args.energy, args.residual_source, args.cross_orthogonalize, args.max_total_rank
    )
    bank = aggregate({a: [e.tokens for e in ex] for a, ex in bundle.model.train.items()}, args.layer, model)
    shared, privates, aligned = extract_subspaces(bank, ext)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_artifact(out / "shared.msrs", shared)
    for p in privates:
        save_artifact(out / f"private_{p.attribute}.msrs", p)
    save_artifact(out / "aligned.msrs", aligned)
    lt = bundle.linalg
    s2, p2, _ = extract_subspaces(ActivationBank(lt.vectors, layer=-1), ExtractionConfig(
        args.threshold, args.energy, args.residual_source, args.cross_orthogonalize))
    info = {
        "layer": args.layer,
        "extraction": asdict(ext),
        "shared_rank": shared.rank,
        "private_ranks": {p.attribute: p.rank for p in privates},
        "layout": [[b.kind, b.attribute, b.offset, b.length] for b in aligned.layout],
        "model_checksum": model.checksum(),
        "linalg_planted_shared_angles": principal_angles(s2.basis, lt.shared_basis).tolist(),
        "linalg_planted_private_angles": {
            p.attribute: principal_angles(p.basis, lt.private_bases[p.attribute]).tolist() if p.rank else []
            for p in p2
        },
    }
    _write_json(out / "extract.json", info)
    print(f"r_s={shared.rank} private={info['private_ranks']} r={aligned.r}")
    return EXIT_OK


def _alignment_kwargs(alignment: str, l1: float, l2: float) -> dict:
    if alignment == "svd_fixed":
        return {"r_init": "fixed", "freeze_r": True, "lambda1": l1, "lambda2": 0.0}
    if alignment == "reft":
        return {"r_init": "random", "lambda1": 0.0, "lambda2": 0.0}
    return {"r_init": "svd", "lambda1": l1, "lambda2": l2}


def cmd_train(args) -> int:
    sub = Path(args.subspaces)
    info = json.loads((sub / "extract.json").read_text())
    aligned = load_artifact(sub / "aligned.msrs", "aligned")
    model = load_artifact(args.model, "model")
    bundle = load_dataset(args.data)
    module = init_steering(
        aligned,
        args.granularity,
        args.seed,
        layer=info["layer"],
        **_alignment_kwargs(args.alignment, args.lambda1, args.lambda2),
    )
    tcfg = TrainConfig(args.steps, args.lr, args.batch_size, args.seed, args.train_position)
    result = train(module, model, bundle.model.train, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_artifact(out, result.module)
    Path(f"{out}.log.jsonl").write_text(result.log_lines())
    _write_json(Path(f"{out}.json"), {"model_checksum": model.checksum(), "train": tcfg.to_dict(), "alignment": args.alignment})
    last = result.log[-1] if result.log else {}
    print(f"trained {args.steps} steps; final total loss {last.get('total')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    module = load_artifact(args.ckpt, "checkpoint")
    model_path = Path(args.model) if args.model else Path(args.data) / "model.msrs"
    model = load_artifact(model_path, "model")
    side = Path(f"{args.ckpt}.json")
    if side.exists():
        want = json.loads(side.read_text()).get("model_checksum")
        if want and want != model.checksum():
            raise ArtifactError("checksum", f"{model_path} is not the model {args.ckpt} was trained on")
    bundle = load_dataset(args.data)
    report = evaluate(model, module, bundle.model.eval, args.placement, force_attribute=args.force_attribute)
    report.config.update({"granularity": module.granularity, "lambda1": module.lambda1, "lambda2": module.lambda2})
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attribute", "accuracy", "mean_task_loss"])
            for a in report.accuracy:
                w.writerow([a, repr(report.accuracy[a]), repr(report.mean_task_loss[a])])
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = read_flat(args.grid)
    result = run_ablation(grid, args.out, resume=args.resume, workers=args.workers)
    if args.csv:
        Path(args.out, "summary.csv").write_text(result.to_csv())
    print(f"ran {len(result.ran)} runs, skipped {len(result.skipped)}; summary in {args.out}/summary.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="msrs",
        description="Subspace-gated steering of a toy frozen transformer.",
        epilog="config keys (flat JSON files for --spec and --grid):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sp = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sp.add_parser("generate", help="generate synthetic datasets and the frozen model")
    g.add_argument("--spec", required=True, help="flat JSON config file")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sp.add_parser("extract", help="extract shared/private subspaces")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--layer", type=int, required=True)
    e.add_argument("--residual-source", choices=("mean", "samples"), default="samples")
    e.add_argument("--energy", choices=("sigma", "sigma_squared"), default="sigma")
    e.add_argument("--cross-orthogonalize", action="store_true")
    e.add_argument("--threshold", type=float, default=0.90)
    e.add_argument("--max-total-rank", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    t = sp.add_parser("train", help="train a steering module")
    t.add_argument("--subspaces", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True)
    t.add_argument("--granularity", choices=GRANULARITIES, default="attribute")
    t.add_argument("--alignment", choices=ALIGNMENTS, default="full")
    t.add_argument("--lambda1", type=float, default=0.3)
    t.add_argument("--lambda2", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=5e-3)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=2)
    t.add_argument("--train-position", choices=("last", "important"), default="last")
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    v = sp.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--model", default=None, help="defaults to <data>/model.msrs")
    v.add_argument("--placement", choices=("last", "important"), default="last")
    v.add_argument("--report", required=True)
    v.add_argument("--force-attribute", action="store_true", help="multiply the learned gate by the attribute's prior mask")
    v.add_argument("--csv", default=None, help="also write a flat per-attribute table")
    v.set_defaults(func=cmd_eval)

    a = sp.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--resume", action="store_true")
    a.add_argument("--csv", action="store_true", help="also write summary.csv")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ValueError, KeyError) as e:
        print(f"numerical or validation failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
