"""Synthetic multi-attribute data with planted ground truth.

Two families are produced from one :class:`AttributeTaskSpec`:

* linalg path: raw ``d``-vectors ``shared + private + noise`` drawn from planted
  orthonormal bases, for testing extraction in isolation;
* model path: token sequences whose gold next token is
  ``label_tokens[argmax(probe_i @ (h - center_i))]`` with ``h`` the frozen
  model's last-token state at ``label_layer``.

Attribute ids are ``"attr0"``, ``"attr1"``, ...
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..steering import Example
from ..toymodel import FrozenModel, forward_capture


@dataclass(frozen=True)
class AttributeTaskSpec:
    n_attributes: int = 2
    samples_per_attribute: int = 256
    seq_len: int = 8
    shared_rank: int = 2
    private_ranks: tuple[int, ...] | int = 2
    noise_sigma: float = 0.01
    shared_scale: float = 3.0
    private_scale: float = 3.0
    n_labels: int = 4
    label_layer: int = 1
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        pr = self.private_ranks
        pr = (int(pr),) * self.n_attributes if isinstance(pr, (int, np.integer)) else tuple(int(x) for x in pr)
        object.__setattr__(self, "private_ranks", pr)
        for name in ("n_attributes", "samples_per_attribute", "seq_len", "shared_rank", "n_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(pr) != self.n_attributes or min(pr) < 1:
            raise ValueError(f"private_ranks must give {self.n_attributes} counts >= 1, got {pr}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.shared_rank > self.n_attributes:
            raise ValueError("a planted shared rank above n_attributes cannot be recovered from attribute means")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")

    def attributes(self) -> list[str]:
        return [f"attr{i}" for i in range(self.n_attributes)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["private_ranks"] = list(self.private_ranks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeTaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown task spec keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("private_ranks"), list):
            d["private_ranks"] = tuple(d["private_ranks"])
        return cls(**d)


@dataclass
class LinalgTasks:
    vectors: dict[str, np.ndarray]  # attr -> N x d
    shared_basis: np.ndarray  # s x d, planted
    private_bases: dict[str, np.ndarray]  # attr -> r_i x d, planted


@dataclass
class ModelTasks:
    train: dict[str, list[Example]]
    eval: dict[str, list[Example]]
    probes: dict[str, np.ndarray]  # attr -> n_labels x d
    centers: dict[str, np.ndarray]  # attr -> d
    label_tokens: tuple[int, ...]
    marker_tokens: dict[str, int]
    layer: int

    def all_examples(self) -> dict[str, list[Example]]:
        return {a: self.train[a] + self.eval[a] for a in self.train}


@dataclass
class TaskBundle:
    spec: AttributeTaskSpec
    linalg: LinalgTasks
    model: ModelTasks | None = None


def planted_bases(spec: AttributeTaskSpec, d: int, rng: np.random.Generator):
    need = spec.shared_rank + sum(spec.private_ranks)
    if need > d:
        raise ValueError(f"planted ranks sum to {need}, exceeding width d={d}")
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    shared = q[:, : spec.shared_rank].T.copy()
    privates = {}
    off = spec.shared_rank
    for attr, r in zip(spec.attributes(), spec.private_ranks):
        privates[attr] = q[:, off : off + r].T.copy()
        off += r
    return shared, privates


def _centered(rng, n: int, k: int, scale: float) -> np.ndarray:
    z = scale * rng.standard_normal((n, k))
    return z - z.mean(axis=0) if n > 1 else np.zeros((n, k))


def generate_linalg(spec: AttributeTaskSpec, d: int, seed: int | None = None) -> LinalgTasks:
    """Per-attribute samples ``(mu_i + z_s) B_s + z_p B_i + noise``.

    ``z_s`` and ``z_p`` are centred per attribute, so each attribute mean lies
    in the planted shared span up to noise. The means ``mu_i`` are columns of a
    scaled matrix with orthonormal rows, so all shared singular values are
    equal and the shared rank is recoverable by the energy rule.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    shared, privates = planted_bases(spec, d, rng)
    n, s = spec.n_attributes, spec.shared_rank
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    mu = spec.shared_scale * np.sqrt(n / s) * q[:s, :]  # s x n, orthogonal rows
    vectors = {}
    N = spec.samples_per_attribute
    for i, attr in enumerate(spec.attributes()):
        zs = mu[:, i] + _centered(rng, N, s, 1.0)
        zp = _centered(rng, N, spec.private_ranks[i], spec.private_scale)
        noise = spec.noise_sigma * rng.standard_normal((N, d)) if spec.noise_sigma > 0 else 0.0
        vectors[attr] = zs @ shared + zp @ privates[attr] + noise
    return LinalgTasks(vectors, shared, privates)


def _split(items: list, frac: float, rng) -> tuple[list, list]:
    perm = rng.permutation(len(items))
    k = max(1, int(round(frac * len(items)))) if frac < 1 else len(items)
    return [items[i] for i in perm[:k]], [items[i] for i in perm[k:]]


def generate_model_tasks(spec: AttributeTaskSpec, model: FrozenModel, seed: int | None = None) -> ModelTasks:
    cfg = model.config
    if spec.seq_len > cfg.max_seq_len:
        raise ValueError(f"seq_len {spec.seq_len} exceeds the model's max_seq_len {cfg.max_seq_len}")
    if spec.n_labels + spec.n_attributes + 1 > cfg.vocab_size:
        raise ValueError("vocabulary too small for labels, attribute markers and content tokens")
    if not 0 <= spec.label_layer < cfg.n_layers:
        raise ValueError(f"label_layer {spec.label_layer} outside [0, {cfg.n_layers})")
    rng = np.random.default_rng((spec.seed if seed is None else seed) + 1)
    labels = tuple(range(spec.n_labels))
    markers = {a: cfg.vocab_size - 1 - i for i, a in enumerate(spec.attributes())}
    lo, hi = spec.n_labels, cfg.vocab_size - spec.n_attributes
    train, evals, probes, centers = {}, {}, {}, {}
    for attr in spec.attributes():
        seqs = [
            (markers[attr], *(int(t) for t in rng.integers(lo, hi, size=spec.seq_len - 1)))
            for _ in range(spec.samples_per_attribute)
        ]
        h = np.stack([forward_capture(model, s, spec.label_layer)[1].states[-1] for s in seqs])
        probe = rng.standard_normal((spec.n_labels, model.d)) / np.sqrt(model.d)
        center = h.mean(axis=0)
        gold = np.argmax((h - center) @ probe.T, axis=1)
        examples = [Example(attr, s, labels[int(g)]) for s, g in zip(seqs, gold)]
        train[attr], evals[attr] = _split(examples, spec.train_fraction, rng)
        probes[attr], centers[attr] = probe, center
    return ModelTasks(train, evals, probes, centers, labels, markers, spec.label_layer)


def generate_tasks(spec: AttributeTaskSpec, model: FrozenModel | None = None) -> TaskBundle:
    d = model.d if model is not None else None
    if d is None:
        raise ValueError("a model is required to fix the activation width")
    return TaskBundle(spec, generate_linalg(spec, d), generate_model_tasks(spec, model))


# ---------------------------------------------------------------------------
# Dataset directory: data.jsonl (one record per sample) + meta.json


def save_dataset(bundle: TaskBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data.jsonl", "w") as fh:
        mt = bundle.model
        if mt is not None:
            for split, groups in (("train", mt.train), ("eval", mt.eval)):
                for attr, exs in groups.items():
                    for ex in exs:
                        rec = {"path": "model", "split": split, "attribute": attr, "tokens": list(ex.tokens), "label": ex.label}
                        fh.write(json.dumps(rec) + "\n")
        for attr, vecs in bundle.linalg.vectors.items():
            for v in vecs:
                rec = {"path": "linalg", "attribute": attr, "tokens": [], "label": None, "vector": [float(x) for x in v]}
                fh.write(json.dumps(rec) + "\n")
    meta = {
        "spec": bundle.spec.to_dict(),
        "planted_shared": bundle.linalg.shared_basis.tolist(),
        "planted_private": {a: b.tolist() for a, b in bundle.linalg.private_bases.items()},
    }
    if bundle.model is not None:
        mt = bundle.model
        meta.update(
            {
                "probes": {a: p.tolist() for a, p in mt.probes.items()},
                "centers": {a: c.tolist() for a, c in mt.centers.items()},
                "label_tokens": list(mt.label_tokens),
                "marker_tokens": mt.marker_tokens,
                "label_layer": mt.layer,
            }
        )
    (out / "meta.json").write_text(json.dumps(meta, indent=1))


def load_dataset(data_dir: str | Path) -> TaskBundle:
    src = Path(data_dir)
    meta = json.loads((src / "meta.json").read_text())
    spec = AttributeTaskSpec.from_dict(meta["spec"])
    attrs = spec.attributes()
    train = {a: [] for a in attrs}
    evals = {a: [] for a in attrs}
    vecs = {a: [] for a in attrs}
    with open(src / "data.jsonl") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            a = rec["attribute"]
            if a not in train:
                raise ValueError(f"data.jsonl line {n}: unknown attribute {a!r}")
            if rec["path"] == "model":
                (train if rec["split"] == "train" else evals)[a].append(Example(a, tuple(rec["tokens"]), int(rec["label"])))
            else:
                vecs[a].append(rec["vector"])
    linalg = LinalgTasks(
        {a: np.array(v, dtype=np.float64) for a, v in vecs.items()},
        np.array(meta["planted_shared"]),
        {a: np.array(b) for a, b in meta["planted_private"].items()},
    )
    model = None
    if "probes" in meta:
        model = ModelTasks(
            train,
            evals,
            {a: np.array(p) for a, p in meta["probes"].items()},
            {a: np.array(c) for a, c in meta["centers"].items()},
            tuple(meta["label_tokens"]),
            meta["marker_tokens"],
            meta["label_layer"],
        )
    return TaskBundle(spec, linalg, model)
