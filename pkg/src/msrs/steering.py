"""Gated low-rank intervention, its losses, and the trainer.

The edit is ``h + R^T diag(m(h)) (W h + b - R h)`` where ``m`` is a small
sigmoid-output network. Granularity picks how ``m`` gates the ``r`` rows:

* ``same``: no gating, ``m = 1``;
* ``attribute``: one gate per layout block, repeated over the block's rows;
* ``rank``: one gate per row.

Hidden vectors are rows (``1 x d``) throughout, so ``W h`` is ``h @ W.T``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .placement import attribute_rows, select_position
from .subspace import AlignedSubspace, Block
from .tensorcore import Tape, Var, backward, cross_entropy, frob_inner, gelu, l2norm, sigmoid
from .toymodel import FrozenModel, forward_capture, run_from

GRANULARITIES = ("same", "attribute", "rank")
PARAM_NAMES = ("R", "W", "b", "mask_w1", "mask_b1", "mask_w2", "mask_b2")


@dataclass
class SteeringModule:
    params: dict[str, np.ndarray]
    aligned: AlignedSubspace
    granularity: str = "attribute"
    lambda1: float = 0.3
    lambda2: float = 0.5
    layer: int = 1
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        self.params = {k: np.array(self.params[k], dtype=np.float64) for k in PARAM_NAMES}
        r, d, k = self.r, self.d, self.n_gates
        want = {
            "R": (r, d),
            "W": (r, d),
            "b": (1, r),
            "mask_w1": (d, r),
            "mask_b1": (1, r),
            "mask_w2": (r, k),
            "mask_b2": (1, k),
        }
        for name, shape in want.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        unknown = set(self.frozen) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown frozen parameters: {sorted(unknown)}")

    @property
    def r(self) -> int:
        return self.aligned.r

    @property
    def d(self) -> int:
        return self.aligned.d

    @property
    def n_gates(self) -> int:
        if self.granularity == "attribute":
            return len(self.aligned.layout)
        if self.granularity == "rank":
            return self.r
        return 1

    def expansion(self) -> np.ndarray:
        """``n_blocks x r`` 0/1 matrix that repeats each block gate over its rows."""
        e = np.zeros((len(self.aligned.layout), self.r))
        for j, blk in enumerate(self.aligned.layout):
            e[j, blk.rows] = 1.0
        return e

    def copy(self) -> "SteeringModule":
        return copy.deepcopy(self)


def init_steering(
    aligned: AlignedSubspace,
    granularity: str = "attribute",
    seed: int = 42,
    lambda1: float = 0.3,
    lambda2: float = 0.5,
    layer: int = 1,
    r_init: str = "svd",
    perturbation: float = 1e-2,
    freeze_r: bool = False,
) -> SteeringModule:
    """Start near the identity edit: ``W = R``, ``b = 0``, all gates at 0.5.

    ``r_init="svd"`` sets ``R`` to the aligned basis plus a small seeded
    perturbation; ``"random"`` draws random orthonormal rows; ``"fixed"``
    uses the aligned basis exactly.
    """
    rng = np.random.default_rng(seed)
    r, d = aligned.r, aligned.d
    if r_init == "svd":
        R = aligned.matrix + perturbation * rng.standard_normal((r, d))
    elif r_init == "random":
        q, _ = np.linalg.qr(rng.standard_normal((d, r)))
        R = q.T.copy()
    elif r_init == "fixed":
        R = aligned.matrix.copy()
    else:
        raise ValueError(f"r_init must be 'svd', 'random' or 'fixed', got {r_init!r}")
    n_gates = {"attribute": len(aligned.layout), "rank": r}.get(granularity, 1)
    params = {
        "R": R,
        "W": R.copy(),
        "b": np.zeros((1, r)),
        "mask_w1": rng.standard_normal((d, r)) / math.sqrt(d),
        "mask_b1": np.zeros((1, r)),
        "mask_w2": np.zeros((r, n_gates)),
        "mask_b2": np.zeros((1, n_gates)),
    }
    return SteeringModule(
        params, aligned, granularity, lambda1, lambda2, layer, frozen=("R",) if freeze_r else ()
    )


# ---------------------------------------------------------------------------
# Taped pieces


def param_vars(tape: Tape, module: SteeringModule) -> dict[str, Var]:
    return {k: tape.leaf(module.params[k], trainable=k not in module.frozen, name=k) for k in PARAM_NAMES}


def gate_var(module: SteeringModule, pv: Mapping[str, Var], h: Var) -> Var | None:
    """Per-row gate ``m(h)`` as a ``1 x r`` Var, or ``None`` when ungated."""
    if module.granularity == "same":
        return None
    hidden = gelu(h @ pv["mask_w1"] + pv["mask_b1"])
    g = sigmoid(hidden @ pv["mask_w2"] + pv["mask_b2"])
    if module.granularity == "attribute":
        g = g @ h.tape.leaf(module.expansion())
    return g


def phi_var(pv: Mapping[str, Var], h: Var, gate: Var | None) -> Var:
    R = pv["R"]
    delta = h @ pv["W"].T + pv["b"] - h @ R.T
    if gate is not None:
        delta = gate * delta
    return h + delta @ R


def _one_row(h, d: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(1, -1)
    if h.shape[1] != d:
        raise ValueError(f"hidden vector has width {h.shape[1]}, expected {d}")
    return h


def mask_weights(module: SteeringModule, h) -> np.ndarray:
    h = _one_row(h, module.d)
    if module.granularity == "same":
        return np.ones(module.r)
    tape = Tape()
    return gate_var(module, param_vars(tape, module), tape.leaf(h)).value.ravel()


def intervene(module: SteeringModule, h) -> np.ndarray:
    tape = Tape()
    hv = tape.leaf(_one_row(h, module.d))
    pv = param_vars(tape, module)
    out = phi_var(pv, hv, gate_var(module, pv, hv)).value.ravel()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"intervention produced non-finite output: {out}")
    return out


def edit(h, R, W, b, m) -> np.ndarray:
    """Plain-array form of the gated edit for a single vector ``h``."""
    h = np.asarray(h, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    return h + R.T @ (np.asarray(m) * (np.asarray(W) @ h + np.ravel(b) - R @ h))


# ---------------------------------------------------------------------------
# Prior mask and losses


@dataclass(frozen=True)
class PriorMask:
    values: np.ndarray
    active_attribute: Hashable


def build_prior_mask(layout: Sequence[Block] | AlignedSubspace, attribute) -> PriorMask:
    """Ones on the shared block and on ``attribute``'s block, zeros elsewhere."""
    if isinstance(layout, AlignedSubspace):
        layout = layout.layout
    r = sum(b.length for b in layout)
    if not any(b.kind == "private" and b.attribute == attribute for b in layout):
        raise KeyError(f"unknown attribute {attribute!r}")
    m = np.zeros(r)
    for b in layout:
        if b.kind == "shared" or b.attribute == attribute:
            m[b.rows] = 1.0
    return PriorMask(m, attribute)


def loss_reg(m, prior) -> float:
    m = np.ravel(np.asarray(m, dtype=np.float64))
    p = np.ravel(np.asarray(getattr(prior, "values", prior), dtype=np.float64))
    if m.shape != p.shape:
        raise ValueError(f"mask length {m.size} does not match prior length {p.size}")
    diff = m - p
    return float(diff @ diff)


def loss_align(R, S) -> float:
    R = np.asarray(R, dtype=np.float64)
    S = np.asarray(getattr(S, "matrix", S), dtype=np.float64)
    if R.shape != S.shape:
        raise ValueError(f"R has shape {R.shape}, S_align has shape {S.shape}")
    nr, ns = np.linalg.norm(R), np.linalg.norm(S)
    if nr == 0.0 or ns == 0.0:
        raise ValueError("alignment cosine is undefined for a zero matrix")
    return float(1.0 - (R * S).sum() / (nr * ns))


def task_loss(logits, gold: int) -> float:
    z = np.ravel(np.asarray(logits, dtype=np.float64))
    if not 0 <= gold < z.size:
        raise ValueError(f"gold label {gold} outside vocabulary of size {z.size}")
    zmax = z.max()
    return float(zmax + np.log(np.exp(z - zmax).sum()) - z[gold])


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    reg: float
    align: float
    total: float

    @classmethod
    def combine(cls, task: float, reg: float, align: float, lambda1: float, lambda2: float) -> "LossBreakdown":
        return cls(task, reg, align, task + lambda1 * reg + lambda2 * align)


# ---------------------------------------------------------------------------
# Objective


@dataclass(frozen=True)
class Example:
    attribute: Hashable
    tokens: tuple[int, ...]
    label: int


@dataclass(frozen=True)
class Item:
    """One supervised sample with its frozen layer-l states precomputed."""

    states: np.ndarray
    position: int
    label: int
    prior: np.ndarray


def align_var(pv: Mapping[str, Var], S: np.ndarray) -> Var:
    R = pv["R"]
    s = R.tape.leaf(S)
    return 1.0 - frob_inner(R, s) / (l2norm(R) * l2norm(s))


def sample_terms(tape: Tape, model: FrozenModel, module: SteeringModule, pv, item: Item) -> tuple[Var, Var]:
    """Task and mask-regularisation terms for a single item."""
    gates = []

    def phi(h: Var) -> Var:
        g = gate_var(module, pv, h)
        gates.append(g)
        return phi_var(pv, h, g)

    logits = run_from(tape, model, tape.leaf(item.states), module.layer, {item.position: phi})
    task = cross_entropy(logits[-1], [item.label])
    prior = tape.leaf(item.prior.reshape(1, -1))
    m = gates[0] if gates[0] is not None else tape.leaf(np.ones((1, module.r)))
    diff = m - prior
    return task, frob_inner(diff, diff)


def objective(tape: Tape, model: FrozenModel, module: SteeringModule, pv, batch: Sequence[Item]) -> dict[str, Var]:
    """Batch-mean task and reg terms, the alignment term, and their weighted total."""
    tasks, regs = zip(*(sample_terms(tape, model, module, pv, it) for it in batch))
    n = len(batch)
    task = _mean(tasks, n)
    reg = _mean(regs, n)
    align = align_var(pv, module.aligned.matrix)
    total = task + reg * module.lambda1 + align * module.lambda2
    return {"task": task, "reg": reg, "align": align, "total": total}


def _mean(xs: Sequence[Var], n: int) -> Var:
    acc = xs[0]
    for x in xs[1:]:
        acc = acc + x
    return acc * (1.0 / n)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 5e-3
    batch_size: int = 2
    seed: int = 42
    train_position: str = "last"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: SteeringModule, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.last_good = last_good


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    module: SteeringModule
    log: list[dict]

    def log_lines(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.log)


class StateCache:
    """Layer-l states of the frozen model, computed once per token sequence."""

    def __init__(self, model: FrozenModel, layer: int):
        self.model = model
        self.layer = layer
        self._states: dict[tuple, np.ndarray] = {}

    def __call__(self, tokens) -> np.ndarray:
        key = tuple(tokens)
        if key not in self._states:
            self._states[key] = forward_capture(self.model, key, self.layer)[1].states
        return self._states[key]


def choose_position(module: SteeringModule, states: np.ndarray, attribute, strategy: str) -> int:
    block = attribute_rows(module.params["R"], module.aligned, attribute)
    return select_position(block, states, strategy, attribute).position


def _batches(datasets: Mapping[Hashable, Sequence[Example]], order: list, cfg: TrainConfig):
    """Round-robin over attributes; each attribute walks its own seeded shuffles."""
    rng = np.random.default_rng(cfg.seed)
    perms = {a: list(rng.permutation(len(datasets[a]))) for a in order}
    cursor = {a: 0 for a in order}
    k = 0
    while True:
        batch = []
        for _ in range(cfg.batch_size):
            a = order[k % len(order)]
            k += 1
            if cursor[a] == len(perms[a]):
                perms[a] = list(rng.permutation(len(datasets[a])))
                cursor[a] = 0
            batch.append(datasets[a][perms[a][cursor[a]]])
            cursor[a] += 1
        yield batch


def train(
    module: SteeringModule,
    model: FrozenModel,
    datasets: Mapping[Hashable, Sequence[Example]],
    config: TrainConfig = TrainConfig(),
    cache: StateCache | None = None,
) -> TrainResult:
    """Optimise the steering parameters with Adam; the base model stays frozen.

    Each step logs the pre-update loss breakdown. On a non-finite loss or
    gradient, :class:`TrainingDiverged` is raised carrying the last good module.
    """
    order = [a for a in module.aligned.attribute_order if a in datasets]
    if not order:
        raise ValueError("no training data for any attribute in the layout")
    for a in order:
        if not datasets[a]:
            raise ValueError(f"attribute {a!r} has no training examples")
    if config.train_position not in ("last", "important"):
        raise ValueError(f"train_position must be 'last' or 'important', got {config.train_position!r}")
    module = module.copy()
    cache = cache or StateCache(model, module.layer)
    priors = {a: build_prior_mask(module.aligned, a).values for a in order}
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    log = []
    batches = _batches(datasets, order, config)
    for step in range(config.steps):
        batch = next(batches)
        items = []
        for ex in batch:
            states = cache(ex.tokens)
            pos = choose_position(module, states, ex.attribute, config.train_position)
            items.append(Item(states, pos, ex.label, priors[ex.attribute]))
        tape = Tape()
        pv = param_vars(tape, module)
        terms = objective(tape, model, module, pv, items)
        rec = {"step": step, **{k: float(v.value[0, 0]) for k, v in terms.items()}}
        if not all(math.isfinite(x) for x in rec.values()):
            raise TrainingDiverged(step, module, json.dumps(rec))
        grads = backward(tape, terms["total"])
        named = {tape.names[i]: g for i, g in grads.items()}
        bad = [k for k, g in named.items() if not np.all(np.isfinite(g))]
        if bad:
            raise TrainingDiverged(step, module, f"non-finite gradient for {bad}")
        log.append(rec)
        new_params = dict(module.params)
        opt.step(new_params, named)
        bad = [k for k in named if not np.all(np.isfinite(new_params[k]))]
        if bad:
            raise TrainingDiverged(step, module, f"update made {bad} non-finite")
        module = SteeringModule(
            new_params, module.aligned, module.granularity, module.lambda1, module.lambda2, module.layer, module.frozen
        )
    return TrainResult(module, log)
