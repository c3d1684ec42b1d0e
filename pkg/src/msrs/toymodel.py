"""A seeded, frozen, pre-norm decoder-only transformer.

The "hidden state at layer l" is the residual stream leaving block ``l``
(0-based), i.e. the input of block ``l + 1``. Capture and intervention both
act on that tensor.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensorcore import Tape, Var, concat, gather, gelu, layer_norm, softmax

_MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 32
    seed: int = 42

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HiddenCapture:
    layer: int
    states: np.ndarray  # (T, d)
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if self.states.shape[0] != len(self.token_ids):
            raise ValueError("one captured state per token is required")


class FrozenModel:
    """Read-only weights plus their config. Weights never receive gradients."""

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        self.config = config
        self.weights: dict[str, np.ndarray] = {}
        for k in sorted(weights):
            w = np.array(weights[k], dtype=np.float64)
            w.setflags(write=False)
            self.weights[k] = w
        missing = set(_weight_shapes(config)) - set(self.weights)
        if missing:
            raise ValueError(f"missing weights: {sorted(missing)}")
        for k, shape in _weight_shapes(config).items():
            if self.weights[k].shape != shape:
                raise ValueError(f"weight {k} has shape {self.weights[k].shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.config.d_model

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k]).astype("<f8").tobytes())
        return h.hexdigest()


def _weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq_len, d),
        "lnf_g": (1, d),
        "lnf_b": (1, d),
        "unembed": (d, v),
    }
    for i in range(cfg.n_layers):
        shapes.update(
            {
                f"b{i}.ln1_g": (1, d),
                f"b{i}.ln1_b": (1, d),
                f"b{i}.wq": (d, d),
                f"b{i}.wk": (d, d),
                f"b{i}.wv": (d, d),
                f"b{i}.wo": (d, d),
                f"b{i}.ln2_g": (1, d),
                f"b{i}.ln2_b": (1, d),
                f"b{i}.w_in": (d, 4 * d),
                f"b{i}.b_in": (1, 4 * d),
                f"b{i}.w_out": (4 * d, d),
                f"b{i}.b_out": (1, d),
            }
        )
    return shapes


def init_model(config: ModelConfig) -> FrozenModel:
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, shape in _weight_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf in ("ln1_g", "ln2_g", "lnf_g"):
            w = 1.0 + 0.1 * rng.standard_normal(shape)
        elif leaf in ("ln1_b", "ln2_b", "lnf_b", "b_in", "b_out"):
            w = 0.02 * rng.standard_normal(shape)
        elif leaf == "tok_emb":
            w = rng.standard_normal(shape)
        elif leaf == "pos_emb":
            w = 0.3 * rng.standard_normal(shape)
        else:
            w = rng.standard_normal(shape) / math.sqrt(shape[0])
        weights[name] = w
    return FrozenModel(config, weights)


# ---------------------------------------------------------------------------
# Taped forward pieces


def _wvars(tape: Tape, model: FrozenModel) -> dict[str, Var]:
    cache = getattr(tape, "_model_vars", None)
    if cache is None or cache[0] is not model:
        cache = (model, {k: tape.leaf(w) for k, w in model.weights.items()})
        tape._model_vars = cache
    return cache[1]


def _check_tokens(model: FrozenModel, tokens: Sequence[int]) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    cfg = model.config
    if not tokens:
        raise ValueError("token sequence must be non-empty")
    if len(tokens) > cfg.max_seq_len:
        raise ValueError(f"sequence length {len(tokens)} exceeds max_seq_len={cfg.max_seq_len}")
    bad = [t for t in tokens if not 0 <= t < cfg.vocab_size]
    if bad:
        raise ValueError(f"token ids out of range [0, {cfg.vocab_size}): {bad}")
    return tokens


def _check_layer(model: FrozenModel, layer: int) -> int:
    if not 0 <= int(layer) < model.config.n_layers:
        raise ValueError(f"layer {layer} outside [0, {model.config.n_layers})")
    return int(layer)


def embed(tape: Tape, model: FrozenModel, tokens: Sequence[int]) -> Var:
    w = _wvars(tape, model)
    return gather(w["tok_emb"], tokens) + w["pos_emb"][: len(tokens), :]


def block(tape: Tape, model: FrozenModel, i: int, x: Var) -> Var:
    w = _wvars(tape, model)
    p = f"b{i}."
    T = x.shape[0]
    H = model.config.n_heads
    dh = model.d // H
    a = layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])
    q, k, v = a @ w[p + "wq"], a @ w[p + "wk"], a @ w[p + "wv"]
    mask = tape.leaf(np.triu(np.full((T, T), _MASK_FILL), k=1))
    heads = []
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        att = softmax((qh @ kh.T) * (1.0 / math.sqrt(dh)) + mask)
        heads.append(att @ vh)
    x = x + concat(heads, axis=1) @ w[p + "wo"]
    m = layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
    return x + gelu(m @ w[p + "w_in"] + w[p + "b_in"]) @ w[p + "w_out"] + w[p + "b_out"]


def head(tape: Tape, model: FrozenModel, x: Var) -> Var:
    w = _wvars(tape, model)
    return layer_norm(x, w["lnf_g"], w["lnf_b"]) @ w["unembed"]


Phi = Callable[[Var], Var]


def replace_rows(x: Var, phis: Mapping[int, Phi]) -> Var:
    """Return ``x`` with row ``p`` replaced by ``phis[p](x[p])``."""
    if not phis:
        return x
    T = x.shape[0]
    parts = []
    start = 0
    for p in sorted(phis):
        if not 0 <= p < T:
            raise ValueError(f"placement {p} outside sequence of length {T}")
        if p > start:
            parts.append(x[start:p, :])
        row = phis[p](x[p : p + 1, :])
        if row.shape != (1, x.shape[1]):
            raise ValueError(f"intervention returned shape {row.shape}, expected (1, {x.shape[1]})")
        parts.append(row)
        start = p + 1
    if start < T:
        parts.append(x[start:T, :])
    return concat(parts, axis=0)


def _phi_map(placements, phi) -> dict[int, Phi]:
    placements = [int(p) for p in placements]
    if len(set(placements)) != len(placements):
        raise ValueError(f"duplicate intervention positions: {placements}")
    if isinstance(phi, Mapping):
        return {p: phi[p] for p in placements}
    return {p: phi for p in placements}


def run_from(tape: Tape, model: FrozenModel, hidden: Var, layer: int, phis: Mapping[int, Phi] | None = None) -> Var:
    """Apply interventions to the layer-``layer`` state, then run the rest of the model."""
    x = replace_rows(hidden, phis or {})
    for i in range(layer + 1, model.config.n_layers):
        x = block(tape, model, i, x)
    return head(tape, model, x)


def run(
    tape: Tape,
    model: FrozenModel,
    tokens: Sequence[int],
    layer: int,
    phis: Mapping[int, Phi] | None = None,
) -> tuple[Var, Var]:
    """Taped forward. Returns ``(logits, layer-l hidden states before intervention)``."""
    tokens = _check_tokens(model, tokens)
    layer = _check_layer(model, layer)
    x = embed(tape, model, tokens)
    for i in range(layer + 1):
        x = block(tape, model, i, x)
    return run_from(tape, model, x, layer, phis), x


def forward_capture(model: FrozenModel, tokens: Sequence[int], layer: int) -> tuple[np.ndarray, HiddenCapture]:
    tape = Tape()
    logits, hidden = run(tape, model, tokens, layer)
    return logits.value, HiddenCapture(int(layer), hidden.value, tuple(int(t) for t in tokens))


def forward_intervene(
    model: FrozenModel,
    tokens: Sequence[int],
    layer: int,
    placements: Sequence[int],
    phi: Phi | Mapping[int, Phi],
    tape: Tape | None = None,
):
    """Forward pass with ``h_p <- phi(h_p)`` at layer ``layer`` for each placed ``p``.

    ``phi`` takes and returns a ``(1, d)`` :class:`Var`; it may also be a
    mapping from position to callable. Without ``tape`` the logits come back
    as an array; with one, as a :class:`Var` so gradients can flow into
    ``phi``'s parameters.
    """
    own = tape is None
    tape = Tape() if own else tape
    logits, _ = run(tape, model, tokens, layer, _phi_map(placements, phi))
    return logits.value if own else logits


def capture_states(model: FrozenModel, token_seqs: Sequence[Sequence[int]], layer: int) -> list[np.ndarray]:
    return [forward_capture(model, toks, layer)[1].states for toks in token_seqs]
