"""Dense float64 kernels: a sign-normalized SVD and a small reverse-mode tape.

Every value on a :class:`Tape` is a 2-D ``float64`` array; scalars are ``(1, 1)``.
The op set is closed (see ``OPS``); anything else is composed from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SvdResult",
    "as_matrix",
    "svd",
    "Tape",
    "Var",
    "backward",
    "grad_check",
    "sigmoid",
    "gelu",
    "layer_norm",
    "softmax",
    "cross_entropy",
    "gather",
    "concat",
    "l2norm",
    "frob_inner",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, naming the first bad entry."""
    a = np.array(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise ValueError(f"{name}: expected 2-D data, got shape {a.shape}")
    bad = ~np.isfinite(a)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"{name}: non-finite entry {a[i, j]!r} at index ({i}, {j})")
    return a


# ---------------------------------------------------------------------------
# SVD


SIGN_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U diag(sigma) V^T`` with ``k = min(d, n)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def svd(m) -> SvdResult:
    """Thin SVD with a fixed sign convention.

    The largest-magnitude entry of every column of ``U`` is made non-negative
    (ties go to the earliest row); the matching column of ``V`` flips with it.
    Magnitudes within ``SIGN_TIE_RTOL`` of the column maximum count as tied,
    so rounding noise in the LAPACK backend cannot flip the choice.
    """
    a = as_matrix(m, "svd input")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"svd input must be non-empty, got shape {a.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T.copy()
    k = s.shape[0]
    mag = np.abs(u)
    pivot = np.argmax(mag >= mag.max(axis=0) * (1.0 - SIGN_TIE_RTOL), axis=0)
    signs = np.where(u[pivot, np.arange(k)] < 0.0, -1.0, 1.0)
    u *= signs
    v *= signs
    return SvdResult(U=u, sigma=s, V=v)


# ---------------------------------------------------------------------------
# Op table. Each entry is (forward(values, attrs), vjp(g, values, out, attrs)).


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


_GELU_K = math.sqrt(2.0 / math.pi)


def _gelu_fwd(v, attrs):
    (x,) = v
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x**3)))


def _gelu_vjp(g, v, out, attrs):
    (x,) = v
    inner = _GELU_K * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_K * (1.0 + 3.0 * 0.044715 * x**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


def _ln_parts(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _ln_fwd(v, attrs):
    x, gamma, beta = v
    xhat, _ = _ln_parts(x, attrs["eps"])
    return xhat * gamma + beta


def _ln_vjp(g, v, out, attrs):
    x, gamma, beta = v
    xhat, inv = _ln_parts(x, attrs["eps"])
    n = x.shape[-1]
    gx = g * gamma
    dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
    return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)


def _softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(g, v, out, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _ce_fwd(v, attrs):
    (x,) = v
    labels = np.asarray(attrs["labels"], dtype=np.intp)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(x.shape[0]), labels]
    return np.array([[nll.mean()]])


def _ce_vjp(g, v, out, attrs):
    (x,) = v
    labels = np.asarray(attrs["labels"], dtype=np.intp)
    p = _softmax_rows(x)
    p[np.arange(x.shape[0]), labels] -= 1.0
    return (g[0, 0] * p / x.shape[0],)


def _index_vjp(g, v, out, attrs):
    (x,) = v
    dx = np.zeros_like(x)
    dx[attrs["key"]] += g
    return (dx,)


def _gather_vjp(g, v, out, attrs):
    (table,) = v
    dt = np.zeros_like(table)
    np.add.at(dt, np.asarray(attrs["ids"], dtype=np.intp), g)
    return (dt,)


def _concat_vjp(g, v, out, attrs):
    axis = attrs["axis"]
    cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _l2_fwd(v, attrs):
    (x,) = v
    return np.array([[math.sqrt(float((x * x).sum()))]])


def _l2_vjp(g, v, out, attrs):
    (x,) = v
    n = out[0, 0]
    if n == 0.0:
        return (np.zeros_like(x),)
    return (g[0, 0] * x / n,)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _div_vjp(g, v, out, attrs):
    a, b = v
    s = b[0, 0]
    return g / s, np.array([[-(g * a).sum() / (s * s)]])


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (lambda v, a: v[0] @ v[1], lambda g, v, o, a: (g @ v[1].T, v[0].T @ g)),
    "add": (
        lambda v, a: v[0] + v[1],
        lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    ),
    "mul": (
        lambda v, a: v[0] * v[1],
        lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
    ),
    "scale": (lambda v, a: a["c"] * v[0], lambda g, v, o, a: (a["c"] * g,)),
    "div": (lambda v, a: v[0] / v[1][0, 0], _div_vjp),
    "transpose": (lambda v, a: v[0].T.copy(), lambda g, v, o, a: (g.T,)),
    "index": (lambda v, a: v[0][a["key"]].copy(), _index_vjp),
    "sigmoid": (lambda v, a: _sigmoid(v[0]), lambda g, v, o, a: (g * o * (1.0 - o),)),
    "gelu": (_gelu_fwd, _gelu_vjp),
    "layer_norm": (_ln_fwd, _ln_vjp),
    "softmax": (lambda v, a: _softmax_rows(v[0]), _softmax_vjp),
    "cross_entropy": (_ce_fwd, _ce_vjp),
    "gather": (lambda v, a: v[0][np.asarray(a["ids"], dtype=np.intp)], _gather_vjp),
    "concat": (lambda v, a: np.concatenate(v, axis=a["axis"]), _concat_vjp),
    "l2norm": (_l2_fwd, _l2_vjp),
    "frob_inner": (
        lambda v, a: np.array([[float((v[0] * v[1]).sum())]]),
        lambda g, v, o, a: (g[0, 0] * v[1], g[0, 0] * v[0]),
    ),
}


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("op", "inputs", "attrs", "value")

    def __init__(self, op, inputs, attrs, value):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value


class Tape:
    """Forward recording of ops over float64 matrices.

    Leaves hold data; every other node records its op, input ids and output.
    ``trainable`` names the leaf ids whose gradients :func:`backward` reports.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.trainable: set[int] = set()
        self.names: dict[int, str] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> "Var":
        v = as_matrix(value, name or "leaf")
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, v))
        if trainable:
            self.trainable.add(nid)
        if name is not None:
            self.names[nid] = name
        return Var(self, nid)

    def record(self, op: str, inputs: Sequence["Var"], **attrs) -> "Var":
        fwd, _ = OPS[op]
        ids = []
        for x in inputs:
            if x.tape is not self:
                raise ValueError("cannot mix variables from different tapes")
            ids.append(x.id)
        value = fwd([self.nodes[i].value for i in ids], attrs)
        self.nodes.append(_Node(op, tuple(ids), attrs, value))
        return Var(self, len(self.nodes) - 1)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def replay(self, overrides: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from leaf values, optionally overriding leaves.

        The tape itself is left untouched.
        """
        overrides = overrides or {}
        vals: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                vals.append(np.asarray(overrides.get(nid, node.value), dtype=np.float64))
            else:
                vals.append(OPS[node.op][0]([vals[i] for i in node.inputs], node.attrs))
        return vals

    def _consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for nid, node in enumerate(self.nodes):
            for i in node.inputs:
                out[i].append(nid)
        return out

    def _downstream(self, start: int, consumers: list[list[int]]) -> list[int]:
        seen = {start}
        stack = [start]
        while stack:
            for c in consumers[stack.pop()]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        seen.discard(start)
        return sorted(seen)

    def _eval_with(self, leaf: int, value: np.ndarray, order: list[int], target: int) -> float:
        vals = {leaf: value}
        for nid in order:
            node = self.nodes[nid]
            ins = [vals[i] if i in vals else self.nodes[i].value for i in node.inputs]
            vals[nid] = OPS[node.op][0](ins, node.attrs)
        return float(vals[target][0, 0]) if target in vals else float(self.nodes[target].value[0, 0])


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.id = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.leaf(other)

    def __add__(self, other):
        other = self._lift(other)
        _check_broadcast(self.value, other.value, "add")
        return self.tape.record("add", (self, other))

    __radd__ = __add__

    def __neg__(self):
        return self.tape.record("scale", (self,), c=-1.0)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return self.tape.record("scale", (self,), c=float(other))
        other = self._lift(other)
        _check_broadcast(self.value, other.value, "mul")
        return self.tape.record("mul", (self, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return self.tape.record("scale", (self,), c=1.0 / float(other))
        other = self._lift(other)
        if other.shape != (1, 1):
            raise ValueError("division is only defined by a scalar")
        return self.tape.record("div", (self, other))

    def __matmul__(self, other):
        other = self._lift(other)
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul: shapes {self.shape} and {other.shape} do not align")
        return self.tape.record("matmul", (self, other))

    @property
    def T(self) -> "Var":
        return self.tape.record("transpose", (self,))

    def __getitem__(self, key) -> "Var":
        # Integer indices become length-1 slices so every value stays 2-D.
        if not isinstance(key, tuple):
            key = (key, slice(None))
        norm = []
        for k, n in zip(key, self.shape):
            if isinstance(k, (int, np.integer)):
                k = int(k) % n
                k = slice(k, k + 1)
            norm.append(k)
        return self.tape.record("index", (self,), key=tuple(norm))


def sigmoid(x: Var) -> Var:
    return x.tape.record("sigmoid", (x,))


def gelu(x: Var) -> Var:
    """Tanh-approximated GELU."""
    return x.tape.record("gelu", (x,))


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    return x.tape.record("layer_norm", (x, gamma, beta), eps=eps)


def softmax(x: Var) -> Var:
    return x.tape.record("softmax", (x,))


def cross_entropy(logits: Var, labels: Iterable[int]) -> Var:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    labels = tuple(int(y) for y in labels)
    if len(labels) != logits.shape[0]:
        raise ValueError(f"got {len(labels)} labels for {logits.shape[0]} rows")
    if any(y < 0 or y >= logits.shape[1] for y in labels):
        raise ValueError(f"label out of range for {logits.shape[1]} classes: {labels}")
    return logits.tape.record("cross_entropy", (logits,), labels=labels)


def gather(table: Var, ids: Iterable[int]) -> Var:
    ids = tuple(int(i) for i in ids)
    return table.tape.record("gather", (table,), ids=ids)


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    if len(xs) == 1:
        return xs[0]
    return xs[0].tape.record("concat", tuple(xs), axis=axis)


def l2norm(x: Var) -> Var:
    """Euclidean (Frobenius, for matrices) norm as a (1, 1) scalar."""
    return x.tape.record("l2norm", (x,))


def frob_inner(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"frob_inner: shapes {a.shape} and {b.shape} differ")
    return a.tape.record("frob_inner", (a, b))


# ---------------------------------------------------------------------------
# Reverse pass and finite-difference check


def _loss_id(tape: Tape, loss) -> int:
    nid = loss.id if isinstance(loss, Var) else int(loss)
    if tape.nodes[nid].value.size != 1:
        raise ValueError(f"loss must be scalar, node {nid} has shape {tape.nodes[nid].value.shape}")
    return nid


def backward(tape: Tape, loss) -> dict[int, np.ndarray]:
    """Gradients of a scalar node with respect to every trainable leaf.

    Trainable leaves the loss does not depend on get an exact zero gradient.
    """
    lid = _loss_id(tape, loss)
    # Only nodes that depend on a trainable leaf need an adjoint.
    needs = [False] * (lid + 1)
    for nid in range(lid + 1):
        node = tape.nodes[nid]
        needs[nid] = nid in tape.trainable or any(needs[i] for i in node.inputs)
    grads: dict[int, np.ndarray] = {lid: np.ones((1, 1))}
    for nid in range(lid, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.op == "leaf":
            continue
        del grads[nid]
        if not needs[nid]:
            continue
        ins = [tape.nodes[i].value for i in node.inputs]
        parts = OPS[node.op][1](g, ins, node.value, node.attrs)
        for i, gi in zip(node.inputs, parts):
            if not needs[i]:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return {
        pid: np.array(grads[pid], dtype=np.float64) if pid in grads else np.zeros_like(tape.nodes[pid].value)
        for pid in sorted(tape.trainable)
    }


def grad_check(
    tape: Tape,
    loss,
    epsilon: float = 1e-4,
    grads: Mapping[int, np.ndarray] | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Each trainable entry ``p`` is compared against
    ``(f(p + eps) - f(p - eps)) / (2 eps)``; the relative error uses
    ``max(|analytic|, |numeric|, 1e-12)`` as denominator. Pass ``grads`` to
    check a supplied gradient map instead of :func:`backward`'s.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    lid = _loss_id(tape, loss)
    if grads is None:
        grads = backward(tape, lid)
    n_nodes = len(tape.nodes)
    consumers = tape._consumers()
    worst = 0.0
    for pid in sorted(tape.trainable):
        base = tape.nodes[pid].value
        order = tape._downstream(pid, consumers)
        if lid not in order:
            order = []
        analytic = np.asarray(grads[pid])
        for idx in np.ndindex(base.shape):
            p = base.copy()
            p[idx] = base[idx] + epsilon
            fp = tape._eval_with(pid, p, order, lid)
            p[idx] = base[idx] - epsilon
            fm = tape._eval_with(pid, p, order, lid)
            if len(tape.nodes) != n_nodes or tape.nodes[pid].value is not base:
                raise RuntimeError("tape was mutated during gradient check")
            numeric = (fp - fm) / (2.0 * epsilon)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
