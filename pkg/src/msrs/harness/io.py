"""Binary container for bases, aligned subspaces, checkpoints and model weights.

Layout (little-endian)::

    b"MSRS"            magic
    u32                format version
    u8                 object kind
    u32                metadata length, then that many bytes of UTF-8 JSON
    u32                tensor count
    per tensor: u32 ndim, then ndim x u32 dims
    f64 payload        every tensor, row-major, in header order
    u64                checksum (8-byte BLAKE2b of all preceding bytes)

Loading re-validates every invariant of the stored object.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..steering import PARAM_NAMES, SteeringModule
from ..subspace import AlignedSubspace, Block, SubspaceBasis, orthonormality_error, ORTHO_TOL
from ..toymodel import FrozenModel, ModelConfig

MAGIC = b"MSRS"
VERSION = 1
KINDS = {"basis": 1, "aligned": 2, "checkpoint": 3, "model": 4}
_KIND_NAMES = {v: k for k, v in KINDS.items()}


class ArtifactError(ValueError):
    """A container failed to load; ``check`` names the failed validation."""

    def __init__(self, check: str, message: str):
        super().__init__(f"{check} check failed: {message}")
        self.check = check


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(kind: str, meta: dict, tensors: list[np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IB", VERSION, KINDS[kind])]
    mbytes = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(mbytes)) + mbytes)
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
    for t in tensors:
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArtifactError("truncation", f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[str, dict, list[np.ndarray]]:
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise ArtifactError("magic", "file does not start with b'MSRS'")
    version, kind = rd.unpack("<IB")
    if version != VERSION:
        raise ArtifactError("version", f"unsupported format version {version}")
    if kind not in _KIND_NAMES:
        raise ArtifactError("kind", f"unknown object kind tag {kind}")
    (mlen,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError("metadata", str(e)) from None
    (count,) = rd.unpack("<I")
    shapes = []
    for _ in range(count):
        (ndim,) = rd.unpack("<I")
        shapes.append(rd.unpack(f"<{ndim}I"))
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        tensors.append(np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    body_end = rd.pos
    stored = rd.take(8)
    if rd.pos != len(data):
        raise ArtifactError("truncation", f"{len(data) - rd.pos} trailing bytes after checksum")
    if _digest(data[:body_end]) != stored:
        raise ArtifactError("checksum", "payload checksum mismatch")
    for t in tensors:
        if not np.all(np.isfinite(t)):
            raise ArtifactError("finite", "payload contains non-finite values")
    return _KIND_NAMES[kind], meta, tensors


# ---------------------------------------------------------------------------
# Object <-> container


def _layout_meta(layout) -> list:
    return [[b.kind, b.attribute, b.offset, b.length] for b in layout]


def _layout_from(meta) -> tuple[Block, ...]:
    return tuple(Block(k, a, int(o), int(n)) for k, a, o, n in meta)


def _validated(check: str, fn, *args):
    try:
        return fn(*args)
    except ArtifactError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        msg = str(e)
        for name in ("orthonormality", "layout"):
            if name in msg:
                check = name
        raise ArtifactError(check, msg) from None


def _check_aligned(a: AlignedSubspace) -> AlignedSubspace:
    for blk in a.layout:
        rows = a.matrix[blk.rows]
        err = orthonormality_error(rows)
        if err > ORTHO_TOL:
            raise ArtifactError("orthonormality", f"block {blk.kind}:{blk.attribute} rows deviate by {err:.3g}")
    shared = a.rows(None)
    for blk in a.layout[1:]:
        cross = np.abs(shared @ a.matrix[blk.rows].T).max(initial=0.0)
        if cross > ORTHO_TOL:
            raise ArtifactError("orthonormality", f"private block {blk.attribute!r} not orthogonal to shared ({cross:.3g})")
    return a


def to_container(obj) -> tuple[str, dict, list[np.ndarray]]:
    if isinstance(obj, SubspaceBasis):
        meta = {"kind": obj.kind, "attribute": obj.attribute, "energy_captured": obj.energy_captured}
        tensors = [obj.basis]
        if obj.spectrum is not None:
            tensors.append(np.asarray(obj.spectrum, dtype=np.float64))
        return "basis", meta, tensors
    if isinstance(obj, AlignedSubspace):
        return "aligned", {"layout": _layout_meta(obj.layout)}, [obj.matrix]
    if isinstance(obj, SteeringModule):
        meta = {
            "granularity": obj.granularity,
            "lambda1": obj.lambda1,
            "lambda2": obj.lambda2,
            "layer": obj.layer,
            "frozen": list(obj.frozen),
            "layout": _layout_meta(obj.aligned.layout),
            "params": list(PARAM_NAMES),
        }
        return "checkpoint", meta, [obj.aligned.matrix] + [obj.params[k] for k in PARAM_NAMES]
    if isinstance(obj, FrozenModel):
        names = sorted(obj.weights)
        meta = {"config": obj.config.to_dict(), "names": names, "checksum": obj.checksum()}
        return "model", meta, [obj.weights[k] for k in names]
    raise TypeError(f"cannot store objects of type {type(obj).__name__}")


def from_container(kind: str, meta: dict, tensors: list[np.ndarray]):
    if kind == "basis":
        spectrum = tensors[1] if len(tensors) > 1 else None
        return _validated(
            "basis", SubspaceBasis, meta["kind"], tensors[0], meta["energy_captured"], meta["attribute"], spectrum
        )
    if kind == "aligned":
        a = _validated("layout", AlignedSubspace, tensors[0], _layout_from(meta["layout"]))
        return _check_aligned(a)
    if kind == "checkpoint":
        aligned = _check_aligned(_validated("layout", AlignedSubspace, tensors[0], _layout_from(meta["layout"])))
        params = dict(zip(meta["params"], tensors[1:]))
        return _validated(
            "checkpoint",
            SteeringModule,
            params,
            aligned,
            meta["granularity"],
            meta["lambda1"],
            meta["lambda2"],
            meta["layer"],
            tuple(meta["frozen"]),
        )
    if kind == "model":
        cfg = _validated("config", lambda c: ModelConfig(**c), meta["config"])
        model = _validated("model", FrozenModel, cfg, dict(zip(meta["names"], tensors)))
        if model.checksum() != meta["checksum"]:
            raise ArtifactError("checksum", "model weight checksum mismatch")
        return model
    raise ArtifactError("kind", f"unknown kind {kind!r}")


def dumps(obj) -> bytes:
    return encode(*to_container(obj))


def loads(data: bytes):
    return from_container(*decode(data))


def save_artifact(path: str | Path, obj) -> None:
    Path(path).write_bytes(dumps(obj))


def load_artifact(path: str | Path, expect: str | None = None):
    obj = loads(Path(path).read_bytes())
    if expect is not None:
        want = {"basis": SubspaceBasis, "aligned": AlignedSubspace, "checkpoint": SteeringModule, "model": FrozenModel}
        if not isinstance(obj, want[expect]):
            raise ArtifactError("kind", f"{path} holds a {type(obj).__name__}, expected {expect}")
    return obj
