"""Shared and attribute-specific steering subspaces from hidden activations.

Bases store directions as rows (``rank x d``). Shared directions come from the
left singular vectors of the matrix of per-attribute mean activations; each
private basis comes from the left singular vectors of that attribute's
activations with the shared projection removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .tensorcore import as_matrix, svd
from .toymodel import FrozenModel, forward_capture

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class ActivationBank:
    """Per-attribute layer-``layer`` vectors (rows) and their means."""

    samples: Mapping[Hashable, np.ndarray]
    layer: int
    means: Mapping[Hashable, np.ndarray] = field(default=None)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("activation bank needs at least one attribute")
        clean = {}
        d = None
        for attr, vecs in self.samples.items():
            a = as_matrix(vecs, f"activations[{attr!r}]")
            if a.shape[0] < 1:
                raise ValueError(f"attribute {attr!r} has no samples")
            if d is None:
                d = a.shape[1]
            elif a.shape[1] != d:
                raise ValueError(f"attribute {attr!r} has width {a.shape[1]}, expected {d}")
            clean[attr] = a
        object.__setattr__(self, "samples", clean)
        object.__setattr__(self, "means", {k: v.mean(axis=0) for k, v in clean.items()})

    @property
    def d(self) -> int:
        return next(iter(self.samples.values())).shape[1]

    @property
    def attributes(self) -> list:
        return list(self.samples)

    def mean_matrix(self) -> np.ndarray:
        """Concatenated means as columns, ``d x n``."""
        return np.stack([self.means[a] for a in self.attributes], axis=1)


@dataclass(frozen=True)
class SubspaceBasis:
    kind: str  # "shared" or "private"
    basis: np.ndarray  # rank x d
    energy_captured: float
    attribute: Hashable | None = None
    spectrum: np.ndarray | None = None  # energy values the rank was chosen from

    def __post_init__(self):
        if self.kind not in ("shared", "private"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim != 2:
            raise ValueError("basis must be 2-D")
        object.__setattr__(self, "basis", b)
        if b.shape[0]:
            err = orthonormality_error(b)
            if err > ORTHO_TOL:
                raise ValueError(f"orthonormality check failed: basis rows deviate by {err:.3g}")
        elif self.kind == "shared":
            raise ValueError("shared basis must have rank >= 1")

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.rank == 0

    def truncated(self, k: int) -> "SubspaceBasis":
        k = min(k, self.rank)
        energy = self.energy_captured
        if self.spectrum is not None and k:
            energy = _captured(self.spectrum, k)
        return SubspaceBasis(self.kind, self.basis[:k], energy, self.attribute, self.spectrum)


@dataclass(frozen=True)
class Block:
    kind: str
    attribute: Hashable | None
    offset: int
    length: int

    @property
    def rows(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class AlignedSubspace:
    """Row-concatenation ``[shared; private_1; ...; private_n]`` with its layout."""

    matrix: np.ndarray
    layout: tuple[Block, ...]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "layout", tuple(self.layout))
        check_layout(self.layout, m.shape[0])

    @property
    def r(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def attribute_order(self) -> list:
        return [b.attribute for b in self.layout[1:]]

    def block(self, attribute=None) -> Block:
        """The shared block (``attribute=None``) or an attribute's private block."""
        for b in self.layout:
            if (attribute is None and b.kind == "shared") or (b.kind == "private" and b.attribute == attribute):
                return b
        raise KeyError(f"no block for attribute {attribute!r}")

    def rows(self, attribute=None) -> np.ndarray:
        return self.matrix[self.block(attribute).rows]


def check_layout(layout: Sequence[Block], r: int) -> None:
    if not layout or layout[0].kind != "shared":
        raise ValueError("layout check failed: block 0 must be the shared block")
    pos = 0
    seen = set()
    for b in layout:
        if b.offset != pos or b.length < 0:
            raise ValueError(f"layout check failed: block {b} does not tile from offset {pos}")
        if b.kind == "private":
            if b.attribute in seen:
                raise ValueError(f"layout check failed: attribute {b.attribute!r} appears twice")
            seen.add(b.attribute)
        elif b is not layout[0]:
            raise ValueError("layout check failed: only block 0 may be shared")
        pos += b.length
    if pos != r:
        raise ValueError(f"layout check failed: blocks cover {pos} rows, matrix has {r}")


def orthonormality_error(b: np.ndarray) -> float:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] == 0:
        return 0.0
    return float(np.abs(b @ b.T - np.eye(b.shape[0])).max())


# ---------------------------------------------------------------------------
# Operations


def aggregate(samples: Mapping[Hashable, Sequence[Sequence[int]]], layer: int, model: FrozenModel) -> ActivationBank:
    """Last-token layer-``layer`` state for every sample sequence, grouped by attribute."""
    vecs = {}
    for attr, seqs in samples.items():
        if len(seqs) == 0:
            raise ValueError(f"attribute {attr!r} has no samples")
        vecs[attr] = np.stack([forward_capture(model, s, layer)[1].states[-1] for s in seqs])
    return ActivationBank(vecs, layer)


def _energy(sigma: np.ndarray, energy: str) -> np.ndarray:
    if energy == "sigma":
        return sigma
    if energy == "sigma_squared":
        return sigma * sigma
    raise ValueError(f"energy must be 'sigma' or 'sigma_squared', got {energy!r}")


def energy_rank(sigma, threshold: float = 0.90) -> int:
    """Smallest ``r`` whose leading ``r`` values carry ``threshold`` of the total."""
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if s.size == 0 or np.any(s < 0) or np.any(np.diff(s) > 0):
        raise ValueError("spectrum must be non-empty, non-negative and non-increasing")
    csum = np.cumsum(s)
    total = csum[-1]
    if total == 0.0:
        raise ValueError("degenerate spectrum: all singular values are zero")
    hits = np.nonzero(csum / total >= threshold)[0]
    return int(hits[0]) + 1 if hits.size else s.size


def _captured(sigma: np.ndarray, r: int) -> float:
    return float(sigma[:r].sum() / sigma.sum())


def extract_shared(bank: ActivationBank, threshold: float = 0.90, energy: str = "sigma") -> SubspaceBasis:
    tau_c = bank.mean_matrix()
    res = svd(tau_c)
    if res.sigma[0] == 0.0:
        raise ValueError("all attribute means are zero; shared subspace is undefined")
    e = _energy(res.sigma, energy)
    r = energy_rank(e, threshold)
    return SubspaceBasis("shared", res.U[:, :r].T.copy(), _captured(e, r), spectrum=e)


def _remove(basis: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Remove the row-space component of ``basis`` from the columns of ``x``."""
    if basis.shape[0] == 0:
        return x
    return x - basis.T @ (basis @ x)


def _gram_schmidt_rows(b: np.ndarray, against: np.ndarray) -> np.ndarray:
    """Re-orthogonalise rows against ``against`` and each other (one MGS pass)."""
    out = []
    for row in b:
        v = row - against.T @ (against @ row) if against.shape[0] else row.copy()
        for u in out:
            v = v - (u @ v) * u
        v = v / np.linalg.norm(v)
        out.append(v)
    return np.array(out).reshape(len(out), b.shape[1])


def extract_private(
    bank: ActivationBank,
    attribute,
    shared: SubspaceBasis,
    threshold: float = 0.90,
    energy: str = "sigma",
    residual_source: str = "samples",
    exclude: Sequence[np.ndarray] = (),
) -> SubspaceBasis:
    """Private basis of ``attribute``: leading directions of its shared-free residual.

    ``residual_source="mean"`` uses the attribute mean alone (a rank-1
    residual); ``"samples"`` uses every sample. ``exclude`` holds further row
    bases to project out first (used for cross-attribute orthogonalisation).
    An attribute lying entirely in the removed span yields an empty basis.
    """
    if attribute not in bank.samples:
        raise KeyError(f"unknown attribute {attribute!r}")
    if shared.d != bank.d:
        raise ValueError(f"shared basis width {shared.d} does not match activations width {bank.d}")
    if residual_source == "samples":
        h = bank.samples[attribute].T
    elif residual_source == "mean":
        h = bank.means[attribute].reshape(-1, 1)
    else:
        raise ValueError(f"residual_source must be 'mean' or 'samples', got {residual_source!r}")
    removed = np.vstack([shared.basis, *exclude]) if exclude else shared.basis
    resid = _remove(shared.basis, h)
    for b in exclude:
        resid = _remove(b, resid)
    scale = max(np.linalg.norm(h), np.finfo(float).tiny)
    if np.linalg.norm(resid) <= 1e-10 * scale:
        return SubspaceBasis("private", np.zeros((0, bank.d)), 0.0, attribute)
    res = svd(resid)
    e = _energy(res.sigma, energy)
    r = energy_rank(e, threshold)
    b = _gram_schmidt_rows(res.U[:, :r].T, removed)
    return SubspaceBasis("private", b, _captured(e, r), attribute, spectrum=e)


def build_aligned(shared: SubspaceBasis, privates: Sequence[SubspaceBasis]) -> AlignedSubspace:
    d = shared.d
    layout = [Block("shared", None, 0, shared.rank)]
    off = shared.rank
    for p in privates:
        if p.d != d:
            raise ValueError(f"width mismatch: private basis for {p.attribute!r} has width {p.d}, shared has {d}")
        layout.append(Block("private", p.attribute, off, p.rank))
        off += p.rank
    matrix = np.vstack([shared.basis, *[p.basis for p in privates]])
    return AlignedSubspace(matrix, tuple(layout))


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (radians, non-decreasing) between two orthonormal-row bases."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"bases have widths {a.shape[1]} and {b.shape[1]}")
    k = min(a.shape[0], b.shape[0])
    if k == 0:
        return np.zeros(0)
    cos = np.linalg.svd(a @ b.T, compute_uv=False)[:k]
    theta = np.arccos(np.clip(cos, 0.0, 1.0))
    # arccos is ill-conditioned near 0; small angles come from the sines instead.
    lo, hi = (b, a) if b.shape[0] <= a.shape[0] else (a, b)
    sin = np.sort(np.linalg.svd(lo - (lo @ hi.T) @ hi, compute_uv=False))[:k]
    small = theta < np.pi / 4
    theta[small] = np.arcsin(np.clip(sin[small], 0.0, 1.0))
    return theta


def projector(basis: np.ndarray) -> np.ndarray:
    basis = np.asarray(basis, dtype=np.float64)
    return basis.T @ basis


# ---------------------------------------------------------------------------
# One-call extraction


@dataclass(frozen=True)
class ExtractionConfig:
    threshold: float = 0.90
    energy: str = "sigma"
    residual_source: str = "samples"
    cross_orthogonalize: bool = False
    max_total_rank: int | None = None


def _cap_ranks(ranks: Sequence[int], cap: int) -> list[int]:
    """Shrink block ranks proportionally to sum to ``cap`` (largest remainder).

    Every non-empty block keeps at least one row when ``cap`` allows it.
    """
    total = sum(ranks)
    if total <= cap:
        return list(ranks)
    quota = [cap * r / total for r in ranks]
    out = [int(q) for q in quota]
    order = sorted(range(len(ranks)), key=lambda i: (-(quota[i] - out[i]), i))
    for i in order[: cap - sum(out)]:
        out[i] += 1
    for i, r in enumerate(ranks):
        if r and not out[i]:
            donor = max(range(len(out)), key=lambda j: (out[j], -j))
            if out[donor] > 1:
                out[donor] -= 1
                out[i] = 1
    return out


def extract_subspaces(bank: ActivationBank, config: ExtractionConfig = ExtractionConfig()):
    """Shared basis, private bases in attribute order, and the aligned subspace."""
    shared = extract_shared(bank, config.threshold, config.energy)
    privates = []
    for attr in bank.attributes:
        exclude = [p.basis for p in privates if p.rank] if config.cross_orthogonalize else []
        privates.append(
            extract_private(bank, attr, shared, config.threshold, config.energy, config.residual_source, exclude)
        )
    if config.max_total_rank is not None:
        if config.max_total_rank < 1:
            raise ValueError("max_total_rank must be >= 1")
        ranks = _cap_ranks([shared.rank] + [p.rank for p in privates], config.max_total_rank)
        shared = shared.truncated(ranks[0])
        privates = [p.truncated(k) for p, k in zip(privates, ranks[1:])]
    return shared, privates, build_aligned(shared, privates)
