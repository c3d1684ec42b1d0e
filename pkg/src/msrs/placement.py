"""Pick the token to steer for each attribute.

Every token state is scored by the norm of its projection onto the
attribute's rows of ``R``; ``important`` placement takes the argmax (smallest
index on ties), ``last`` placement always takes the final token. Positions
are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .toymodel import HiddenCapture

STRATEGIES = ("last", "important")


@dataclass(frozen=True)
class PlacementDecision:
    attribute: Hashable
    scores: np.ndarray
    position: int
    strategy: str
    fallback: bool = False  # all scores were zero, so the last token was used

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "scores": [float(s) for s in self.scores],
            "position": int(self.position),
            "strategy": self.strategy,
            "fallback": bool(self.fallback),
        }


def project_block(block: np.ndarray, h) -> np.ndarray:
    """``block^T block h``; an empty block projects everything to zero."""
    block = np.asarray(block, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if block.ndim != 2 or block.shape[1] != h.shape[-1]:
        raise ValueError(f"block of shape {block.shape} cannot act on vectors of width {h.shape[-1]}")
    if block.shape[0] == 0:
        return np.zeros_like(h)
    return (h @ block.T) @ block


def score(block: np.ndarray, h) -> np.ndarray | float:
    """Relevance of one state (or each row of a ``T x d`` stack) to ``block``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        return float(np.linalg.norm(project_block(block, h)))
    # row by row: batched BLAS kernels may round identical rows differently,
    # which would break the smallest-index tie rule
    return np.array([np.linalg.norm(project_block(block, np.array(row))) for row in h])


def orthonormalize_rows(block: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the row space of ``block`` (rank-revealing)."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape[0] == 0:
        return block
    _, s, vt = np.linalg.svd(block, full_matrices=False)
    keep = s > s[0] * max(block.shape) * np.finfo(float).eps
    return vt[keep]


def attribute_rows(R: np.ndarray, aligned, attribute, include_shared: bool = False, orthonormal: bool = False):
    """Rows of ``R`` belonging to ``attribute``'s private block (optionally with shared)."""
    rows = [R[aligned.block(attribute).rows]]
    if include_shared:
        rows.insert(0, R[aligned.block(None).rows])
    block = np.vstack(rows)
    return orthonormalize_rows(block) if orthonormal else block


def select_position(block: np.ndarray, capture: HiddenCapture | np.ndarray, strategy: str = "important", attribute=None):
    states = capture.states if isinstance(capture, HiddenCapture) else np.asarray(capture, dtype=np.float64)
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    T = states.shape[0]
    if T < 1:
        raise ValueError("cannot place an intervention in an empty sequence")
    scores = np.atleast_1d(score(block, states))
    if strategy == "last":
        return PlacementDecision(attribute, scores, T - 1, strategy)
    if not np.any(scores > 0):
        return PlacementDecision(attribute, scores, T - 1, strategy, fallback=True)
    return PlacementDecision(attribute, scores, int(np.argmax(scores)), strategy)


@dataclass
class PlacementStats:
    """Per-attribute histogram of chosen positions."""

    counts: dict = field(default_factory=dict)
    fallbacks: dict = field(default_factory=dict)

    def add(self, d: PlacementDecision) -> None:
        hist = self.counts.setdefault(d.attribute, {})
        hist[d.position] = hist.get(d.position, 0) + 1
        self.fallbacks[d.attribute] = self.fallbacks.get(d.attribute, 0) + int(d.fallback)


def plan(decisions: Sequence[PlacementDecision]) -> dict[int, list]:
    """Group decisions by position; attributes sharing a position keep their given order."""
    out: dict[int, list] = {}
    for d in decisions:
        out.setdefault(d.position, []).append(d.attribute)
    return out
