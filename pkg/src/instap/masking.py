"""Attention-guided token masking for masked video modelling.

Attention maps use receiver-indexed rows: ``A[l, j]`` is the weight token
``j`` puts on token ``l``, so every column is a distribution and the row
mean ``s = A @ 1 / L`` is the average attention token ``l`` receives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tokens import TokenSeq


@dataclass(frozen=True)
class TokenMask:
    mask: np.ndarray  # (L,) uint8, 1 = masked
    visible: np.ndarray  # sorted indices with mask == 0
    rho: float

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def __len__(self) -> int:
        return int(self.mask.shape[0])


def importance_scores(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"attention map must be square, got shape {A.shape}")
    return A.sum(axis=1) / A.shape[0]


def num_masked(rho: float, L: int) -> int:
    # guard against 0.8 * 10 = 8.000000000000002 style round-up
    return min(L, math.ceil(round(rho * L, 9)))


def build_mask(scores, rho: float, L: int | None = None) -> TokenMask:
    """Mask the ``ceil(rho * L)`` lowest-scoring tokens; ties mask the lower index first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if L is None:
        L = s.shape[0]
    if s.shape[0] != L:
        raise ValueError(f"score vector has length {s.shape[0]}, expected {L}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1), got {rho}")
    n = num_masked(rho, L)  # may equal L for tiny L; callers needing a visible token check
    order = np.lexsort((np.arange(L), s))  # primary key: score, then index
    mask = np.zeros(L, dtype=np.uint8)
    mask[order[:n]] = 1
    return TokenMask(mask, np.flatnonzero(mask == 0), float(rho))


def select_visible(tokens: TokenSeq, mask: TokenMask) -> TokenSeq:
    if len(tokens) != len(mask):
        raise ValueError(f"{len(tokens)} tokens but mask covers {len(mask)}")
    return tokens.take(mask.visible)
