"""Exact attention oracles and keep-or-drop block-sparse attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import BlockDivisibility, EmptySelection, InvalidDimension
from .router import SelectionPlan


class Accum(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy(self):
        return np.float32 if self is Accum.F32 else np.float64


@dataclass(frozen=True)
class AttentionConfig:
    """Tiling and numerics shared by all attention paths.

    ``centroid_weight`` and ``phase3`` exist only for diagnostics: ``"unit"``
    drops the factor B on centroid exponentials in the denominator, and
    ``"literal"`` applies the phase-3 correction as ``l_tail * q (sum_j H_j) / L``.
    """

    block_size: int = 64
    group_size: int = 8
    scale: float | None = None
    accum: Accum = Accum.F64
    deterministic: bool = True
    centroid_weight: str = "block"
    phase3: str = "mean"

    def __post_init__(self):
        if self.block_size < 1 or self.group_size < 1:
            raise InvalidDimension("block_size and group_size must be >= 1")
        if self.scale is not None and not self.scale > 0:
            raise InvalidDimension(f"scale must be > 0, got {self.scale}")
        if self.centroid_weight not in ("block", "unit") or self.phase3 not in ("mean", "literal"):
            raise InvalidDimension("unknown diagnostic flag")
        object.__setattr__(self, "accum", Accum(self.accum))

    def scale_for(self, d: int) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(d)

    def with_(self, **kw) -> "AttentionConfig":
        return replace(self, **kw)


def check_shapes(Q, K, V) -> None:
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise InvalidDimension("Q, K, V must be 2-D [L, d]")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0] or Q.shape[0] < 1 or K.shape[0] < 1:
        raise InvalidDimension(f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")


def check_blocks(L: int, B: int) -> int:
    if L % B:
        raise BlockDivisibility(L, B)
    return L // B


def dense_naive(Q, K, V, scale: float | None = None) -> np.ndarray:
    """Softmax attention with a materialized score matrix, in float64."""
    check_shapes(Q, K, V)
    scale = scale if scale is not None else 1.0 / math.sqrt(Q.shape[1])
    S = scale * (np.asarray(Q, np.float64) @ np.asarray(K, np.float64).T)
    P = np.exp(S - S.max(axis=1, keepdims=True))
    return (P @ np.asarray(V, np.float64)) / P.sum(axis=1, keepdims=True)


def dense_online(Q, K, V, cfg: AttentionConfig = AttentionConfig()) -> np.ndarray:
    """Flash-style streaming over key blocks with running max and denominator.

    All query rows are processed together; key/value blocks are visited in
    ascending order so the reduction order is fixed.
    """
    check_shapes(Q, K, V)
    B = cfg.block_size
    N = check_blocks(K.shape[0], B)
    dt = cfg.accum.numpy
    scale = dt(cfg.scale_for(Q.shape[1]))
    Q, K, V = (np.asarray(a, dt) for a in (Q, K, V))

    L = Q.shape[0]
    m = np.full(L, -np.inf, dtype=dt)
    ell = np.zeros(L, dtype=dt)
    acc = np.zeros((L, V.shape[1]), dtype=dt)
    for j in range(N):
        s = (Q @ K[j * B:(j + 1) * B].T) * scale
        m_new = np.maximum(m, s.max(axis=1))
        corr = np.exp(m - m_new)
        p = np.exp(s - m_new[:, None])
        ell = ell * corr + p.sum(axis=1)
        acc = acc * corr[:, None] + p @ V[j * B:(j + 1) * B]
        m = m_new
    return acc / ell[:, None]


def sparse_masked(Q, K, V, plan: SelectionPlan, cfg: AttentionConfig = AttentionConfig()) -> np.ndarray:
    """Block-sparse attention: softmax restricted to the selected key blocks."""
    check_shapes(Q, K, V)
    B = cfg.block_size
    N = check_blocks(K.shape[0], B)
    qb = plan.query_block
    if plan.num_blocks != N or plan.num_query_blocks * qb != Q.shape[0]:
        raise InvalidDimension("plan does not match Q/K block layout")
    dt = cfg.accum.numpy
    scale = dt(cfg.scale_for(Q.shape[1]))
    Q, K, V = (np.asarray(a, dt) for a in (Q, K, V))
    Kb = K.reshape(N, B, -1)
    Vb = V.reshape(N, B, -1)

    out = np.empty((Q.shape[0], V.shape[1]), dtype=dt)
    for i, sel in enumerate(plan.selected):
        if not sel:
            raise EmptySelection(i)
        idx = list(sel)
        Ks = Kb[idx].reshape(-1, K.shape[1])
        Vs = Vb[idx].reshape(-1, V.shape[1])
        rows = slice(i * qb, (i + 1) * qb)
        s = (Q[rows] @ Ks.T) * scale
        p = np.exp(s - s.max(axis=1, keepdims=True))
        out[rows] = (p @ Vs) / p.sum(axis=1, keepdims=True)
    return out
