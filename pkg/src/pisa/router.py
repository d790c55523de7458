"""Choosing which key blocks each query block computes exactly.

Plain routing ranks blocks by the centroid score ``scale * q_bar @ k_bar.T``.
Covariance-aware routing adds ``log(M_j + eps)`` so that blocks whose
first-order matrix deviates strongly from the global mean are more likely
to be computed exactly. Top-k is invariant under strictly monotone
transforms of a row, so no softmax is applied before ranking.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidDimension, InvalidEpsilon, InvalidSparsity

DEFAULT_EPSILON = 1e-6


class Strategy(str, Enum):
    PLAIN = "plain"
    COVARIANCE = "covariance"


@dataclass(frozen=True)
class SelectionPlan:
    """Per query block, the ascending block indices computed exactly.

    ``query_block`` is the number of query rows sharing one entry of
    ``selected``; it equals the key block size for block-mean routing and
    is 1 for per-row routing.
    """

    selected: tuple[tuple[int, ...], ...]
    num_blocks: int
    query_block: int
    strategy: Strategy = Strategy.PLAIN
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.selected:
            raise InvalidDimension("plan has no query blocks")
        k = len(self.selected[0])
        if not 1 <= k <= self.num_blocks:
            raise InvalidSparsity(f"k={k} outside [1, N={self.num_blocks}]")
        for i, s in enumerate(self.selected):
            if len(s) != k:
                raise InvalidDimension(f"query block {i} selects {len(s)} blocks, expected {k}")
            if any(b <= a for a, b in zip(s, s[1:])) or s[0] < 0 or s[-1] >= self.num_blocks:
                raise InvalidDimension(f"query block {i}: indices must be ascending in [0, N): {s}")

    @property
    def num_query_blocks(self) -> int:
        return len(self.selected)

    @property
    def k(self) -> int:
        return len(self.selected[0])

    @property
    def realized_sparsity(self) -> float:
        return (self.num_blocks - self.k) / self.num_blocks

    def unselected(self, i: int) -> np.ndarray:
        mask = np.ones(self.num_blocks, dtype=bool)
        mask[list(self.selected[i])] = False
        return np.flatnonzero(mask)

    def mask(self) -> np.ndarray:
        """Boolean ``(N_q, N)`` matrix, True where a block is selected."""
        m = np.zeros((self.num_query_blocks, self.num_blocks), dtype=bool)
        for i, s in enumerate(self.selected):
            m[i, list(s)] = True
        return m

    def to_json(self) -> str:
        return json.dumps({
            "num_blocks": self.num_blocks,
            "query_block": self.query_block,
            "strategy": self.strategy.value,
            "epsilon": self.epsilon,
            "selected": {str(i): list(s) for i, s in enumerate(self.selected)},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SelectionPlan":
        raw = json.loads(text)
        sel = raw["selected"]
        return cls(
            selected=tuple(tuple(sel[str(i)]) for i in range(len(sel))),
            num_blocks=raw["num_blocks"],
            query_block=raw["query_block"],
            strategy=Strategy(raw["strategy"]),
            epsilon=raw["epsilon"],
        )

    @classmethod
    def full(cls, num_query_blocks: int, num_blocks: int, query_block: int) -> "SelectionPlan":
        every = tuple(range(num_blocks))
        return cls((every,) * num_query_blocks, num_blocks, query_block)

    @classmethod
    def fixed(cls, blocks, num_query_blocks: int, num_blocks: int, query_block: int) -> "SelectionPlan":
        s = tuple(sorted(int(b) for b in blocks))
        return cls((s,) * num_query_blocks, num_blocks, query_block)


def sparsity_to_k(r: float, N: int) -> int:
    """Number of exact blocks for sparsity ``r``; at least one."""
    if not 0 <= r < 1:
        raise InvalidSparsity(f"sparsity must be in [0, 1), got {r}")
    if N < 1:
        raise InvalidDimension(f"N must be >= 1, got {N}")
    return max(1, min(N, math.floor((1 - r) * N + 0.5)))


def topk_plan(scores: np.ndarray, k: int, query_block: int, strategy=Strategy.PLAIN,
              epsilon: float = DEFAULT_EPSILON, force_diagonal: bool = False) -> SelectionPlan:
    """Top-k per row of ``scores`` with ties going to the lower index."""
    n_q, N = scores.shape
    if not 1 <= k <= N:
        raise InvalidSparsity(f"k={k} outside [1, N={N}]")
    scores = np.array(scores, dtype=np.float64)
    if force_diagonal:
        if n_q != N:
            raise InvalidDimension("force_diagonal needs one query block per key block")
        scores[np.arange(N), np.arange(N)] = np.inf
    # stable sort on -score keeps equal scores in ascending index order
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    selected = tuple(tuple(int(j) for j in np.sort(row)) for row in order)
    return SelectionPlan(selected, N, query_block, Strategy(strategy), epsilon)


def select_topk_plain(q_bar: np.ndarray, k_bar: np.ndarray, k: int, scale: float,
                      query_block: int, force_diagonal: bool = False) -> SelectionPlan:
    if q_bar.shape[1] != k_bar.shape[1]:
        raise InvalidDimension(f"q_bar {q_bar.shape} and k_bar {k_bar.shape} disagree on d")
    if k > k_bar.shape[0]:
        raise InvalidSparsity(f"k={k} exceeds N={k_bar.shape[0]}")
    scores = scale * (np.asarray(q_bar, np.float64) @ np.asarray(k_bar, np.float64).T)
    return topk_plan(scores, k, query_block, Strategy.PLAIN, force_diagonal=force_diagonal)


def covariance_scores(q_bar, k_bar, M, epsilon: float, scale: float) -> np.ndarray:
    if not epsilon > 0:
        raise InvalidEpsilon(f"epsilon must be > 0, got {epsilon}")
    M = np.asarray(M, np.float64)
    if (M < 0).any():
        raise InvalidDimension("deviation norms M_j must be non-negative")
    raw = scale * (np.asarray(q_bar, np.float64) @ np.asarray(k_bar, np.float64).T)
    return raw + np.log(M + epsilon)[None, :]


def select_topk_covariance(q_bar, k_bar, M, epsilon: float, k: int, scale: float,
                           query_block: int, force_diagonal: bool = False) -> SelectionPlan:
    if k > np.shape(k_bar)[0]:
        raise InvalidSparsity(f"k={k} exceeds N={np.shape(k_bar)[0]}")
    scores = covariance_scores(q_bar, k_bar, M, epsilon, scale)
    return topk_plan(scores, k, query_block, Strategy.COVARIANCE, epsilon, force_diagonal)
