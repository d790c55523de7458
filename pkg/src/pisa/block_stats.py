"""Prepare-phase statistics: block centroids, value sums and first-order matrices.

Everything is stored in float64 whatever the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import check_blocks
from .errors import InvalidDimension

POWER_TOL = 1e-8
POWER_MAX_ITER = 1000


@dataclass(frozen=True, eq=False)
class BlockStatistics:
    block_size: int
    k_bar: np.ndarray          # (N, d) block key centroids
    v_hat: np.ndarray          # (N, d) block value sums
    H: np.ndarray              # (N, d, d) sum_n (k_n - k_bar)^T v_n
    q_bar: np.ndarray | None = None      # (N_q, d) block query means
    H_bar: np.ndarray | None = None      # (d, d) mean of H over all blocks
    M: np.ndarray | None = None          # (N,) ||H_j - H_bar||_2
    k_bar_global: np.ndarray | None = None  # (d,) mean of every key row

    @property
    def num_blocks(self) -> int:
        return self.k_bar.shape[0]

    @property
    def M_max(self) -> float:
        if self.M is None:
            raise ValueError("global statistics not computed")
        return float(self.M.max())

    def H_bar_over(self, blocks) -> np.ndarray:
        """Mean of H_j over an explicit block subset (e.g. one U_i)."""
        blocks = np.asarray(blocks, dtype=int)
        if blocks.size == 0:
            return np.zeros_like(self.H[0])
        return self.H[blocks].mean(axis=0)


def compute_block_stats(K, V, B: int) -> BlockStatistics:
    if K.shape != V.shape or K.ndim != 2:
        raise InvalidDimension(f"K{K.shape} and V{V.shape} must be equal 2-D shapes")
    N = check_blocks(K.shape[0], B)
    Kb = np.asarray(K, np.float64).reshape(N, B, -1)
    Vb = np.asarray(V, np.float64).reshape(N, B, -1)
    k_bar = Kb.mean(axis=1)
    H = np.einsum("jnd,jne->jde", Kb - k_bar[:, None, :], Vb)
    return BlockStatistics(B, k_bar, Vb.sum(axis=1), H)


def compute_global_stats(partial: BlockStatistics, K=None, *, method: str = "exact") -> BlockStatistics:
    """Add H_bar, per-block deviation norms M and the global key centroid.

    ``K`` is optional; without it the global centroid is the mean of the
    block centroids, which is identical because all blocks have B rows.
    """
    H_bar = np.zeros_like(partial.H[0])
    for Hj in partial.H:  # fixed block order
        H_bar += Hj
    H_bar /= partial.num_blocks
    M = np.array([spectral_norm(Hj - H_bar, method=method) for Hj in partial.H])
    if K is not None:
        k_glob = np.asarray(K, np.float64).mean(axis=0)
    else:
        k_glob = partial.k_bar.mean(axis=0)
    return replace(partial, H_bar=H_bar, M=M, k_bar_global=k_glob)


def query_block_means(Q, B: int) -> np.ndarray:
    N = check_blocks(Q.shape[0], B)
    return np.asarray(Q, np.float64).reshape(N, B, -1).mean(axis=1)


def prepare(Q, K, V, B: int, *, method: str = "exact") -> BlockStatistics:
    stats = compute_global_stats(compute_block_stats(K, V, B), K, method=method)
    return replace(stats, q_bar=query_block_means(Q, B))


def _exact_norm(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    eig = np.linalg.eigvalsh(A.T @ A)
    return float(np.sqrt(max(eig[-1], 0.0)))


def spectral_norm(A, method: str = "exact", tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> float:
    """Largest singular value of ``A``.

    ``method="exact"`` uses the top eigenvalue of ``A.T @ A``. ``"power"``
    iterates on ``A.T @ A`` from the normalized all-ones vector and falls
    back to the exact route if it has not converged after ``max_iter`` steps.
    """
    A = np.asarray(A, np.float64)
    if A.ndim != 2:
        raise InvalidDimension("spectral_norm needs a 2-D matrix")
    if not np.isfinite(A).all():
        raise InvalidDimension("spectral_norm needs finite entries")
    if method == "exact":
        return _exact_norm(A)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")

    G = A.T @ A
    x = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    for _ in range(max_iter):
        y = G @ x
        lam = float(x @ y)
        if lam <= 0.0:
            return _exact_norm(A)
        if np.linalg.norm(y - lam * x) <= tol * lam:
            return float(np.sqrt(lam))
        x = y / np.linalg.norm(y)
    return _exact_norm(A)
