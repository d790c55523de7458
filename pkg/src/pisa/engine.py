"""Piecewise sparse attention: exact selected blocks, Taylor-approximated tail.

For a query row ``q`` in query block ``i`` with selected set ``S`` and tail
``U``, every variant except ``SPARSE_ONLY`` uses the denominator

    D = sum_{j in S} sum_n exp(s * q k_jn) + B * sum_{j in U} exp(s * q kbar_j)

and a numerator made of the exact selected term plus, per variant,

    ZEROTH        + sum_U a_j * vhat_j
    BLOCK_FIRST   + sum_U a_j * vhat_j + sum_U a_j * (s * q H_j)
    HYBRID        + sum_U a_j * vhat_j + (sum_U a_j) * (s * q Hbar)
    GLOBAL_CENTROID  as HYBRID, with the slope sum_U a_j replaced by
                     |U| * exp(s * q kbar_global)

where ``a_j = exp(s * q kbar_j)`` and ``s`` is the score scale.

``pisa_reference`` evaluates these formulas directly with one shift per
row. ``pisa_streaming`` computes HYBRID the way a fused kernel would:
exact blocks one at a time, then centroid groups with selected columns
masked, both under a running max, then the global first-order injection
and a single normalization.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import AttentionConfig, check_blocks, check_shapes, dense_online
from .block_stats import BlockStatistics, prepare
from .errors import EmptySelection, InvalidDimension, NumericalOverflow
from .router import (
    DEFAULT_EPSILON,
    SelectionPlan,
    Strategy,
    select_topk_covariance,
    select_topk_plain,
    sparsity_to_k,
)
from .tensor_io import TensorBundle


class Variant(str, Enum):
    SPARSE_ONLY = "sparse_only"
    ZEROTH = "zeroth"
    BLOCK_FIRST = "block_first"
    HYBRID = "hybrid"
    GLOBAL_CENTROID = "global_centroid"


PHASES = ("prepare", "select", "exact", "approx", "normalize")


@dataclass(eq=False)
class PisaOutput:
    """Output rows plus per-row diagnostics.

    ``D``, ``ell_tail`` and ``tail_mass`` are expressed relative to
    ``exp(row_max)``: the absolute value of ``D[t]`` is
    ``D[t] * exp(row_max[t])``. Ratios between them are shift-free.
    """

    O: np.ndarray
    D: np.ndarray
    ell_tail: np.ndarray
    tail_mass: np.ndarray
    row_max: np.ndarray
    running_max_used: bool

    def diagnostics(self) -> dict:
        return {
            "D": self.D.tolist(),
            "ell_tail": self.ell_tail.tolist(),
            "tail_mass": self.tail_mass.tolist(),
            "row_max": self.row_max.tolist(),
            "running_max_used": self.running_max_used,
        }


def _check_inputs(Q, K, V, plan: SelectionPlan, stats: BlockStatistics, cfg: AttentionConfig) -> int:
    check_shapes(Q, K, V)
    B = cfg.block_size
    N = check_blocks(K.shape[0], B)
    if stats.block_size != B or stats.num_blocks != N:
        raise InvalidDimension(f"statistics built for B={stats.block_size}, N={stats.num_blocks}; expected B={B}, N={N}")
    if plan.num_blocks != N or plan.num_query_blocks * plan.query_block != Q.shape[0]:
        raise InvalidDimension("plan does not match the Q/K block layout")
    for i, s in enumerate(plan.selected):
        if not s:
            raise EmptySelection(i)
    return N


def _raise_nonfinite(O: np.ndarray, D: np.ndarray, row0: int) -> None:
    bad = ~(np.isfinite(O).all(axis=1) & np.isfinite(D) & (D > 0))
    if bad.any():
        raise NumericalOverflow(row0 + int(np.flatnonzero(bad)[0]))


def pisa_reference(Q, K, V, plan: SelectionPlan, stats: BlockStatistics,
                   variant: Variant = Variant.HYBRID, cfg: AttentionConfig = AttentionConfig()) -> PisaOutput:
    """Direct evaluation of the piecewise formulas with a two-pass softmax."""
    variant = Variant(variant)
    N = _check_inputs(Q, K, V, plan, stats, cfg)
    B, qb = cfg.block_size, plan.query_block
    d = Q.shape[1]
    scale = cfg.scale_for(d)
    w_centroid = B if cfg.centroid_weight == "block" else 1
    Q, K, V = (np.asarray(a, np.float64) for a in (Q, K, V))
    Kb, Vb = K.reshape(N, B, d), V.reshape(N, B, -1)
    L = Q.shape[0]

    O = np.empty((L, V.shape[1]))
    D = np.empty(L)
    ell_tail = np.zeros(L)
    row_max = np.empty(L)
    for i, sel in enumerate(plan.selected):
        rows = slice(i * qb, (i + 1) * qb)
        q = Q[rows]
        S = list(sel)
        U = plan.unselected(i)
        s_ex = scale * (q @ Kb[S].reshape(-1, d).T)
        m = s_ex.max(axis=1)
        approx = variant is not Variant.SPARSE_ONLY and U.size > 0
        if approx:
            s_c = scale * (q @ stats.k_bar[U].T)
            m = np.maximum(m, s_c.max(axis=1))
        p = np.exp(s_ex - m[:, None])
        num = p @ Vb[S].reshape(-1, V.shape[1])
        den = p.sum(axis=1)
        if approx:
            a = np.exp(s_c - m[:, None])
            a_sum = a.sum(axis=1)
            den = den + w_centroid * a_sum
            num = num + a @ stats.v_hat[U]
            if variant is Variant.BLOCK_FIRST:
                qH = (scale * q) @ stats.H[U].transpose(1, 0, 2).reshape(d, -1)
                num = num + np.einsum("tj,tje->te", a, qH.reshape(q.shape[0], U.size, -1))
            elif variant is Variant.HYBRID:
                num = num + a_sum[:, None] * ((scale * q) @ stats.H_bar)
            elif variant is Variant.GLOBAL_CENTROID:
                beta = np.exp(scale * (q @ stats.k_bar_global) - m)
                num = num + (U.size * beta)[:, None] * ((scale * q) @ stats.H_bar)
            ell_tail[rows] = a_sum
        O[rows] = num / den[:, None]
        D[rows] = den
        row_max[rows] = m
        _raise_nonfinite(O[rows], den, i * qb)
    return PisaOutput(O, D, ell_tail, w_centroid * ell_tail, row_max, running_max_used=False)


class _Timer:
    def __init__(self, sink: dict | None):
        self.sink = sink
        self.t = time.perf_counter()

    def lap(self, phase: str) -> None:
        if self.sink is not None:
            now = time.perf_counter()
            self.sink[phase] = self.sink.get(phase, 0.0) + (now - self.t)
            self.t = now


def pisa_streaming(Q, K, V, plan: SelectionPlan, stats: BlockStatistics,
                   cfg: AttentionConfig = AttentionConfig(), timings: dict | None = None) -> PisaOutput:
    """Phased HYBRID evaluation with an online softmax.

    Phase 1 streams the selected key/value blocks, phase 2 scans centroid
    groups of ``cfg.group_size`` blocks with selected columns set to -inf,
    phase 3 injects ``l_tail * (s * q Hbar)`` and normalizes. ``l`` and
    ``l_tail`` live in the same shifted domain as the accumulator, so every
    rescale on a new maximum applies to all three. ``timings`` (if given)
    accumulates seconds per phase under the keys ``exact``, ``approx`` and
    ``normalize``.
    """
    N = _check_inputs(Q, K, V, plan, stats, cfg)
    B, C, qb = cfg.block_size, cfg.group_size, plan.query_block
    d = Q.shape[1]
    dt = cfg.accum.numpy
    scale = dt(cfg.scale_for(d))
    w_centroid = dt(B if cfg.centroid_weight == "block" else 1)
    Q, K, V = (np.asarray(a, dt) for a in (Q, K, V))
    k_bar = stats.k_bar.astype(dt)
    v_hat = stats.v_hat.astype(dt)
    if cfg.phase3 == "mean":
        H = stats.H_bar.astype(dt)
    else:
        H = (stats.H.sum(axis=0) / K.shape[0]).astype(dt)
    L, dv = Q.shape[0], V.shape[1]
    groups = [(g, min(g + C, N)) for g in range(0, N, C)]

    O = np.empty((L, dv), dtype=dt)
    D = np.empty(L, dtype=dt)
    ell_tail_all = np.empty(L, dtype=dt)
    row_max = np.empty(L, dtype=dt)
    clock = _Timer(timings)
    for i, sel in enumerate(plan.selected):
        rows = slice(i * qb, (i + 1) * qb)
        q = Q[rows]
        m = np.full(q.shape[0], -np.inf, dtype=dt)
        ell = np.zeros(q.shape[0], dtype=dt)
        ell_tail = np.zeros(q.shape[0], dtype=dt)
        acc = np.zeros((q.shape[0], dv), dtype=dt)

        for j in sel:
            s = (q @ K[j * B:(j + 1) * B].T) * scale
            m_new = np.maximum(m, s.max(axis=1))
            corr = np.exp(m - m_new)
            p = np.exp(s - m_new[:, None])
            ell = ell * corr + p.sum(axis=1)
            acc = acc * corr[:, None] + p @ V[j * B:(j + 1) * B]
            m = m_new
        clock.lap("exact")

        chosen = np.zeros(N, dtype=bool)
        chosen[list(sel)] = True
        for g0, g1 in groups:
            if chosen[g0:g1].all():
                continue
            s = (q @ k_bar[g0:g1].T) * scale
            s[:, chosen[g0:g1]] = -np.inf
            m_new = np.maximum(m, s.max(axis=1))
            corr = np.exp(m - m_new)
            p = np.exp(s - m_new[:, None])
            rs = p.sum(axis=1)
            ell = ell * corr + w_centroid * rs
            ell_tail = ell_tail * corr + rs
            acc = acc * corr[:, None] + p @ v_hat[g0:g1]
            m = m_new

        acc += ell_tail[:, None] * ((q * scale) @ H)
        clock.lap("approx")
        O[rows] = acc / ell[:, None]
        D[rows] = ell
        ell_tail_all[rows] = ell_tail
        row_max[rows] = m
        _raise_nonfinite(O[rows], ell, i * qb)
        clock.lap("normalize")
    return PisaOutput(O, D, ell_tail_all, w_centroid * ell_tail_all, row_max, running_max_used=True)


# -- multi-head driver -------------------------------------------------------


def build_plan(stats: BlockStatistics, k: int, strategy: Strategy, cfg: AttentionConfig, d: int,
               epsilon: float = DEFAULT_EPSILON, Q=None, per_row: bool = False) -> SelectionPlan:
    """Route with block-mean queries (default) or, if ``per_row``, each query row."""
    scale = cfg.scale_for(d)
    q_bar = np.asarray(Q, np.float64) if per_row else stats.q_bar
    qb = 1 if per_row else cfg.block_size
    if Strategy(strategy) is Strategy.COVARIANCE:
        return select_topk_covariance(q_bar, stats.k_bar, stats.M, epsilon, k, scale, qb)
    return select_topk_plain(q_bar, stats.k_bar, k, scale, qb)


@dataclass
class HeadResult:
    output: PisaOutput
    plan: SelectionPlan
    stats: BlockStatistics
    timings: dict = field(default_factory=dict)


@dataclass
class MultiHeadResult:
    heads: list[HeadResult]
    realized_sparsity: float

    @property
    def outputs(self) -> list[PisaOutput]:
        return [h.output for h in self.heads]


def run_head(Q, K, V, r: float, strategy=Strategy.PLAIN, variant=Variant.HYBRID,
             cfg: AttentionConfig = AttentionConfig(), path: str = "auto",
             epsilon: float = DEFAULT_EPSILON, per_row: bool = False) -> HeadResult:
    """Block statistics, routing and one PISA path for a single head.

    ``path="auto"`` uses the streaming kernel for HYBRID and the reference
    evaluation for every other variant.
    """
    variant = Variant(variant)
    timings: dict = {}
    t0 = time.perf_counter()
    stats = prepare(Q, K, V, cfg.block_size)
    t1 = time.perf_counter()
    k = sparsity_to_k(r, stats.num_blocks)
    plan = build_plan(stats, k, strategy, cfg, Q.shape[1], epsilon, Q=Q, per_row=per_row)
    t2 = time.perf_counter()
    timings["prepare"], timings["select"] = t1 - t0, t2 - t1
    if path == "auto":
        path = "streaming" if variant is Variant.HYBRID else "reference"
    if path == "streaming":
        if variant is not Variant.HYBRID:
            raise ValueError("the streaming path implements the hybrid variant only")
        out = pisa_streaming(Q, K, V, plan, stats, cfg, timings=timings)
    else:
        t3 = time.perf_counter()
        out = pisa_reference(Q, K, V, plan, stats, variant, cfg)
        timings["approx"] = time.perf_counter() - t3
    return HeadResult(out, plan, stats, timings)


def pisa_multihead(bundle: TensorBundle, r: float, strategy=Strategy.PLAIN, variant=Variant.HYBRID,
                   cfg: AttentionConfig = AttentionConfig(), *, path: str = "auto",
                   epsilon: float = DEFAULT_EPSILON, threads: int = 1) -> MultiHeadResult:
    """Run every head independently; results are ordered by head index."""
    check_blocks(bundle.seq_len, cfg.block_size)

    def one(h: int) -> HeadResult:
        return run_head(*bundle.head(h), r, strategy, variant, cfg, path, epsilon)

    if threads > 1 and bundle.num_heads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            heads = list(pool.map(one, range(bundle.num_heads)))
    else:
        heads = [one(h) for h in range(bundle.num_heads)]
    return MultiHeadResult(heads, heads[0].plan.realized_sparsity)


def dense_multihead(bundle: TensorBundle, cfg: AttentionConfig = AttentionConfig()) -> list[np.ndarray]:
    return [dense_online(*bundle.head(h), cfg) for h in range(bundle.num_heads)]
