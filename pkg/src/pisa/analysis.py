"""Error metrics, bound checks, FLOP accounting and score statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionConfig, check_blocks
from .block_stats import BlockStatistics
from .engine import Variant, pisa_reference
from .errors import InvalidDimension
from .router import SelectionPlan

BOUND_SLACK = 1e-9
JENSEN_RTOL = 1e-9


@dataclass
class ErrorReport:
    l1_rel: float
    l2_rel: float
    max_abs: float
    per_row_l2: np.ndarray

    def summary(self) -> dict:
        return {"l1_rel": self.l1_rel, "l2_rel": self.l2_rel, "max_abs": self.max_abs}


def compare_outputs(O_hat, O_ref) -> ErrorReport:
    O_hat = np.asarray(O_hat, np.float64)
    O_ref = np.asarray(O_ref, np.float64)
    if O_hat.shape != O_ref.shape:
        raise InvalidDimension(f"shape mismatch {O_hat.shape} vs {O_ref.shape}")
    diff = O_hat - O_ref
    ref_l1 = np.abs(O_ref).sum()
    ref_l2 = np.linalg.norm(O_ref)
    l1 = np.abs(diff).sum()
    l2 = np.linalg.norm(diff)
    return ErrorReport(
        l1_rel=float(l1 / ref_l1) if ref_l1 > 0 else float(l1 > 0) * math.inf,
        l2_rel=float(l2 / ref_l2) if ref_l2 > 0 else float(l2 > 0) * math.inf,
        max_abs=float(np.abs(diff).max()) if diff.size else 0.0,
        per_row_l2=np.linalg.norm(diff, axis=-1),
    )


def rel_linf(a, b) -> float:
    """max|a - b| / max|b| (absolute if ``b`` is all zeros)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = np.abs(b).max()
    err = np.abs(a - b).max()
    return float(err / denom) if denom > 0 else float(err)


# -- tail-fraction bound -----------------------------------------------------


@dataclass
class BoundReport:
    actual_err: np.ndarray
    bound: np.ndarray
    rho: np.ndarray
    alpha_sum: np.ndarray
    jensen_rhs: np.ndarray
    C_q: float
    M_max: float
    block_size: int
    violations: list[int]
    jensen_violations: list[int]

    @property
    def max_slack_ratio(self) -> float:
        """Largest actual/bound over rows with a positive bound."""
        pos = self.bound > 0
        return float((self.actual_err[pos] / self.bound[pos]).max()) if pos.any() else 0.0

    def summary(self) -> dict:
        return {
            "rows": int(self.actual_err.size),
            "violations": len(self.violations),
            "jensen_violations": len(self.jensen_violations),
            "max_slack_ratio": self.max_slack_ratio,
            "max_actual_err": float(self.actual_err.max()),
            "max_bound": float(self.bound.max()),
            "max_rho": float(self.rho.max()),
            "C_q": self.C_q,
            "M_max": self.M_max,
            "block_size": self.block_size,
        }


def _tail_mass(Q, K, plan: SelectionPlan, B: int, scale: float, shift: np.ndarray) -> np.ndarray:
    """Exact unselected mass sum_{j in U} sum_n exp(s q k - shift) per row."""
    N = plan.num_blocks
    Kb = np.asarray(K, np.float64).reshape(N, B, -1)
    qb = plan.query_block
    tau = np.zeros(Q.shape[0])
    for i in range(plan.num_query_blocks):
        U = plan.unselected(i)
        if U.size == 0:
            continue
        rows = slice(i * qb, (i + 1) * qb)
        s = scale * (np.asarray(Q[rows], np.float64) @ Kb[U].reshape(-1, K.shape[1]).T)
        tau[rows] = np.exp(s - shift[rows, None]).sum(axis=1)
    return tau


def theorem1_check(Q, K, V, plan: SelectionPlan, stats: BlockStatistics,
                   cfg: AttentionConfig = AttentionConfig()) -> BoundReport:
    """Compare block-wise and global first-order outputs against the tail bound.

    Both outputs share the piecewise denominator, so their difference is the
    first-order numerator error over that denominator. The bound is
    ``C_q * M_max * rho / B`` with ``C_q = scale * max_t |q_t|`` and
    ``rho = tau / D``, where ``tau`` is the exact unselected mass.
    """
    B = cfg.block_size
    check_blocks(K.shape[0], B)
    scale = cfg.scale_for(Q.shape[1])
    exact_first = pisa_reference(Q, K, V, plan, stats, Variant.BLOCK_FIRST, cfg)
    hybrid = pisa_reference(Q, K, V, plan, stats, Variant.HYBRID, cfg)
    actual = np.linalg.norm(hybrid.O - exact_first.O, axis=1)
    tau = _tail_mass(Q, K, plan, B, scale, exact_first.row_max)
    rho = tau / exact_first.D
    C_q = scale * float(np.linalg.norm(np.asarray(Q, np.float64), axis=1).max())
    M_max = stats.M_max
    bound = C_q * M_max * rho / B
    alpha_sum = exact_first.ell_tail
    jensen_rhs = tau / B
    return BoundReport(
        actual_err=actual,
        bound=bound,
        rho=rho,
        alpha_sum=alpha_sum,
        jensen_rhs=jensen_rhs,
        C_q=C_q,
        M_max=M_max,
        block_size=B,
        violations=np.flatnonzero(actual > bound + BOUND_SLACK).tolist(),
        jensen_violations=np.flatnonzero(alpha_sum > jensen_rhs * (1 + JENSEN_RTOL)).tolist(),
    )


def jensen_check(Q, K, plan: SelectionPlan, B: int, scale: float) -> int:
    """Count (row, unselected block) pairs where the centroid exponential
    exceeds the block's mean exponential by more than ``JENSEN_RTOL``.

    Compared in log space so large scores cannot overflow.
    """
    N = check_blocks(K.shape[0], B)
    Q = np.asarray(Q, np.float64)
    Kb = np.asarray(K, np.float64).reshape(N, B, -1)
    k_bar = Kb.mean(axis=1)
    qb = plan.query_block
    log_tol = math.log1p(JENSEN_RTOL)
    count = 0
    for i in range(plan.num_query_blocks):
        U = plan.unselected(i)
        if U.size == 0:
            continue
        q = Q[i * qb:(i + 1) * qb]
        lhs = scale * (q @ k_bar[U].T)
        s = scale * np.einsum("td,jnd->tjn", q, Kb[U])
        smax = s.max(axis=2)
        log_mean = smax + np.log(np.exp(s - smax[..., None]).mean(axis=2))
        count += int((lhs > log_mean + log_tol).sum())
    return count


# -- FLOP model --------------------------------------------------------------


@dataclass
class FlopReport:
    dense_flops: int
    sparse_flops: int
    pisa_flops: int
    prepare: int
    select: int
    exact: int
    zeroth: int
    first_order: int
    normalize: int

    @property
    def sparse_ratio(self) -> float:
        return self.sparse_flops / self.dense_flops

    @property
    def pisa_ratio(self) -> float:
        return self.pisa_flops / self.dense_flops

    @property
    def overhead(self) -> float:
        """Extra work of PISA over block-sparse, as a fraction of dense."""
        return (self.pisa_flops - self.sparse_flops) / self.dense_flops

    def summary(self) -> dict:
        out = asdict(self)
        out.update(sparse_ratio=self.sparse_ratio, pisa_ratio=self.pisa_ratio, overhead=self.overhead)
        return out


def flop_model(L: int, d: int, B: int, k_selected: int, variant: Variant = Variant.HYBRID) -> FlopReport:
    """Analytic FLOP counts; one multiply-add is 2 FLOPs.

    exp, max and division are not counted, so ``normalize`` is always 0 and
    is kept only to mirror the phase breakdown. Block-sparse work is
    routing plus exact blocks; PISA adds centroid/H preparation, the
    centroid (zeroth-order) scan and the first-order term.
    """
    N = check_blocks(L, B)
    if not 1 <= k_selected <= N:
        raise InvalidDimension(f"k_selected={k_selected} outside [1, {N}]")
    variant = Variant(variant)
    tail = N - k_selected
    dense = 4 * L * L * d
    select = 2 * N * N * d
    exact = 4 * L * k_selected * B * d
    prepare = zeroth = first = 0
    if variant is not Variant.SPARSE_ONLY:
        prepare = 2 * L * d
        zeroth = 4 * L * tail * d
    if variant in (Variant.HYBRID, Variant.GLOBAL_CENTROID):
        prepare += 2 * L * d * d
        first = 2 * L * d * d
        if variant is Variant.GLOBAL_CENTROID:
            first += 2 * L * d
    elif variant is Variant.BLOCK_FIRST:
        prepare += 2 * L * d * d
        first = 2 * L * tail * d * d
    sparse = select + exact
    pisa = sparse + prepare + zeroth + first
    return FlopReport(dense, sparse, pisa, prepare, select, exact, zeroth, first, 0)


# -- score distributions -----------------------------------------------------


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    counts_selected: np.ndarray
    counts_unselected: np.ndarray
    stats: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count_selected", "count_unselected"])
        for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.counts_selected, self.counts_unselected):
            w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])
        return buf.getvalue()


def _moments(x: np.ndarray) -> dict:
    if x.size == 0:
        return {"count": 0, "mean": math.nan, "std": math.nan, "skew": math.nan}
    mu = float(x.mean())
    sd = float(x.std())
    skew = float(((x - mu) ** 3).mean() / sd**3) if sd > 0 else 0.0
    return {"count": int(x.size), "mean": mu, "std": sd, "skew": skew}


def centroid_scores(Q, K, plan: SelectionPlan, B: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-by-block centroid scores split into (selected, unselected) samples."""
    N = check_blocks(K.shape[0], B)
    k_bar = np.asarray(K, np.float64).reshape(N, B, -1).mean(axis=1)
    S = scale * (np.asarray(Q, np.float64) @ k_bar.T)
    rows_mask = np.repeat(plan.mask(), plan.query_block, axis=0)
    return S[rows_mask], S[~rows_mask]


def score_histogram(Q, K, plan: SelectionPlan, B: int, scale: float, bins: int = 50) -> ScoreHistogram:
    sel, unsel = centroid_scores(Q, K, plan, B, scale)
    both = np.concatenate([sel, unsel])
    edges = np.histogram_bin_edges(both, bins=bins)
    return ScoreHistogram(
        edges=edges,
        counts_selected=np.histogram(sel, bins=edges)[0],
        counts_unselected=np.histogram(unsel, bins=edges)[0],
        stats={"selected": _moments(sel), "unselected": _moments(unsel)},
    )


def to_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
