"""Invariant checks run by ``pisa verify``.

Each check self-generates its data from fixed seeds and returns a
``CheckResult``; nothing here asserts wall-clock behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import jensen_check, rel_linf, theorem1_check
from .attention import AttentionConfig, dense_naive, dense_online
from .block_stats import prepare
from .engine import Variant, build_plan, pisa_reference, pisa_streaming
from .router import SelectionPlan, Strategy, covariance_scores, select_topk_covariance, select_topk_plain, sparsity_to_k, topk_plan
from .tensor_io import gen_clustered, gen_gaussian, make_rng, qk_normalize


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)


def constant_key_blocks(K: np.ndarray, B: int) -> np.ndarray:
    """Replace every key row by its block centroid."""
    N = K.shape[0] // B
    k_bar = K.reshape(N, B, -1).mean(axis=1)
    return np.repeat(k_bar, B, axis=0).astype(K.dtype)


def random_plan(seed: int, n_q: int, N: int, k: int, query_block: int) -> SelectionPlan:
    rng = make_rng(seed)
    sel = tuple(tuple(sorted(int(j) for j in rng.choice(N, size=k, replace=False))) for _ in range(n_q))
    return SelectionPlan(sel, N, query_block)


def cancellation_residual(Q, K, plan: SelectionPlan, out, cfg: AttentionConfig) -> np.ndarray:
    """Relative change of D if the first-order denominator term were added.

    The term is sum_{j in U} a_j * (s q . sum_n (k_jn - kbar_j)), which is
    zero up to rounding because keys are centred on their block mean.
    """
    B, qb = cfg.block_size, plan.query_block
    N = K.shape[0] // B
    scale = cfg.scale_for(Q.shape[1])
    Kb = np.asarray(K, np.float64).reshape(N, B, -1)
    k_bar = Kb.mean(axis=1)
    centred_sum = (Kb - k_bar[:, None, :]).sum(axis=1)
    rel = np.zeros(Q.shape[0])
    for i in range(plan.num_query_blocks):
        U = plan.unselected(i)
        if U.size == 0:
            continue
        rows = slice(i * qb, (i + 1) * qb)
        q = np.asarray(Q[rows], np.float64)
        a = np.exp(scale * (q @ k_bar[U].T) - out.row_max[rows, None])
        term = (a * (scale * (q @ centred_sum[U].T))).sum(axis=1)
        rel[rows] = np.abs(term) / out.D[rows]
    return rel


def check_oracle(seeds=range(10), lengths=(64, 256)) -> CheckResult:
    worst = {"f64": 0.0, "f32": 0.0}
    for seed in seeds:
        for L in lengths:
            Q, K, V = gen_gaussian(seed, 1, L, 16).head(0)
            ref = dense_naive(Q, K, V)
            worst["f64"] = max(worst["f64"], rel_linf(dense_online(Q, K, V, AttentionConfig(block_size=16)), ref))
            f32 = [a.astype(np.float32) for a in (Q, K, V)]
            worst["f32"] = max(worst["f32"], rel_linf(
                dense_online(*f32, AttentionConfig(block_size=16, accum="f32")), dense_naive(*f32)))
    return CheckResult("oracle", worst["f64"] <= 1e-12 and worst["f32"] <= 1e-5, worst)


def check_full_coverage(seeds=range(5), L=256, B=16, d=16) -> CheckResult:
    cfg = AttentionConfig(block_size=B, group_size=4)
    worst = 0.0
    for seed in seeds:
        Q, K, V = gen_clustered(seed, 1, L, d).head(0)
        ref = dense_naive(Q, K, V)
        stats = prepare(Q, K, V, B)
        plan = SelectionPlan.full(L // B, L // B, B)
        for v in Variant:
            worst = max(worst, rel_linf(pisa_reference(Q, K, V, plan, stats, v, cfg).O, ref))
        worst = max(worst, rel_linf(pisa_streaming(Q, K, V, plan, stats, cfg).O, ref))
    return CheckResult("full_coverage", worst <= 1e-10, {"max_rel_linf": worst})


def check_constant_key(seeds=range(5), L=256, B=16, d=16, cfg: AttentionConfig | None = None) -> CheckResult:
    cfg = cfg or AttentionConfig(block_size=B, group_size=4)
    N = L // B
    worst = 0.0
    for seed in seeds:
        Q, K, V = gen_gaussian(seed, 1, L, d).head(0)
        K = constant_key_blocks(K, B)
        ref = dense_naive(Q, K, V)
        stats = prepare(Q, K, V, B)
        plan = random_plan(seed, N, N, N // 4, B)
        for v in (Variant.ZEROTH, Variant.BLOCK_FIRST, Variant.HYBRID):
            worst = max(worst, rel_linf(pisa_reference(Q, K, V, plan, stats, v, cfg).O, ref))
        worst = max(worst, rel_linf(pisa_streaming(Q, K, V, plan, stats, cfg).O, ref))
    return CheckResult("constant_key", worst <= 1e-6, {"max_rel_linf": worst})


def check_cancellation(seeds=range(5), L=256, B=16, d=16) -> CheckResult:
    cfg = AttentionConfig(block_size=B)
    worst = 0.0
    for seed in seeds:
        Q, K, V = gen_clustered(seed, 1, L, d).head(0)
        stats = prepare(Q, K, V, B)
        plan = build_plan(stats, sparsity_to_k(0.75, L // B), Strategy.PLAIN, cfg, d)
        out = pisa_reference(Q, K, V, plan, stats, Variant.HYBRID, cfg)
        worst = max(worst, float(cancellation_residual(Q, K, plan, out, cfg).max()))
    return CheckResult("cancellation", worst <= 1e-5, {"max_rel_change": worst})


def theorem1_suite(seeds=range(100), L=512, B=16, d=32, r=0.875) -> dict:
    cfg = AttentionConfig(block_size=B)
    k = sparsity_to_k(r, L // B)
    tally = {"seeds": 0, "rows": 0, "violations": 0, "jensen_violations": 0,
             "jensen_pair_violations": 0, "max_slack_ratio": 0.0}
    for seed in seeds:
        Q, K, V = qk_normalize(gen_gaussian(seed, 1, L, d)).head(0)
        stats = prepare(Q, K, V, B)
        plan = build_plan(stats, k, Strategy.PLAIN, cfg, d)
        rep = theorem1_check(Q, K, V, plan, stats, cfg)
        tally["seeds"] += 1
        tally["rows"] += rep.actual_err.size
        tally["violations"] += len(rep.violations)
        tally["jensen_violations"] += len(rep.jensen_violations)
        tally["jensen_pair_violations"] += jensen_check(Q, K, plan, B, cfg.scale_for(d))
        tally["max_slack_ratio"] = max(tally["max_slack_ratio"], rep.max_slack_ratio)
    return tally


def check_theorem1(seeds=range(100)) -> CheckResult:
    t = theorem1_suite(seeds)
    return CheckResult("theorem1", t["violations"] == 0, t)


def check_jensen(seeds=range(100)) -> CheckResult:
    t = theorem1_suite(seeds)
    ok = t["jensen_violations"] == 0 and t["jensen_pair_violations"] == 0
    return CheckResult("jensen", ok, {k: t[k] for k in ("seeds", "rows", "jensen_violations", "jensen_pair_violations")})


def check_streaming(seeds=range(10), L=256, B=16, d=16) -> CheckResult:
    N = L // B
    worst = {"f64": 0.0, "f32": 0.0}
    for seed in seeds:
        Q, K, V = gen_clustered(seed, 1, L, d).head(0)
        stats = prepare(Q, K, V, B)
        plan = build_plan(stats, sparsity_to_k(0.75, N), Strategy.PLAIN, AttentionConfig(block_size=B), d)
        ref = pisa_reference(Q, K, V, plan, stats, Variant.HYBRID, AttentionConfig(block_size=B)).O
        f32 = [a.astype(np.float32) for a in (Q, K, V)]
        for C in (1, 4, N):
            out = pisa_streaming(Q, K, V, plan, stats, AttentionConfig(block_size=B, group_size=C))
            worst["f64"] = max(worst["f64"], rel_linf(out.O, ref))
            out = pisa_streaming(*f32, plan, stats, AttentionConfig(block_size=B, group_size=C, accum="f32"))
            worst["f32"] = max(worst["f32"], rel_linf(out.O, ref))
    return CheckResult("streaming", worst["f64"] <= 1e-10 and worst["f32"] <= 1e-4, worst)


def check_router(seeds=range(10), L=256, B=16, d=16) -> CheckResult:
    N = L // B
    failures = []
    for seed in seeds:
        Q, K, V = gen_clustered(seed, 1, L, d).head(0)
        stats = prepare(Q, K, V, B)
        scale = 1 / np.sqrt(d)
        k = 4
        base = select_topk_covariance(stats.q_bar, stats.k_bar, stats.M, 1e-6, k, scale, B)
        raw = covariance_scores(stats.q_bar, stats.k_bar, stats.M, 1e-6, scale)
        soft = np.exp(raw - raw.max(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        if topk_plan(soft, k, B, Strategy.COVARIANCE).selected != base.selected:
            failures.append(f"softmax seed={seed}")
        c = 7.5
        scaled = select_topk_covariance(stats.q_bar, stats.k_bar, c * stats.M, c * 1e-6, k, scale, B)
        if scaled.selected != base.selected:
            failures.append(f"joint-scaling seed={seed}")
    # all-zero scores: ties go to the lowest indices
    tie = select_topk_plain(np.zeros((3, d)), np.ones((N, d)), 5, 1.0, B)
    if any(s != (0, 1, 2, 3, 4) for s in tie.selected):
        failures.append("tie-break")
    return CheckResult("router", not failures, {"failures": failures})


CHECKS = {
    "oracle": check_oracle,
    "full_coverage": check_full_coverage,
    "constant_key": check_constant_key,
    "cancellation": check_cancellation,
    "theorem1": check_theorem1,
    "jensen": check_jensen,
    "streaming": check_streaming,
    "router": check_router,
}
