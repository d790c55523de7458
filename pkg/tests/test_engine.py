import numpy as np
import pytest

from oracles import piecewise_loop
from pisa.analysis import compare_outputs, rel_linf
from pisa.attention import AttentionConfig, dense_naive
from pisa.block_stats import prepare
from pisa.checks import cancellation_residual, constant_key_blocks, random_plan
from pisa.engine import Variant, build_plan, pisa_multihead, pisa_reference, pisa_streaming, run_head
from pisa.errors import BlockDivisibility, EmptySelection, InvalidDimension, NumericalOverflow
from pisa.router import SelectionPlan, Strategy, sparsity_to_k
from pisa.tensor_io import TensorBundle, gen_clustered, gen_gaussian

CFG16 = AttentionConfig(block_size=16, group_size=4)


def setup(seed=0, L=128, d=8, B=16, k=3, kind=gen_clustered):
    Q, K, V = kind(seed, 1, L, d).head(0)
    stats = prepare(Q, K, V, B)
    plan = build_plan(stats, k, Strategy.PLAIN, AttentionConfig(block_size=B), d)
    return Q, K, V, stats, plan


@pytest.mark.parametrize("variant", ["sparse_only", "zeroth", "block_first", "hybrid"])
def test_reference_matches_loop_oracle(variant):
    Q, K, V, stats, plan = setup(seed=1, L=64, d=4, B=8, k=2, kind=gen_gaussian)
    cfg = AttentionConfig(block_size=8)
    out = pisa_reference(Q, K, V, plan, stats, variant, cfg)
    np.testing.assert_allclose(out.O, piecewise_loop(Q, K, V, plan, 8, variant), rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", list(Variant))
def test_full_coverage_equals_dense(variant):
    Q, K, V = gen_clustered(2, 1, 128, 8).head(0)
    stats = prepare(Q, K, V, 16)
    out = pisa_reference(Q, K, V, SelectionPlan.full(8, 8, 16), stats, variant, CFG16)
    assert rel_linf(out.O, dense_naive(Q, K, V)) <= 1e-10
    assert np.all(out.ell_tail == 0) and np.all(out.tail_mass == 0)


@pytest.mark.parametrize("variant", ["zeroth", "block_first", "hybrid"])
def test_constant_key_blocks_are_exact(variant):
    Q, K, V = gen_gaussian(3, 1, 128, 8).head(0)
    K = constant_key_blocks(K, 16)
    stats = prepare(Q, K, V, 16)
    plan = random_plan(3, 8, 8, 2, 16)
    out = pisa_reference(Q, K, V, plan, stats, variant, CFG16)
    assert rel_linf(out.O, dense_naive(Q, K, V)) <= 1e-6


def test_constant_key_breaks_without_block_factor():
    Q, K, V = gen_gaussian(3, 1, 128, 8).head(0)
    K = constant_key_blocks(K, 16)
    stats = prepare(Q, K, V, 16)
    plan = random_plan(3, 8, 8, 2, 16)
    out = pisa_reference(Q, K, V, plan, stats, "zeroth", CFG16.with_(centroid_weight="unit"))
    assert rel_linf(out.O, dense_naive(Q, K, V)) > 1e-2


def test_error_ordering_on_clustered_instance():
    Q, K, V = gen_clustered(0, 1, 512, 32).head(0)
    ref = dense_naive(Q, K, V)
    stats = prepare(Q, K, V, 16)
    plan = build_plan(stats, sparsity_to_k(0.875, 32), Strategy.PLAIN, CFG16, 32)
    err = {v: compare_outputs(pisa_reference(Q, K, V, plan, stats, v, CFG16).O, ref).l1_rel
           for v in ("sparse_only", "zeroth", "hybrid")}
    assert err["hybrid"] < err["zeroth"] < err["sparse_only"]


def test_sparse_only_diagnostics():
    Q, K, V, stats, plan = setup()
    out = pisa_reference(Q, K, V, plan, stats, "sparse_only", CFG16)
    assert np.all(out.tail_mass == 0)
    assert np.all(out.D > 0)


def test_denominator_cancellation():
    for seed in range(3):
        Q, K, V, stats, plan = setup(seed=seed)
        out = pisa_reference(Q, K, V, plan, stats, "hybrid", CFG16)
        assert cancellation_residual(Q, K, plan, out, CFG16).max() <= 1e-5


def test_zeroth_preserves_constant_value_column():
    Q, K, V, stats, plan = setup(seed=4)
    V = V.copy()
    V[:, 1] = -2.5
    stats = prepare(Q, K, V, 16)
    out = pisa_reference(Q, K, V, plan, stats, "zeroth", CFG16)
    np.testing.assert_allclose(out.O[:, 1], -2.5, rtol=0, atol=1e-6)


def test_hybrid_constant_column_within_bound():
    from pisa.analysis import theorem1_check

    Q, K, V, stats, plan = setup(seed=5)
    V = V.copy()
    V[:, 1] = 0.75
    stats = prepare(Q, K, V, 16)
    rep = theorem1_check(Q, K, V, plan, stats, CFG16)
    out = pisa_reference(Q, K, V, plan, stats, "hybrid", CFG16)
    # block-wise first order leaves a constant column exact (H_j column is zero)
    assert np.all(np.abs(out.O[:, 1] - 0.75) <= rep.bound + 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_streaming_equals_reference(seed):
    Q, K, V, stats, plan = setup(seed=seed, L=256, d=16, k=4)
    ref = pisa_reference(Q, K, V, plan, stats, "hybrid", CFG16)
    for C in (1, 4, 16):
        out = pisa_streaming(Q, K, V, plan, stats, CFG16.with_(group_size=C))
        assert rel_linf(out.O, ref.O) <= 1e-10
        assert rel_linf(out.D, ref.D) <= 1e-10
        np.testing.assert_allclose(out.row_max, ref.row_max, rtol=1e-12)
        assert out.running_max_used and not ref.running_max_used


def test_streaming_group_size_irrelevant():
    Q, K, V, stats, plan = setup(seed=7, L=256, d=16, k=4)
    one = pisa_streaming(Q, K, V, plan, stats, CFG16.with_(group_size=1)).O
    all_ = pisa_streaming(Q, K, V, plan, stats, CFG16.with_(group_size=16)).O
    assert rel_linf(one, all_) <= 1e-10


def test_streaming_extreme_score_f32():
    Q, K, V, stats, plan = setup(seed=8, L=128, d=8, k=2)
    Q = Q.astype(np.float32).copy()
    K = K.astype(np.float32).copy()
    V = V.astype(np.float32)
    Q[5] = 0
    Q[5, 0] = 16.0
    K[40] = 0
    K[40, 0] = 14.142136  # 16 * 14.142136 / sqrt(8) = 80
    stats = prepare(Q, K, V, 16)
    plan = build_plan(stats, 2, Strategy.PLAIN, CFG16, 8)
    ref = pisa_reference(Q, K, V, plan, stats, "hybrid", CFG16)
    out = pisa_streaming(Q, K, V, plan, stats, CFG16.with_(accum="f32"))
    assert np.isfinite(out.O).all()
    assert rel_linf(out.O, ref.O) <= 1e-4


def test_literal_phase3_differs_by_block_factor():
    Q, K, V, stats, plan = setup(seed=9)
    mean = pisa_streaming(Q, K, V, plan, stats, CFG16)
    lit = pisa_streaming(Q, K, V, plan, stats, CFG16.with_(phase3="literal"))
    zeroth = pisa_reference(Q, K, V, plan, stats, "zeroth", CFG16)
    # correction term scales by exactly 1/B
    np.testing.assert_allclose(lit.O - zeroth.O, (mean.O - zeroth.O) / 16, atol=1e-12)


def test_global_centroid_uses_smaller_slope():
    Q, K, V, stats, plan = setup(seed=10)
    gc = pisa_reference(Q, K, V, plan, stats, "global_centroid", CFG16)
    assert gc.O.shape == Q.shape and np.isfinite(gc.O).all()


def test_errors():
    Q, K, V, stats, plan = setup()
    with pytest.raises(BlockDivisibility):
        pisa_reference(Q[:120], K[:120], V[:120], plan, stats, "hybrid", CFG16)
    with pytest.raises(InvalidDimension):
        pisa_reference(Q, K, V, plan, stats, "hybrid", AttentionConfig(block_size=32))

    class Hollow:
        selected = ((0,),) * 7 + ((),)
        num_blocks = 8
        num_query_blocks = 8
        query_block = 16

        def unselected(self, i):
            return np.arange(1, 8)

    with pytest.raises(EmptySelection):
        pisa_reference(Q, K, V, Hollow(), stats, "hybrid", CFG16)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_reported_with_row():
    Q, K, V, stats, plan = setup()
    # statistics come from clean values; the exact pass sees values whose weighted sum overflows
    V = np.full_like(V, 1.5e308)
    with pytest.raises(NumericalOverflow) as exc:
        pisa_reference(Q, K, V, plan, stats, "sparse_only", CFG16)
    assert exc.value.row >= 0


def test_multihead_identical_heads():
    Q, K, V = gen_clustered(0, 1, 128, 8).head(0)
    b = TensorBundle(np.stack([Q, Q]), np.stack([K, K]), np.stack([V, V]))
    res = pisa_multihead(b, 0.75, cfg=CFG16)
    assert res.outputs[0].O.tobytes() == res.outputs[1].O.tobytes()
    assert res.realized_sparsity == 0.75


def test_multihead_dense_at_zero_sparsity():
    b = gen_clustered(1, 2, 128, 8)
    for variant in Variant:
        res = pisa_multihead(b, 0.0, variant=variant, cfg=CFG16)
        for h, out in enumerate(res.outputs):
            assert rel_linf(out.O, dense_naive(*b.head(h))) <= 1e-10


def test_multihead_threads_bitwise_equal():
    b = gen_clustered(2, 3, 256, 16)
    serial = pisa_multihead(b, 0.75, cfg=CFG16)
    pooled = pisa_multihead(b, 0.75, cfg=CFG16, threads=3)
    for a, c in zip(serial.outputs, pooled.outputs):
        assert a.O.tobytes() == c.O.tobytes()


def test_run_head_paths_and_timings():
    Q, K, V = gen_clustered(0, 1, 256, 16).head(0)
    s = run_head(Q, K, V, 0.75, cfg=CFG16)
    r = run_head(Q, K, V, 0.75, cfg=CFG16, path="reference")
    assert rel_linf(s.output.O, r.output.O) <= 1e-10
    assert {"prepare", "select", "exact", "approx", "normalize"} <= set(s.timings)
    with pytest.raises(ValueError):
        run_head(Q, K, V, 0.75, variant="zeroth", cfg=CFG16, path="streaming")
    cov = run_head(Q, K, V, 0.75, strategy="covariance", cfg=CFG16)
    assert cov.plan.strategy is Strategy.COVARIANCE
