"""Command-line harness: ``pisa {gen,run,sweep,verify,bench}``.

Exit codes: 0 success, 1 invariant failure, 2 usage or validation error,
3 I/O error. JSON goes to stdout with flat keys. With ``--deterministic``
timings are reported as 0 so that outputs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .analysis import compare_outputs, flop_model, score_histogram
from .attention import AttentionConfig, check_blocks, dense_naive, dense_online
from .checks import CHECKS, check_constant_key
from .engine import PHASES, Variant, run_head
from .errors import FormatError, InvalidDimension, PisaError
from .router import DEFAULT_EPSILON, Strategy, sparsity_to_k
from .tensor_io import DType, TensorBundle, gen_clustered, gen_gaussian, load_bundle, save_bundle

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

CSV_COLUMNS = (
    "seed", "head", "method", "strategy", "seq_len", "block_size",
    "sparsity_requested", "sparsity_realized", "l1_rel", "l2_rel", "max_abs",
    "flops_ratio", "wall_ms", "status",
)


class UsageError(Exception):
    pass


def _blas_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


def _pool_size(arg: int | None) -> int:
    if arg:
        return arg
    env = os.environ.get("PISA_THREADS")
    return max(1, int(env)) if env else 1


def _int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- data generation ---------------------------------------------------------


def _add_gen_args(p: argparse.ArgumentParser, with_len: bool = True) -> None:
    p.add_argument("--kind", choices=("gaussian", "clustered"), default="clustered")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=1)
    if with_len:
        p.add_argument("--len", dest="length", type=int, default=2048)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--concentration", type=float, default=4.0)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--kv-coupling", type=float, default=0.0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")


def _generate(args, seed: int, length: int) -> TensorBundle:
    dtype = DType.parse(args.dtype)
    if args.kind == "gaussian":
        return gen_gaussian(seed, args.heads, length, args.dim, args.std, dtype)
    return gen_clustered(seed, args.heads, length, args.dim, args.clusters, args.concentration,
                         args.noise_std, args.kv_coupling, dtype)


def cmd_gen(args) -> int:
    if args.block is not None:
        check_blocks(args.length, args.block)
    bundle = _generate(args, args.seed, args.length)
    try:
        n = save_bundle(bundle, args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    _emit({**bundle.header(), "path": str(args.out), "bytes_written": n, "seed": args.seed, "kind": args.kind})
    return EXIT_OK


# -- single runs -------------------------------------------------------------


def _config(args) -> AttentionConfig:
    return AttentionConfig(block_size=args.block, group_size=args.group,
                           accum="f32" if args.dtype == "f32" else "f64",
                           deterministic=args.deterministic)


def _evaluate(bundle: TensorBundle, r: float, variant: Variant, strategy: Strategy,
              cfg: AttentionConfig, epsilon: float, path: str, refs: list[np.ndarray]) -> list[dict]:
    """One dict per head with error metrics, FLOP ratios and phase timings."""
    rows = []
    for h in range(bundle.num_heads):
        Q, K, V = bundle.head(h)
        t0 = time.perf_counter()
        res = run_head(Q, K, V, r, strategy, variant, cfg, path, epsilon)
        wall = time.perf_counter() - t0
        err = compare_outputs(res.output.O, refs[h])
        flops = flop_model(bundle.seq_len, bundle.head_dim, cfg.block_size, res.plan.k, variant)
        rows.append({
            "head": h,
            "plan": res.plan,
            "sparsity_realized": res.plan.realized_sparsity,
            **err.summary(),
            "flops_ratio": flops.pisa_ratio,
            "sparse_flops_ratio": flops.sparse_ratio,
            "wall_ms": 1e3 * wall,
            **{f"wall_ms_{p}": 1e3 * res.timings.get(p, 0.0) for p in PHASES},
        })
    return rows


def _load_or_generate(args) -> TensorBundle:
    if args.input:
        return load_bundle(args.input)
    return _generate(args, args.seed, args.length)


def cmd_run(args) -> int:
    bundle = _load_or_generate(args)
    cfg = _config(args)
    check_blocks(bundle.seq_len, cfg.block_size)
    if args.dtype == "f32" and bundle.dtype is DType.F64:
        bundle = TensorBundle(*(a.astype(np.float32) for a in (bundle.q, bundle.k, bundle.v)))
    variant, strategy = Variant(args.variant), Strategy(args.strategy)
    refs = [dense_naive(*bundle.head(h), cfg.scale) for h in range(bundle.num_heads)]
    with _blas_limit(args.deterministic):
        rows = _evaluate(bundle, args.sparsity, variant, strategy, cfg, args.epsilon, args.path, refs)

    report = {
        "variant": variant.value,
        "strategy": strategy.value,
        "seq_len": bundle.seq_len,
        "head_dim": bundle.head_dim,
        "heads": bundle.num_heads,
        "block_size": cfg.block_size,
        "sparsity_requested": args.sparsity,
        "sparsity_realized": rows[0]["sparsity_realized"],
        "flops_ratio": rows[0]["flops_ratio"],
        "sparse_flops_ratio": rows[0]["sparse_flops_ratio"],
        "l1_rel_per_head": [r["l1_rel"] for r in rows],
    }
    for key in ("l1_rel", "l2_rel", "max_abs", "wall_ms", *(f"wall_ms_{p}" for p in PHASES)):
        vals = [r[key] for r in rows]
        report[key] = max(vals) if key == "max_abs" else float(np.mean(vals)) if key.startswith(("l1", "l2")) else float(np.sum(vals))
    if args.deterministic:
        for key in [k for k in report if k.startswith("wall_ms")]:
            report[key] = 0.0
    if args.plan_out:
        with open(args.plan_out, "w") as fh:
            fh.write(rows[0]["plan"].to_json())
    if args.hist_out:
        Q, K, _ = bundle.head(0)
        hist = score_histogram(Q, K, rows[0]["plan"], cfg.block_size, cfg.scale_for(bundle.head_dim), args.bins)
        with open(args.hist_out, "w", newline="") as fh:
            fh.write(hist.to_csv())
        for cls, st in hist.stats.items():
            report.update({f"score_{cls}_{k}": v for k, v in st.items()})
    _emit(report)
    return EXIT_OK


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepSpec:
    lengths: list[int]
    sparsities: list[float]
    variants: list[Variant]
    seeds: list[int]
    block_size: int = 64
    group_size: int = 8
    head_dim: int = 64
    heads: int = 1
    strategy: Strategy = Strategy.PLAIN
    dtype: str = "f64"
    generator: dict = field(default_factory=lambda: {"kind": "clustered"})
    epsilon: float = DEFAULT_EPSILON
    input_path: str | None = None

    def __post_init__(self):
        for L in self.lengths:
            check_blocks(L, self.block_size)
        for r in self.sparsities:
            if not 0 <= r < 1:
                raise InvalidDimension(f"sparsity {r} outside [0, 1)")
        self.variants = [Variant(v) for v in self.variants]
        self.strategy = Strategy(self.strategy)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _sweep_cell(spec: SweepSpec, gen_args, seed: int, length: int, deterministic: bool) -> list[tuple]:
    cfg = AttentionConfig(block_size=spec.block_size, group_size=spec.group_size,
                          accum="f32" if spec.dtype == "f32" else "f64", deterministic=deterministic)
    if spec.input_path:
        bundle = load_bundle(spec.input_path)
    else:
        bundle = _generate(gen_args, seed, length)
    refs = [dense_naive(*bundle.head(h)) for h in range(bundle.num_heads)]
    out = []
    for si, r in enumerate(spec.sparsities):
        for vi, variant in enumerate(spec.variants):
            try:
                rows = _evaluate(bundle, r, variant, spec.strategy, cfg, spec.epsilon, "auto", refs)
            except PisaError as exc:
                rows = [{"head": h, "status": type(exc).__name__} for h in range(bundle.num_heads)]
            for row in rows:
                values = {
                    "seed": seed, "head": row["head"], "method": variant.value,
                    "strategy": spec.strategy.value, "seq_len": bundle.seq_len,
                    "block_size": spec.block_size, "sparsity_requested": r,
                    "sparsity_realized": row.get("sparsity_realized", ""),
                    "l1_rel": row.get("l1_rel", ""), "l2_rel": row.get("l2_rel", ""),
                    "max_abs": row.get("max_abs", ""), "flops_ratio": row.get("flops_ratio", ""),
                    "wall_ms": 0.0 if deterministic else row.get("wall_ms", ""),
                    "status": row.get("status", "ok"),
                }
                key = (seed, row["head"], length, si, vi)
                out.append((key, [_fmt(values[c]) for c in CSV_COLUMNS]))
    return out


def run_sweep(spec: SweepSpec, gen_args, deterministic: bool = False, threads: int = 1) -> str:
    """Return the sweep as CSV text; rows are ordered by (seed, head, length, sparsity, variant)."""
    seed_pos = {s: i for i, s in enumerate(spec.seeds)}
    len_pos = {L: i for i, L in enumerate(spec.lengths)}
    cells = [(s, L) for s in spec.seeds for L in spec.lengths]

    def work(cell):
        return _sweep_cell(spec, gen_args, cell[0], cell[1], deterministic)

    with _blas_limit(deterministic):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, cells))
        else:
            results = [work(c) for c in cells]
    rows = [r for cell in results for r in cell]
    rows.sort(key=lambda kr: (seed_pos[kr[0][0]], kr[0][1], len_pos[kr[0][2]], kr[0][3], kr[0][4]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(r for _, r in rows)
    return buf.getvalue()


def _spec_from_args(args) -> SweepSpec:
    if args.spec:
        with open(args.spec) as fh:
            raw = json.load(fh)
        return SweepSpec(**raw)
    return SweepSpec(
        lengths=_int_list(args.lengths), sparsities=_float_list(args.sparsities),
        variants=[v.strip() for v in args.variants.split(",")], seeds=_int_list(args.seeds),
        block_size=args.block, group_size=args.group, head_dim=args.dim, heads=args.heads,
        strategy=args.strategy, dtype=args.dtype, epsilon=args.epsilon, input_path=args.input,
        generator={"kind": args.kind},
    )


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    args.dim, args.heads, args.dtype = spec.head_dim, spec.heads, spec.dtype
    for k, v in spec.generator.items():
        setattr(args, k.replace("-", "_"), v)
    text = run_sweep(spec, args, args.deterministic, _pool_size(args.threads))
    if args.out and args.out != "-":
        try:
            with open(args.out, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO
        _emit({"rows": text.count("\n") - 1, "path": args.out})
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- verification ------------------------------------------------------------


def cmd_verify(args) -> int:
    names = [n.strip() for n in args.only.split(",")] if args.only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; choose from {sorted(CHECKS)}")
    failed = []
    print(f"{'check':<16}{'result':<8}detail")
    for name in names:
        fn = CHECKS[name]
        kwargs = {}
        if args.seeds is not None:
            kwargs["seeds"] = range(args.seeds)
        if name == "constant_key" and args.mutate == "drop-block-factor":
            result = check_constant_key(**kwargs, cfg=AttentionConfig(block_size=16, group_size=4,
                                                                     centroid_weight="unit"))
        else:
            result = fn(**kwargs)
        status = "pass" if result.passed else "FAIL"
        print(f"{name:<16}{status:<8}{json.dumps(result.detail, sort_keys=True)}")
        if not result.passed:
            failed.append(name)
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- benchmark ---------------------------------------------------------------


def _median_time(fn, reps: int, warmup: int) -> tuple[float, list]:
    for _ in range(warmup):
        fn()
    times, extras = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        extras.append(fn())
        times.append(time.perf_counter() - t0)
    return statistics.median(times), extras


def cmd_bench(args) -> int:
    if args.reps < 5:
        raise UsageError("--reps must be at least 5")
    cfg = _config(args)
    check_blocks(args.length, cfg.block_size)
    args.heads = 1
    bundle = _generate(args, args.seed, args.length)
    Q, K, V = bundle.head(0)
    results = {}
    dense_s, _ = _median_time(lambda: dense_online(Q, K, V, cfg), args.reps, args.warmup)
    results["dense_online"] = {"wall_ms": 1e3 * dense_s}
    for name in args.variants.split(","):
        variant = Variant(name.strip())

        def once():
            return run_head(Q, K, V, args.sparsity, Strategy(args.strategy), variant, cfg).timings

        total, timings = _median_time(once, args.reps, args.warmup)
        phases = {p: 1e3 * statistics.median(t.get(p, 0.0) for t in timings) for p in PHASES}
        entry = {"wall_ms": 1e3 * total, **{f"{p}_ms": v for p, v in phases.items()}}
        entry["approx_share_pct"] = 100 * phases["approx"] / max(sum(phases.values()), 1e-12)
        entry["speedup_vs_dense_online"] = dense_s / total
        results[variant.value] = entry
    print(f"{'method':<18}{'wall_ms':>12}{'speedup':>10}{'approx%':>10}")
    for name, e in results.items():
        print(f"{name:<18}{e['wall_ms']:>12.2f}{e.get('speedup_vs_dense_online', 1.0):>10.2f}"
              f"{e.get('approx_share_pct', float('nan')):>10.1f}")
    flat = {"seq_len": args.length, "block_size": cfg.block_size, "head_dim": args.dim,
            "sparsity": args.sparsity, "dtype": args.dtype, "reps": args.reps}
    for name, e in results.items():
        flat.update({f"{name}_{k}": v for k, v in e.items()})
    _emit(flat)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--group", type=int, default=8)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="plain")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--deterministic", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pisa", description="Piecewise sparse attention: generate, run, sweep, verify, bench.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic PQKV file")
    _add_gen_args(p)
    p.add_argument("--block", type=int, default=None, help="validate len against this block size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run one variant at one sparsity and report errors")
    _add_gen_args(p)
    _add_run_args(p)
    p.add_argument("--in", dest="input")
    p.add_argument("--variant", choices=[v.value for v in Variant], default="hybrid")
    p.add_argument("--sparsity", type=float, default=0.875)
    p.add_argument("--path", choices=("auto", "reference", "streaming"), default="auto")
    p.add_argument("--plan-out")
    p.add_argument("--hist-out", help="write selected/unselected score histogram CSV")
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="error/FLOP grid over lengths x sparsities x variants")
    _add_gen_args(p, with_len=False)
    _add_run_args(p)
    p.add_argument("--spec", help="JSON file with SweepSpec fields (overrides grid flags)")
    p.add_argument("--lengths", default="1024,2048")
    p.add_argument("--sparsities", default="0.5,0.875")
    p.add_argument("--variants", default="sparse_only,zeroth,hybrid")
    p.add_argument("--seeds", default="0")
    p.add_argument("--in", dest="input")
    p.add_argument("--threads", type=int, default=None, help="pool size (default: $PISA_THREADS or 1)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--only", help="comma-separated subset of: " + ",".join(CHECKS))
    p.add_argument("--seeds", type=int, default=None, help="seed count for every selected check")
    p.add_argument("--mutate", choices=("drop-block-factor",), help=argparse.SUPPRESS)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="wall-clock per phase versus dense online softmax")
    _add_gen_args(p)
    _add_run_args(p)
    p.add_argument("--sparsity", type=float, default=0.875)
    p.add_argument("--variants", default="hybrid,sparse_only")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench, length=16384, dtype="f32")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PisaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
