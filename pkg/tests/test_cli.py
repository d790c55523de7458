import csv
import io
import json

import pytest

from pisa import cli
from pisa.errors import NumericalOverflow
from pisa.tensor_io import gen_clustered, load_bundle


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_gen_roundtrip(tmp_path, capsys):
    path = tmp_path / "a.pqkv"
    code, out, _ = run_cli(capsys, "gen", "--seed", "3", "--heads", "2", "--len", "128", "--dim", "8",
                           "--out", str(path))
    assert code == 0
    info = last_json(out)
    assert info["bytes_written"] == path.stat().st_size == 24 + 3 * 2 * 128 * 8 * 8
    assert load_bundle(path) == gen_clustered(3, 2, 128, 8)


def test_gen_is_byte_identical(tmp_path, capsys):
    paths = [tmp_path / f"{i}.pqkv" for i in range(2)]
    for p in paths:
        assert run_cli(capsys, "gen", "--kind", "gaussian", "--len", "64", "--dim", "4", "--out", str(p))[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_gen_divisibility_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "gen", "--len", "100", "--block", "64", "--out", str(tmp_path / "x"))
    assert code == 2
    assert "not divisible" in err


def test_gen_unwritable_path(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "gen", "--len", "64", "--dim", "4", "--out", str(tmp_path / "no" / "x.pqkv"))
    assert code == 3


def test_run_missing_input(tmp_path, capsys):
    assert run_cli(capsys, "run", "--in", str(tmp_path / "missing.pqkv"))[0] == 3


def test_run_corrupt_input(tmp_path, capsys):
    bad = tmp_path / "bad.pqkv"
    bad.write_bytes(b"NOPE" + bytes(40))
    code, _, err = run_cli(capsys, "run", "--in", str(bad))
    assert code == 3 and "BadMagic" in err


def test_usage_error_from_argparse(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--variant", "nope"])
    assert exc.value.code == 2


RUN_KEYS = {"l1_rel", "l2_rel", "max_abs", "flops_ratio", "sparse_flops_ratio", "wall_ms",
            "sparsity_realized", "l1_rel_per_head", "wall_ms_exact", "wall_ms_approx"}


def test_run_reports_flat_json(tmp_path, capsys):
    plan_path, hist_path = tmp_path / "plan.json", tmp_path / "hist.csv"
    code, out, _ = run_cli(capsys, "run", "--len", "512", "--dim", "16", "--block", "32", "--heads", "2",
                           "--plan-out", str(plan_path), "--hist-out", str(hist_path), "--bins", "10")
    assert code == 0
    rep = last_json(out)
    assert RUN_KEYS <= set(rep)
    assert all(not isinstance(v, dict) for v in rep.values())
    assert len(rep["l1_rel_per_head"]) == 2
    assert json.loads(plan_path.read_text())["num_blocks"] == 16
    assert hist_path.read_text().startswith("bin_left,bin_right,count_selected,count_unselected\n")
    assert rep["score_unselected_mean"] < rep["score_selected_mean"]


def test_run_sparse_only_dense_limit(capsys):
    code, out, _ = run_cli(capsys, "run", "--variant", "sparse_only", "--sparsity", "0", "--len", "256",
                           "--dim", "16", "--block", "32")
    assert code == 0 and last_json(out)["l1_rel"] <= 1e-5


def test_run_hybrid_beats_sparse_only(capsys):
    errs = {}
    for v in ("hybrid", "sparse_only"):
        _, out, _ = run_cli(capsys, "run", "--variant", v, "--len", "1024", "--dim", "32", "--block", "32")
        errs[v] = last_json(out)["l1_rel"]
    assert errs["hybrid"] < errs["sparse_only"]


def test_run_deterministic_zeroes_timings(capsys):
    _, out, _ = run_cli(capsys, "run", "--len", "256", "--dim", "8", "--block", "32", "--deterministic")
    rep = last_json(out)
    assert all(rep[k] == 0.0 for k in rep if k.startswith("wall_ms"))


def test_run_f32_path(capsys):
    code, out, _ = run_cli(capsys, "run", "--len", "256", "--dim", "8", "--block", "32", "--dtype", "f32")
    assert code == 0 and last_json(out)["l1_rel"] < 0.5


def sweep_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_sweep_cardinality_and_columns(capsys):
    code, out, _ = run_cli(capsys, "sweep", "--lengths", "256,512", "--sparsities", "0.5,0.75",
                           "--variants", "sparse_only,zeroth,hybrid", "--seeds", "0-4", "--heads", "2",
                           "--dim", "8", "--block", "32", "--deterministic")
    assert code == 0
    rows = sweep_rows(out)
    assert len(rows) == 2 * 2 * 3 * 5 * 2
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert {r["status"] for r in rows} == {"ok"}
    assert {r["wall_ms"] for r in rows} == {"0.0"}
    keys = [(int(r["seed"]), int(r["head"])) for r in rows]
    assert keys == sorted(keys)


def test_sweep_byte_identical_across_threads(tmp_path, capsys, monkeypatch):
    argv = ["sweep", "--lengths", "256,512", "--sparsities", "0.5,0.875", "--variants", "zeroth,hybrid",
            "--seeds", "0,1,2", "--dim", "8", "--block", "32", "--deterministic"]
    outputs = []
    for threads in ("1", "4", "1"):
        monkeypatch.setenv("PISA_THREADS", threads)
        path = tmp_path / f"sweep{len(outputs)}.csv"
        assert run_cli(capsys, *argv, "--out", str(path))[0] == 0
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_sweep_spec_file(tmp_path, capsys):
    spec = {"lengths": [128], "sparsities": [0.5], "variants": ["hybrid"], "seeds": [7],
            "block_size": 16, "head_dim": 8, "heads": 1, "generator": {"kind": "gaussian"}}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    code, out, _ = run_cli(capsys, "sweep", "--spec", str(path), "--deterministic")
    rows = sweep_rows(out)
    assert code == 0 and len(rows) == 1 and rows[0]["seed"] == "7" and rows[0]["block_size"] == "16"


def test_sweep_records_failing_cell(capsys, monkeypatch):
    real = cli.run_head

    def flaky(Q, K, V, r, strategy, variant, *a, **kw):
        if variant.value == "zeroth":
            raise NumericalOverflow(3)
        return real(Q, K, V, r, strategy, variant, *a, **kw)

    monkeypatch.setattr(cli, "run_head", flaky)
    code, out, _ = run_cli(capsys, "sweep", "--lengths", "128", "--sparsities", "0.5",
                           "--variants", "zeroth,hybrid", "--dim", "8", "--block", "16", "--deterministic")
    rows = sweep_rows(out)
    assert code == 0
    assert [r["status"] for r in rows] == ["NumericalOverflow", "ok"]
    assert rows[0]["l1_rel"] == ""


def test_sweep_bad_length_is_usage_error(capsys):
    assert run_cli(capsys, "sweep", "--lengths", "100", "--block", "64")[0] == 2


def test_verify_subset_passes(capsys):
    code, out, _ = run_cli(capsys, "verify", "--only", "oracle,router,streaming", "--seeds", "3")
    assert code == 0
    assert sum(" pass " in f" {line} " for line in out.splitlines()) == 3


def test_verify_theorem1(capsys):
    code, out, _ = run_cli(capsys, "verify", "--only", "theorem1", "--seeds", "100")
    assert code == 0
    detail = json.loads(out.splitlines()[1].split(None, 2)[2])
    assert detail["violations"] == 0 and detail["seeds"] == 100


def test_verify_mutation_fails(capsys):
    code, out, _ = run_cli(capsys, "verify", "--only", "constant_key", "--mutate", "drop-block-factor")
    assert code == 1 and "FAIL" in out


def test_verify_unknown_check(capsys):
    assert run_cli(capsys, "verify", "--only", "nope")[0] == 2


def test_bench_schema(capsys):
    code, out, _ = run_cli(capsys, "bench", "--len", "512", "--dim", "16", "--block", "32", "--reps", "5",
                           "--warmup", "0")
    assert code == 0
    rep = last_json(out)
    for key in ("dense_online_wall_ms", "hybrid_wall_ms", "hybrid_speedup_vs_dense_online",
                "hybrid_approx_share_pct", "sparse_only_wall_ms", "hybrid_exact_ms"):
        assert key in rep
    assert rep["seq_len"] == 512 and rep["dtype"] == "f32"


def test_bench_rejects_few_reps(capsys):
    assert run_cli(capsys, "bench", "--len", "128", "--reps", "2")[0] == 2
