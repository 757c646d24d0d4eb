import math

import numpy as np
import pytest

from wnq.cli import main
from wnq.metrics import parse_record
from wnq.tensor_store import LayerKind, WeightTensor, read_quantized, read_tensor, write_tensor

TRAIN_FLAGS = ["--steps", "16", "--pretrain-steps", "40", "--hidden", "8", "--input-dim", "6"]


@pytest.fixture
def tensor_file(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "w.wnqt"
    write_tensor(WeightTensor.from_array(rng.standard_normal((4, 3, 3, 3))), path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_quantize_dequantize_cardinality(tmp_path, tensor_file, capsys):
    q = tmp_path / "w.wnqq"
    code, out, _ = run(capsys, "quantize", "--input", tensor_file, "--output", q, "--bits", 2)
    assert code == 0
    rec = parse_record(out.strip())
    assert rec["method"] == "wnq" and 0 < rec["relative_mse"] < 1
    d = tmp_path / "d.wnqt"
    assert run(capsys, "dequantize", "--input", q, "--output", d, "--like", tensor_file)[0] == 0
    t = read_tensor(d)
    assert t.shape == (4, 3, 3, 3)
    for row in t.rows():
        assert len(np.unique(row)) <= 4


def test_dequantize_conv_without_like_notes_shape(tmp_path, tensor_file, capsys):
    q = tmp_path / "w.wnqq"
    run(capsys, "quantize", "--input", tensor_file, "--output", q)
    code, _, err = run(capsys, "dequantize", "--input", q, "--output", tmp_path / "d.wnqt")
    assert code == 0 and "--like" in err
    assert read_tensor(tmp_path / "d.wnqt").shape == (4, 27, 1, 1)


def test_quantize_deterministic(tmp_path, tensor_file, capsys):
    a, b = tmp_path / "a.wnqq", tmp_path / "b.wnqq"
    run(capsys, "quantize", "--input", tensor_file, "--output", a, "--bits", 3)
    run(capsys, "quantize", "--input", tensor_file, "--output", b, "--bits", 3)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("method", ["lqnet", "residual"])
def test_quantize_baselines_write_wnqq(tmp_path, tensor_file, capsys, method):
    out = tmp_path / "q.wnqq"
    assert run(capsys, "quantize", "--input", tensor_file, "--output", out, "--method", method)[0] == 0
    assert read_quantized(out).bits == 2


def test_quantize_dorefa_writes_tensor(tmp_path, tensor_file, capsys):
    out = tmp_path / "q.wnqt"
    assert run(capsys, "quantize", "--input", tensor_file, "--output", out, "--method", "dorefa")[0] == 0
    assert np.all(np.abs(read_tensor(out).data) <= 1)


def test_usage_errors_exit_2(tensor_file, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["quantize", "--input", str(tensor_file), "--output", str(tmp_path / "x"), "--bits", "9"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["stats", "--input", str(tensor_file), "--bogus"])
    assert exc.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.wnqt"
    bad.write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(capsys, "quantize", "--input", bad, "--output", tmp_path / "o")
    assert code == 1 and "error" in err
    assert run(capsys, "stats", "--input", tmp_path / "missing.wnqt")[0] == 1


def test_stats_fp_has_no_mse(tensor_file, capsys):
    code, out, _ = run(capsys, "stats", "--input", tensor_file)
    rec = parse_record(out.strip())
    assert code == 0 and rec["relative_mse"] is None and rec["tail_ratio"] > 0
    assert sum(rec["histogram"]) == 108 and len(rec["histogram"]) == 101


def test_stats_identical_file_mse_zero(tensor_file, capsys):
    _, out, _ = run(capsys, "stats", "--input", tensor_file, "--quantized", tensor_file)
    assert parse_record(out.strip())["relative_mse"] == 0.0


def test_stats_known_vector(tmp_path, capsys):
    w = tmp_path / "v.wnqt"
    q = tmp_path / "v.wnqq"
    write_tensor(WeightTensor([1, 3], [0.2, -0.5, 0.1]), w)
    run(capsys, "quantize", "--input", w, "--output", q, "--bits", 1)
    _, out, _ = run(capsys, "stats", "--input", w, "--quantized", q)
    # quantized [4/15, -4/15, 4/15]: error 19.5/225 over norm 0.3 = 13/45
    assert parse_record(out.strip())["relative_mse"] == pytest.approx(13 / 45, rel=1e-6)


def test_stats_shape_mismatch(tmp_path, tensor_file, capsys):
    other = tmp_path / "o.wnqt"
    write_tensor(WeightTensor([2, 2], [1.0, 2.0, 3.0, 4.0]), other)
    assert run(capsys, "stats", "--input", tensor_file, "--quantized", other)[0] == 1


def test_gradcheck_defaults_pass(capsys):
    code, out, _ = run(capsys, "gradcheck")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 100
    assert all(line.split("\t")[3] == "pass" for line in lines)


def test_gradcheck_large_eps_reports_indices(capsys):
    code, out, _ = run(capsys, "gradcheck", "--eps", "1e-1", "--seeds", "10")
    assert code == 1
    failed = [line.split("\t") for line in out.strip().splitlines() if "\tfail\t" in line]
    assert failed and all(parts[4] != "-" for parts in failed)


def test_gradcheck_single_element(capsys):
    code, out, _ = run(capsys, "gradcheck", "--m", "1", "--seeds", "5")
    assert code == 0 and all(float(line.split("\t")[2]) < 1e-10 for line in out.strip().splitlines())


def test_demo_train_fp_has_no_quantized_files(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "demo-train", "--method", "fp", "--out-dir", out, *TRAIN_FLAGS)[0] == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fc1.wnqt", "fc2.wnqt", "log.tsv"]


def test_demo_train_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "demo-train", "--out-dir", a, *TRAIN_FLAGS)
    run(capsys, "demo-train", "--out-dir", b, *TRAIN_FLAGS)
    names = sorted(p.name for p in a.iterdir())
    assert names == ["fc1.wnqq", "fc1.wnqt", "fc2.wnqq", "fc2.wnqt", "log.tsv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_demo_train_dorefa_writes_float_tensors(tmp_path, capsys):
    out = tmp_path / "r"
    run(capsys, "demo-train", "--method", "dorefa", "--out-dir", out, *TRAIN_FLAGS)
    assert (out / "fc1.q.wnqt").exists()


def test_compare_table(tmp_path, capsys):
    out = tmp_path / "cmp"
    code, stdout, err = run(capsys, "compare", "--bits", 2, "--seeds", 5, "--out-dir", out, *TRAIN_FLAGS)
    assert code == 0
    lines = stdout.strip().splitlines()
    header = lines[0].split("\t")
    assert header[:3] == ["method", "seed", "accuracy"] and "fc1_tail_ratio" in header
    rows = [line.split("\t") for line in lines[1:]]
    assert len(rows) == 10
    assert sorted((r[0], int(r[1])) for r in rows) == sorted((m, s) for m in ("wnq", "lqnet") for s in range(5))
    assert all(not math.isnan(float(r[2])) for r in rows)
    assert (out / "summary.tsv").read_text() == stdout
    assert "compare:" in err


def test_conv_arch_runs(tmp_path, capsys):
    out = tmp_path / "conv"
    flags = ["--arch", "conv", "--input-dim", "16", "--hidden", "4", "--steps", "8", "--pretrain-steps", "8"]
    assert run(capsys, "demo-train", "--out-dir", out, *flags)[0] == 0
    assert read_quantized(out / "conv1.wnqq").kind is LayerKind.Conv
