import hashlib
import json
import subprocess
import sys

import pytest

from eclipse.cli import EXIT_FAILED, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from eclipse.container import load_model, save_model
from eclipse.fixtures import random_mlp, toy_cnn


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def mlp(tmp_path):
    path = tmp_path / "mlp.ecl"
    save_model(random_mlp(0, (16, 32, 24, 12, 10)), path)
    return path


@pytest.fixture
def marked(tmp_path):
    model, key = tmp_path / "marked.ecl", tmp_path / "marked.eck"
    code = main(["gen-fixture", "--seed", "3", "--dims", "64,128,64,10", "--watermark", "weight_projection",
                 "--layer", "1", "--bits", "128", "--key-out", str(key), "--out", str(model)])
    assert code == EXIT_OK
    return model, key


def test_inspect_table_has_one_row_per_layer(mlp, capsys):
    assert main(["inspect", str(mlp)]) == EXIT_OK
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 4 and rows[0].split()[1] == "linear"


def test_inspect_json(mlp, capsys):
    assert main(["inspect", str(mlp), "--json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert [r["output"] for r in doc["layers"]] == [[32], [24], [12], [10]]
    assert doc["layers"][0]["params"] == 16 * 32 + 32


def test_corrupt_file_exits_with_io_code(tmp_path, capsys):
    bad = tmp_path / "bad.ecl"
    save_model(random_mlp(0, (4, 3)), bad)
    bad.write_bytes(bad.read_bytes()[:-9])
    assert main(["inspect", str(bad)]) == EXIT_IO
    assert "byte offset" in capsys.readouterr().err


def test_missing_file_and_empty_path(tmp_path):
    assert main(["inspect", str(tmp_path / "nope.ecl")]) == EXIT_IO
    assert main(["inspect", ""]) == EXIT_USAGE


def test_usage_errors(mlp, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["obfuscate", str(mlp), "--out", str(tmp_path / "o.ecl")]) == EXIT_USAGE  # no --seed
    assert main(["obfuscate", str(mlp), "--seed", "1", "--frame", "1,2", "--out", str(tmp_path / "o.ecl")]) == EXIT_USAGE
    assert main(["obfuscate", str(mlp), "--seed", "1", "--out", str(mlp)]) == EXIT_USAGE  # would overwrite input


def test_missing_output_directory(mlp, tmp_path):
    assert main(["obfuscate", str(mlp), "--seed", "1", "--out", str(tmp_path / "no" / "o.ecl")]) == EXIT_IO


def test_transform_not_applicable(tmp_path):
    cnn = tmp_path / "cnn.ecl"
    save_model(toy_cnn(0, fit=False), cnn)
    assert main(["obfuscate", str(cnn), "--seed", "1", "--targets", "1", "--out", str(tmp_path / "o.ecl")]) == EXIT_FAILED
    assert main(["obfuscate", str(cnn), "--seed", "1", "--targets", "40", "--out", str(tmp_path / "o.ecl")]) == EXIT_FAILED


def test_obfuscate_is_byte_reproducible(mlp, tmp_path):
    runs = []
    for n in range(2):
        out, doc = tmp_path / f"o{n}.ecl", tmp_path / f"o{n}.json"
        assert main(["obfuscate", str(mlp), "--mode", "advanced", "--seed", "5", "--out", str(out),
                     "--log-out", str(doc)]) == EXIT_OK
        runs.append((_digest(out), _digest(doc)))
    assert runs[0] == runs[1]
    log = json.loads((tmp_path / "o0.json").read_text())
    assert log["targets"] == [0, 1, 2, 3] and log["mode"] == "advanced"


def test_no_command_mutates_inputs(marked, tmp_path, capsys):
    model, key = marked
    before = (_digest(model), _digest(key))
    obf = tmp_path / "obf.ecl"
    for argv in (
        ["inspect", str(model)],
        ["detect", str(model)],
        ["verify", str(model), "--key", str(key), "--active"],
        ["obfuscate", str(model), "--seed", "1", "--detect", "--out", str(obf)],
        ["equiv", str(model), str(obf), "--seed", "0", "--probes", "50"],
        ["report", str(model), str(obf), "--key", str(key), "--seed", "0", "--probes", "20"],
    ):
        assert main(argv) == EXIT_OK, argv
    assert (_digest(model), _digest(key)) == before


def test_verify_after_base_split_reports_no_signature(marked, tmp_path, capsys):
    model, key = marked
    assert main(["verify", str(model), "--key", str(key)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["outcome"] == "Verified"
    obf = tmp_path / "obf.ecl"
    assert main(["obfuscate", str(model), "--seed", "2", "--targets", "1", "--out", str(obf),
                 "--log-out", str(tmp_path / "log.json")]) == EXIT_OK
    capsys.readouterr()
    # a failed verification is still a successful command
    assert main(["verify", str(obf), "--key", str(key)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["outcome"] == "NoSignature" and doc["verifier"] == "passive"
    assert main(["verify", str(obf), "--key", str(key), "--active"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert [t["strategy"] for t in doc["trace"]] == ["reshape_truncate", "merge_adjacent", "crop_zero_frame"]


def test_equiv_and_bench(mlp, tmp_path, capsys):
    obf = tmp_path / "obf.ecl"
    assert main(["obfuscate", str(mlp), "--seed", "1", "--out", str(obf), "--log-out", str(tmp_path / "l.json")]) == EXIT_OK
    assert main(["equiv", str(mlp), str(obf), "--seed", "0"]) == EXIT_OK
    eq = json.loads(capsys.readouterr().out)
    assert eq["max_abs_dev"] <= 1e-9 and eq["probes"] == 1000
    assert main(["bench", str(mlp), str(obf), "--seed", "0", "--runs", "3", "--probes", "8"]) == EXIT_OK
    bench = json.loads(capsys.readouterr().out)
    assert bench["runs"] == 3 and bench["ratio"] > 0


def test_gen_fixture_cnn_f32(tmp_path, capsys):
    out = tmp_path / "cnn.ecl"
    assert main(["gen-fixture", "--kind", "cnn", "--seed", "0", "--dtype", "f32", "--out", str(out)]) == EXIT_OK
    model = load_model(out)
    assert model.dtype_tag == "f32" and len(model.layers) == 7
    assert main(["gen-fixture", "--seed", "0", "--watermark", "weight_selection", "--out", str(out)]) == EXIT_USAGE


def test_thread_limit_env(mlp, monkeypatch):
    monkeypatch.setenv("ECLIPSE_THREADS", "1")
    assert main(["inspect", str(mlp)]) == EXIT_OK
    monkeypatch.setenv("ECLIPSE_THREADS", "many")
    assert main(["inspect", str(mlp)]) == EXIT_USAGE


def test_module_entry_point(mlp):
    proc = subprocess.run([sys.executable, "-m", "eclipse", "inspect", str(mlp), "--json"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and len(json.loads(proc.stdout)["layers"]) == 4
