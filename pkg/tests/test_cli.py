import json

import numpy as np
import pytest

from crgat.cli import baseline_table, main, parse_baseline_table, worker_count
from crgat.errors import ContractError, FormatError

CONFIG = """seed = 5
scenario.n_t = 2
scenario.k_users = 2
scenario.r_req = 0.5
model.head_dims = 4, 4
model.heads = 2, 2
model.dense_dims = 8
model.input_scale = auto
training.epochs = 2
training.batch_size = 8
training.learning_rate = 0.01
oracle.restarts = 16
oracle.refine_keep = 8
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "exp.cfg").write_text(CONFIG)
    return tmp_path


def _run(*argv):
    return main([str(a) for a in argv])


def test_full_pipeline(workspace, capsys):
    w = workspace
    assert _run("gen-data", "--config", w / "exp.cfg", "--out", w / "d.bin", "--count", 44) == 0
    assert _run("train", "--config", w / "exp.cfg", "--data", w / "d.bin", "--out", w / "m.crgw") == 0
    assert (w / "m.crgw.report.tsv").read_text().startswith("# epoch")
    assert _run("train", "--config", w / "exp.cfg", "--data", w / "d.bin", "--out", w / "l.crgw", "--loss", "ldm",
                "--warm-start", w / "m.crgw", "--epochs", 1) == 0
    assert _run("baseline", "--data", w / "d.bin", "--method", "zf", "--workers", 1, "--out", w / "zf.tsv") == 0
    assert len(parse_baseline_table((w / "zf.tsv").read_text())) == 4
    assert _run("eval", "--checkpoint", w / "m.crgw", "--data", w / "d.bin", "--reference", "sca",
                "--workers", 1, "--repetitions", 1, "--out", w / "e.tsv") == 0
    doc = json.loads((w / "e.tsv.json").read_text())
    assert 0 <= doc[0]["feasibility_rate"] <= 100 and doc[0]["n_total"] == 4
    assert list((w / "d.bin.refcache").glob("*-sca-*.tsv"))
    assert _run("eval", "--checkpoint", w / "m.crgw", "--data", w / "d.bin", "--reference", w / "zf.tsv",
                "--repetitions", 1) == 0
    assert _run("mad", "--checkpoint", w / "m.crgw", "--data", w / "d.bin", "--json", w / "mad.json") == 0
    assert len(json.loads((w / "mad.json").read_text())["mad"]) == 2
    assert _run("ablate", "--config", w / "exp.cfg", "--data", w / "d.bin", "--epochs", 1, "--out", w / "ab.tsv") == 0
    assert "no_residual" in (w / "ab.tsv").read_text()


def test_gen_data_and_train_are_byte_identical(workspace):
    w = workspace
    for tag in ("a", "b"):
        assert _run("gen-data", "--config", w / "exp.cfg", "--out", w / f"{tag}.bin", "--count", 33) == 0
        assert _run("train", "--config", w / "exp.cfg", "--data", w / f"{tag}.bin", "--out", w / f"{tag}.crgw") == 0
    assert (w / "a.bin").read_bytes() == (w / "b.bin").read_bytes()
    assert (w / "a.crgw").read_bytes() == (w / "b.crgw").read_bytes()


def test_exit_codes(workspace, capsys):
    w = workspace
    assert _run("gen-data", "--config", w / "exp.cfg", "--out", w / "d.bin", "--count", 0) == 2
    assert _run("gen-data", "--config", w / "missing.cfg", "--out", w / "d.bin", "--count", 3) == 2
    assert _run("gen-data", "--config", w / "exp.cfg", "--out", w / "d.bin", "--count", 22) == 0
    (w / "cut.bin").write_bytes((w / "d.bin").read_bytes()[:-5])
    assert _run("baseline", "--data", w / "cut.bin", "--method", "zf") == 3
    assert _run("mad", "--checkpoint", w / "nope.crgw", "--data", w / "d.bin") == 1
    assert _run("eval", "--checkpoint", w / "d.bin", "--data", w / "d.bin") == 3
    with pytest.raises(SystemExit) as err:
        main(["baseline"])
    assert err.value.code == 2
    (w / "hard.cfg").write_text(CONFIG.replace("r_req = 0.5", "r_req = 12"))
    assert _run("gen-data", "--config", w / "hard.cfg", "--out", w / "h.bin", "--count", 11) == 0
    assert _run("baseline", "--data", w / "h.bin", "--method", "mrt", "--workers", 1) == 5


def test_baseline_table_roundtrip():
    recs = [
        {"sample": 0, "method": "sca", "sum_rate": 3.5, "feasible": 1, "iterations": 4, "status": "ok", "wall_time": 0.1},
        {"sample": 1, "method": "sca", "sum_rate": 2.0, "feasible": 0, "iterations": 4, "status": "ok", "wall_time": 0.1},
    ]
    vals = parse_baseline_table(baseline_table(recs))
    assert vals[0] == 3.5 and np.isnan(vals[1])
    with pytest.raises(FormatError):
        parse_baseline_table("1\t2\n")


def test_worker_count(monkeypatch):
    assert worker_count(3) == 3
    monkeypatch.setenv("CRGAT_WORKERS", "2")
    assert worker_count(None) == 2
    monkeypatch.setenv("CRGAT_WORKERS", "x")
    with pytest.raises(ContractError):
        worker_count(None)
    with pytest.raises(ContractError):
        worker_count(0)


def test_training_contracts_and_ldm_meta(workspace):
    from crgat.checkpoint import load_checkpoint

    w = workspace
    assert _run("gen-data", "--config", w / "exp.cfg", "--out", w / "d.bin", "--count", 22) == 0
    assert _run("train", "--config", w / "exp.cfg", "--data", w / "d.bin", "--out", w / "l.crgw", "--loss", "ldm") == 0
    _, meta = load_checkpoint(w / "l.crgw")
    assert meta["loss"] == "ldm" and len(meta["mu"]) == 2
    (w / "wide.cfg").write_text(CONFIG.replace("model.dense_dims = 8", "model.dense_dims = 16"))
    out = w / "never.crgw"
    assert _run("train", "--config", w / "wide.cfg", "--data", w / "d.bin", "--out", out, "--warm-start", w / "l.crgw") == 2
    assert not out.exists()


def test_oracle_cost_guard_and_self_reference(workspace):
    w = workspace
    (w / "big.cfg").write_text(CONFIG.replace("k_users = 2", "k_users = 8").replace("n_t = 2", "n_t = 8"))
    assert _run("gen-data", "--config", w / "big.cfg", "--out", w / "big.bin", "--count", 11) == 0
    assert _run("baseline", "--data", w / "big.bin", "--method", "oracle") == 2
    assert _run("gen-data", "--config", w / "exp.cfg", "--out", w / "d.bin", "--count", 22) == 0
    assert _run("baseline", "--data", w / "d.bin", "--method", "mrt", "--workers", 1, "--out", w / "m.tsv") == 0
    ref = parse_baseline_table((w / "m.tsv").read_text())
    from crgat.evaluation import optimality_performance

    ok = np.isfinite(ref)
    assert optimality_performance(ref[ok], ref[ok], np.ones(ok.sum(), bool))[0] == 100.0
