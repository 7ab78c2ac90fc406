"""Command-line surface: end-to-end flows, formats, exit codes."""

import signal
import socket
import struct
import subprocess
import sys
import time

import numpy as np
import pytest

from ntd.calibrate import table_read
from ntd.cli import main
from ntd.docfmt import parse_kv
from ntd.featstore import manifest_read, store_read
from ntd.gateway import GatewayClient, render_request
from ntd.simdist import Metric


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    store = root / "store.ntdf"
    heldout = root / "heldout.ntdf"
    manifest = root / "classes.tsv"
    table = root / "thresholds.txt"
    code = run_cli("synth", "--out", store, "--heldout-out", heldout,
                   "--manifest", manifest, "--classes", 4, "--dim", 16,
                   "--records-per-class", 40, "--heldout-per-class", 10,
                   "--seed", 5)
    assert code == 0
    code = run_cli("calibrate", "--store", store, "--out", table,
                   "--n", 3, "--rounds", 300, "--frr", 0.05, "--seed", 6)
    assert code == 0
    return root, store, heldout, manifest, table


def test_synth_writes_valid_artifacts(artifacts):
    _, store_path, heldout_path, manifest_path, _ = artifacts
    store = store_read(store_path)
    assert store.count == 4 * 40
    assert store.dim == 16
    heldout = store_read(heldout_path)
    assert heldout.count == 4 * 10
    names = manifest_read(manifest_path)
    assert names == {0: "class0", 1: "class1", 2: "class2", 3: "class3"}


def test_calibrate_writes_canonical_table(artifacts, capsys):
    _, _, _, _, table_path = artifacts
    table = table_read(table_path)
    assert table.metric is Metric.COSINE
    assert table.n == 3
    assert table.rounds == 300
    assert 0.0 < table.global_threshold <= 1.0
    text = table_path.read_text()
    assert text.startswith("metric=cosine\nvariant=standard\n")


def test_detect_labels_clean_and_foreign_embeddings(artifacts, tmp_path):
    _, store_path, heldout_path, _, table_path = artifacts
    heldout = store_read(heldout_path)
    lines = []
    pos0 = heldout.positions(0)[0]
    pos1 = heldout.positions(1)[0]
    clean = " ".join(str(v) for v in heldout.vectors[pos0])
    foreign = " ".join(str(v) for v in heldout.vectors[pos1])
    lines.append(f"good\t0\t{clean}")
    lines.append(f"bad\t0\t{foreign}")   # class-1 embedding claiming class 0
    lines.append("# comment to skip")
    queries = tmp_path / "queries.tsv"
    queries.write_text("\n".join(lines) + "\n")
    out = tmp_path / "verdicts.tsv"
    code = run_cli("detect", "--store", store_path, "--thresholds", table_path,
                   "--queries", queries, "--out", out, "--seed", 7)
    assert code == 0
    rows = [line.split("\t") for line in out.read_text().splitlines()]
    assert [r[0] for r in rows] == ["good", "bad"]
    assert rows[0][1] == "benign"
    assert rows[1][1] == "trigger"
    for r in rows:
        float(r[2]), float(r[3])


def test_detect_accepts_default_class_flag(artifacts, tmp_path):
    _, store_path, heldout_path, _, table_path = artifacts
    heldout = store_read(heldout_path)
    emb = " ".join(str(v) for v in heldout.vectors[heldout.positions(2)[0]])
    queries = tmp_path / "q.txt"
    queries.write_text(f"only {emb}\n")
    out = tmp_path / "v.tsv"
    code = run_cli("detect", "--store", store_path, "--thresholds", table_path,
                   "--queries", queries, "--class", 2, "--out", out)
    assert code == 0
    assert out.read_text().startswith("only\tbenign\t")


def test_detect_is_deterministic_per_seed(artifacts, tmp_path):
    _, store_path, heldout_path, _, table_path = artifacts
    heldout = store_read(heldout_path)
    emb = " ".join(str(v) for v in heldout.vectors[0])
    queries = tmp_path / "q.txt"
    queries.write_text(f"a\t{int(heldout.class_ids[0])}\t{emb}\n")
    outs = []
    for name in ("v1", "v2"):
        out = tmp_path / name
        assert run_cli("detect", "--store", store_path,
                       "--thresholds", table_path, "--queries", queries,
                       "--out", out, "--seed", 42) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_missing_store_exits_3(artifacts, tmp_path, capsys):
    _, _, _, _, table_path = artifacts
    queries = tmp_path / "q.txt"
    queries.write_text("a 1 0\n")
    code = run_cli("detect", "--store", tmp_path / "absent.ntdf",
                   "--thresholds", table_path, "--queries", queries)
    assert code == 3
    assert "error:" in capsys.readouterr().err


def test_validation_failure_exits_2(artifacts, tmp_path, capsys):
    _, store_path, _, _, _ = artifacts
    code = run_cli("calibrate", "--store", store_path,
                   "--out", tmp_path / "t.txt", "--rounds", 50, "--frr", 0.05)
    assert code == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_seed_env_var_is_the_default(artifacts, tmp_path, monkeypatch):
    _, store_path, heldout_path, _, table_path = artifacts
    heldout = store_read(heldout_path)
    emb = " ".join(str(v) for v in heldout.vectors[0])
    queries = tmp_path / "q.txt"
    queries.write_text(f"a\t{int(heldout.class_ids[0])}\t{emb}\n")
    out_env = tmp_path / "env.tsv"
    out_flag = tmp_path / "flag.tsv"
    monkeypatch.setenv("NTD_SEED", "123")
    assert run_cli("detect", "--store", store_path, "--thresholds", table_path,
                   "--queries", queries, "--out", out_env) == 0
    monkeypatch.delenv("NTD_SEED")
    assert run_cli("detect", "--store", store_path, "--thresholds", table_path,
                   "--queries", queries, "--out", out_flag, "--seed", 123) == 0
    assert out_env.read_bytes() == out_flag.read_bytes()


def test_eval_writes_sweep_csv(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code = run_cli("eval", "--out", out, "--classes", 4, "--dim", 16,
                   "--records-per-class", 40, "--heldout-per-class", 20,
                   "--rounds", 300, "--clean-sessions", 40,
                   "--trigger-sessions", 40, "--values", "0.01,0.05",
                   "--seed", 8)
    assert code == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0].startswith("axis,value,clean_count,trigger_count,")
    assert len(lines) == 3
    assert lines[1].startswith("preset_frr,0.01,40,40,")
    summary = capsys.readouterr().out
    assert "preset_frr=0.01" in summary


def test_bench_writes_latency_csv(tmp_path):
    out = tmp_path / "latency.csv"
    code = run_cli("bench", "--out", out, "--n-values", "2,4",
                   "--delay-ms", 0, "--queries", 3, "--seed", 9)
    assert code == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "n,lut,queries,mean_s,p95_s,extractor_calls"
    assert len(lines) == 5


def test_serve_subprocess_end_to_end(artifacts):
    _, store_path, heldout_path, _, table_path = artifacts
    proc = subprocess.Popen(
        [sys.executable, "-m", "ntd.cli", "serve", "--listen", "127.0.0.1:0",
         "--store", str(store_path), "--thresholds", str(table_path),
         "--seed", "11"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline().strip()
        assert line.startswith("listening on 127.0.0.1:")
        port = int(line.rsplit(":", 1)[1])
        heldout = store_read(heldout_path)
        emb = heldout.vectors[0].astype(np.float64)
        with GatewayClient("127.0.0.1", port) as client:
            payload = client.request_raw(
                render_request("sub-0", int(heldout.class_ids[0]), emb))
        response = dict(parse_kv(payload))
        assert response["input_id"] == "sub-0"
        assert response["decision"] in ("benign", "trigger")
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            assert proc.wait(timeout=10) == 0
        except subprocess.TimeoutExpired:
            proc.kill()
            raise


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        run_cli("frobnicate")
    assert exc.value.code == 2
