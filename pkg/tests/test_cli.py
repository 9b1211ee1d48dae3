import json

import pytest

from cachecraft import ModelConfig, PrefixContext, StoreConfig, VariantStore
from cachecraft.cli import main
from cachecraft.serialize import write_model_config


@pytest.fixture(scope="module")
def trace_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "trace.jsonl"
    rc = main(
        [
            "gen",
            "--chunks", "12",
            "--zipf", "1.0",
            "--k", "3",
            "--requests", "8",
            "--seed", "3",
            "--out", str(path),
        ]
    )
    assert rc == 0
    return path


def test_gen_writes_trace_and_corpus(trace_path):
    assert trace_path.exists()
    assert trace_path.with_name("trace.jsonl.corpus.json").exists()
    lines = trace_path.read_text().strip().splitlines()
    assert len(lines) == 8


def test_replay_writes_csv_report(trace_path, tmp_path, capsys):
    out = tmp_path / "report.csv"
    rc = main(
        [
            "replay",
            "--trace", str(trace_path),
            "--policy", "cachecraft",
            "--alpha", "0.5",
            "--warmup", "2",
            "--store-chunks", "16",
            "--store-variants", "2",
            "--out", str(out),
        ]
    )
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("request_id,")
    assert len(lines) == 1 + (8 - 2)
    assert "recompute_fraction" in capsys.readouterr().out


def test_replay_honors_model_config_file(trace_path, tmp_path):
    cfg_path = tmp_path / "model.cfg"
    write_model_config(cfg_path, ModelConfig(n_layers=2, n_heads=2, d_model=16, seed=3))
    out = tmp_path / "report.json"
    rc = main(
        [
            "replay",
            "--trace", str(trace_path),
            "--policy", "full_recompute",
            "--config", str(cfg_path),
            "--warmup", "0",
            "--out", str(out),
        ]
    )
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["policy"] == "full_recompute"
    assert payload["aggregate"]["n_requests"] == 8


def test_calibrate_emits_sweep_rows(trace_path, tmp_path, capsys):
    out = tmp_path / "calib.csv"
    rc = main(
        [
            "calibrate",
            "--trace", str(trace_path),
            "--grid", "0.5,1.0",
            "--target", "0.0",
            "--warmup", "2",
            "--store-chunks", "16",
            "--store-variants", "2",
            "--out", str(out),
        ]
    )
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "alpha,mean_cfo,quality,feasible"
    assert len(lines) == 3
    assert "alpha* = " in capsys.readouterr().out


def test_calibrate_reports_infeasible_target(trace_path, tmp_path, capsys):
    rc = main(
        [
            "calibrate",
            "--trace", str(trace_path),
            "--grid", "0.5",
            "--target", "2.0",  # quality is capped at 1.0
            "--warmup", "2",
            "--out", str(tmp_path / "calib.csv"),
        ]
    )
    assert rc == 1
    assert "infeasible" in capsys.readouterr().out


def test_census_prints_variant_histogram(tmp_path, capsys):
    import numpy as np

    from cachecraft.model import ChunkCache

    store = VariantStore(StoreConfig(max_chunks=4, variants_per_chunk=2))
    for cid, prefix in (("aa", ()), ("aa", ("x",)), ("bb", ())):
        store.insert(
            cid,
            prefix=PrefixContext(chunk_ids=prefix, weights=(1.0,) * len(prefix)),
            a_bar=0.1,
            b_bar=0.2,
            cci=0.6,
            token_scores=np.arange(4, dtype=float),
            cache=ChunkCache(
                keys=[np.zeros((4, 8))] * 2, values=[np.zeros((4, 8))] * 2, n_tokens=4
            ),
        )
    snap = tmp_path / "snap"
    store.snapshot(snap)
    rc = main(["census", "--store", str(snap)])
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "chunk_id,variants"
    assert out[1] == "aa,2"
    assert out[2] == "bb,1"


def test_unknown_trace_is_reported_as_error(tmp_path, capsys):
    rc = main(["replay", "--trace", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "r.csv")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
