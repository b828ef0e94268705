import json

import numpy as np
import pytest

from selfiestab.cli import run

COMMANDS = ["synth", "stabilize", "train", "bench", "metrics"]


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help(cmd, capsys):
    assert run([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert run([]) == 2
    assert run(["synth", "--out", "x", "--bogus"]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["stabilize", "--input", "a", "--output", "b", "--lambda", "1.0"]) == 2


def test_missing_input_is_data_error(tmp_path, capsys):
    code = run(["stabilize", "--input", str(tmp_path / "nope.jsonl"), "--output",
                str(tmp_path / "o.jsonl")])
    err = capsys.readouterr().err.strip()
    assert code == 1 and len(err.splitlines()) == 1 and "nope.jsonl" in err


def test_bad_thread_setting(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("STAB_THREADS", "many")
    assert run(["synth", "--out", str(tmp_path / "t.jsonl")]) == 2
    assert "STAB_THREADS" in capsys.readouterr().err


def _synth(tmp_path, name="t.jsonl", *extra):
    path = tmp_path / name
    assert run(["synth", "--out", str(path), "--log", str(tmp_path / "log.json"),
                "--frames", "8", *extra]) == 0
    return path


def test_static_stream_gives_identity(tmp_path):
    tracks = _synth(tmp_path, "t.jsonl", "--translation-std", "0")
    out = tmp_path / "o.jsonl"
    assert run(["stabilize", "--input", str(tracks), "--output", str(out),
                "--solver", "direct", "--lambda", "0.3", "--no-timing"]) == 0
    lines = out.read_text().splitlines()
    assert json.loads(lines[0]) == {"width": 832, "height": 448}
    recs = [json.loads(s) for s in lines[1:]]
    assert [r["frame"] for r in recs] == list(range(1, 9))
    for r in recs:
        if r["Q"] is not None:
            assert np.abs(np.subtract(r["Qhat"], r["Q"])).max() <= 1e-6


def test_metrics_on_identical_input(tmp_path, capsys):
    tracks = _synth(tmp_path, "t.jsonl", "--frames", "16")
    csv = tmp_path / "m.csv"
    assert run(["metrics", "--input", str(tracks), "--outputs", str(tracks),
                "--csv", str(csv)]) == 0
    summary = csv.read_text().splitlines()[-1].split(",")
    assert summary[:3] == ["summary", "1.000000", "1.000000"]
    assert "cropping 1.0000" in capsys.readouterr().err


def test_tiny_training_and_net_stabilize(tmp_path):
    weights = tmp_path / "w.sstw"
    curve = tmp_path / "c.csv"
    assert run(["train", "--out", str(weights), "--curve", str(curve), "--filters", "2",
                "--synthetic", "2", "--epochs", "1"]) == 0
    assert curve.read_text().splitlines()[0] == "epoch,loss,baseline"
    tracks = _synth(tmp_path)
    assert run(["stabilize", "--input", str(tracks), "--output", str(tmp_path / "o.jsonl"),
                "--solver", "net", "--weights", str(weights)]) == 0
    assert run(["stabilize", "--input", str(tracks), "--output", str(tmp_path / "o.jsonl"),
                "--solver", "net"]) == 1


def test_bench_small_raster(tmp_path):
    out = tmp_path / "b.csv"
    assert run(["bench", "--nodes", "16", "--raster", "64x48", "--repeats", "1",
                "--out", str(out)]) == 0
    head, row = out.read_text().splitlines()
    assert head == "nodes,grid,raster,dense_ms,grid_ms,speedup"
    assert row.startswith("16,20x20,")


def test_rasters_round_trip(tmp_path):
    tracks = _synth(tmp_path, "t.jsonl", "--size", "104x56", "--rasters", str(tmp_path / "in"))
    assert len(list((tmp_path / "in").iterdir())) == 8
    assert run(["stabilize", "--input", str(tracks), "--output", str(tmp_path / "o.jsonl"),
                "--iters", "20", "--frames-in", str(tmp_path / "in"),
                "--frames-out", str(tmp_path / "out")]) == 0
    assert len(list((tmp_path / "out").iterdir())) == 8


def test_seeded_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        d.mkdir()
        _synth(d, "t.jsonl", "--seed", "3", "--frames", "16")
        assert run(["stabilize", "--input", str(d / "t.jsonl"), "--output", str(d / "o.jsonl"),
                    "--iters", "30", "--no-timing"]) == 0
        assert run(["metrics", "--input", str(d / "t.jsonl"), "--outputs", str(d / "o.jsonl"),
                    "--csv", str(d / "m.csv")]) == 0
    for name in ("t.jsonl", "log.json", "o.jsonl", "m.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
