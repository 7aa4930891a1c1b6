import json
import xml.etree.ElementTree as ET

import pytest

from egoforecast import dataio
from egoforecast.cli import cli_run


def run(*argv):
    return cli_run([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert run("--seed", 3, "simulate", "--players", 3, "--seconds", 30, "--out", d / "data") == 0
    assert run("build-db", "--data", d / "data", "--horizon", 4, "--stride", 1, "--out", d / "db") == 0
    assert run("--seed", 3, "train-embed", "--db", d / "db", "--epochs", 2, "--embed-db", d / "db_e", "--out", d / "embed.bin") == 0
    assert run("--seed", 3, "train-attention", "--data", d / "data", "--epochs", 2, "--window", 4, "--out", d / "att.bin") == 0
    # accept every gated exemplar so each player keeps N distinct candidates
    params, _, extra = dataio.read_embedding_checkpoint(d / "embed.bin")
    dataio.write_embedding_checkpoint(d / "embed_open.bin", params, 1e9, extra)
    return d


def test_simulate_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 7, "simulate", "--players", 6, "--seconds", 60, "--out", tmp_path / name) == 0
    for f in ("frames.txt", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run("--seed", 8, "simulate", "--players", 6, "--seconds", 60, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "frames.txt").read_bytes() != (tmp_path / "c" / "frames.txt").read_bytes()


def test_predict_group_k10(toy, tmp_path):
    out = tmp_path / "p.json"
    code = run(
        "predict", "--data", toy / "data", "--db", toy / "db_e", "--embed", toy / "embed_open.bin",
        "--attention", toy / "att.bin", "--horizon", 4, "--n", 4, "--sigma", 1e-3,
        "--mode", "group", "--k", 10, "--time-index", 20, "--out", out,
    )
    assert code == 0
    doc = json.loads(out.read_text())
    sels = doc["selections"]
    assert len(sels) == 10
    costs = [s["cost"] for s in sels]
    assert costs == sorted(costs)
    assert all(len(s["attention"]) == 5 and len(s["players"]) == 3 for s in sels)
    svg = tmp_path / "p.svg"
    assert run("plot", "--input", out, "--out", svg) == 0
    assert ET.parse(svg).getroot().tag.endswith("svg")


def test_predict_other_modes(toy, tmp_path):
    common = ["--data", toy / "data", "--attention", toy / "att.bin", "--horizon", 4, "--time-index", 10]
    assert run("predict", *common, "--mode", "attention-only", "--out", tmp_path / "a.json") == 0
    assert len(json.loads((tmp_path / "a.json").read_text())["attention"]) == 5
    code = run("predict", *common, "--db", toy / "db_e", "--embed", toy / "embed.bin", "--mode", "missing-player", "--player", 1, "--k", 3, "--out", tmp_path / "m.json")
    assert code == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["players"] == [1] and 1 <= len(doc["selections"]) <= 3


def test_evaluate_and_plot(toy, tmp_path):
    out = tmp_path / "ev.json"
    code = run("evaluate", "--data", toy / "data", "--db", toy / "db_e", "--embed", toy / "embed.bin", "--attention", toy / "att.bin", "--horizon", 4, "--queries", 3, "--out", out)
    assert code == 0
    doc = json.loads(out.read_text())
    assert len(doc["location_m"]["median"]) == 5 and doc["location_m"]["median"][0] == 0.0
    assert run("plot", "--input", out, "--out", tmp_path / "ev.svg") == 0
    root = ET.parse(tmp_path / "ev.svg").getroot()
    assert root.tag.endswith("svg")


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run("simulate") == 2
    assert run("nonsense") == 2
    assert run("simulate", "--players", "many", "--out", tmp_path) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert all(json.loads(line)["error"] == "UsageError" for line in err)
    assert run("predict", "--data", tmp_path, "--attention", tmp_path / "x", "--out", tmp_path / "y") == 2


def test_data_errors_exit_1(capsys, tmp_path):
    assert run("build-db", "--data", tmp_path / "missing", "--out", tmp_path / "db") == 1
    line = capsys.readouterr().err.strip()
    assert len(line.splitlines()) == 1 and "error" in json.loads(line)
    assert run("simulate", "--players", 0, "--out", tmp_path / "d") == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert run("plot", "--input", tmp_path / "bad.json", "--out", tmp_path / "x.svg") == 1


def test_config_env_defaults(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"simulate": {"players": 2, "seconds": 3}}))
    monkeypatch.setenv("EGOFORECAST_CONFIG", str(cfg))
    assert run("simulate", "--out", tmp_path / "d") == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["players"] == 2 and m["frames"] == 7
