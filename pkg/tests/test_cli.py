import json
from pathlib import Path

import pytest

from proxyrating._io import sha256_path
from proxyrating.cli import main

FAST = ["--config", "small"]
for _kv in ("encoder.embed_dim=8", "encoder.hidden_dim=8", "encoder.max_epochs=2", "value.width=8", "value.max_sweeps=3"):
    FAST += ["--set", _kv]


def run_ok(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sim, data = root / "sim", root / "data"
    run_ok("simulate", *FAST, "--n-journeys", 900, "--out", sim)
    run_ok("curate", *FAST, "--data", sim, "--out", data)
    run_ok("train-encoder", *FAST, "--data", data, "--out", root / "enc.npz")
    run_ok("train-value", *FAST, "--data", data, "--encoder", root / "enc.npz", "--out", root / "val.npz")
    run_ok("score", *FAST, "--data", data, "--encoder", root / "enc.npz", "--values", root / "val.npz",
           "--out", root / "scores.csv")  # fmt: skip
    return root


def test_outputs_and_manifests(pipeline):
    root = pipeline
    for f in ("sim/events.jsonl", "sim/vocab.json", "data/train.jsonl", "enc.npz", "enc.log.csv", "val.npz", "scores.csv"):
        assert (root / f).exists(), f
    m = json.loads((root / "val.manifest.json").read_text())
    assert m["command"] == "train-value"
    assert set(m["inputs"]) == {"data", "encoder"}
    assert m["inputs"]["encoder"]["sha256"] == sha256_path(root / "enc.npz")
    assert {a["path"] for a in m["artifacts"]} == {"val.npz", "val.log.csv"}
    assert m["config"]["value"]["max_sweeps"] == 3 and m["seeds"]["value"] == m["config"]["value"]["seed"]
    header = (root / "scores.csv").read_text().splitlines()[0]
    assert header == "customer_id,journey_id,t,action_label,y"


def test_metrics_validate_predict(pipeline):
    root = pipeline
    data, scores = root / "data", root / "scores.csv"
    before = {p: sha256_path(p) for p in (data, scores)}
    run_ok("metrics", *FAST, "--data", data, "--traces", scores, "--out", root / "metrics")
    run_ok("validate", *FAST, "--data", data, "--traces", scores, "--q", 1, "--q", 2, "--out", root / "report.json")
    run_ok("predict", *FAST, "--data", data, "--traces", scores, "--out", root / "pred")
    assert {p: sha256_path(p) for p in before} == before
    rep = json.loads((root / "report.json").read_text())
    assert set(rep) >= {"lag1", "lag2", "split", "n_surveyed"} and rep["split"] == "test"
    assert (root / "metrics" / "pairs.csv").read_text().startswith("source,target,stratum,n,Z,ci95")
    auc = json.loads((root / "pred" / "auc.json").read_text())
    assert 0.0 <= auc["auc_z"] <= 1.0
    # scores cover every journey, so both splits are reported
    assert set(auc["by_split"]) == {"train", "test"}
    assert auc["by_split"]["test"]["auc_z"] == auc["auc_z"]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    root = pipeline
    args = ("--data", root / "data", "--traces", root / "scores.csv")
    run_ok("metrics", *FAST, *args, "--out", tmp_path / "a")
    run_ok("metrics", *FAST, *args, "--out", tmp_path / "b")
    for name in ("journeys.csv", "pairs.csv", "action_report.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run_ok("train-encoder", *FAST, "--data", root / "data", "--out", tmp_path / "enc.npz")
    assert (tmp_path / "enc.npz").read_bytes() == (root / "enc.npz").read_bytes()


def test_gamma_out_of_range(pipeline, capsys):
    code = main(["train-value", "--data", str(pipeline / "data"), "--encoder", str(pipeline / "enc.npz"),
                 "--gamma", "1.5", "--json-errors"])  # fmt: skip
    assert code != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config_error"
    assert any("gamma" in p and "[0, 1)" in p for p in err["problems"])


def test_every_problem_listed(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("value: {gamma: 2, alpha: -1}\nencoder: {colour: red}\nextra: 1\n")
    assert main(["simulate", "--config", str(cfg), "--json-errors"]) == 2
    problems = json.loads(capsys.readouterr().err)["problems"]
    text = " ".join(problems)
    for word in ("gamma", "alpha", "colour", "extra"):
        assert word in text


@pytest.mark.parametrize("argv", [["teleport"], ["simulate", "--bogus"], []])
def test_usage_errors(argv, capsys):
    assert main(argv + ["--json-errors"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"


def test_missing_input(tmp_path, capsys):
    assert main(["curate", "--data", str(tmp_path / "nope"), "--json-errors"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "missing_input"


def test_missing_required_path(capsys):
    assert main(["score", "--data", "x"]) != 0
    assert "--encoder" in capsys.readouterr().err


def test_ingest(tmp_path):
    sim = tmp_path / "sim"
    run_ok("simulate", "--n-journeys", 20, "--out", sim)
    run_ok("ingest", "--events", sim / "events.jsonl", "--vocab", sim / "vocab.json", "--out", tmp_path / "ing")
    lines = (tmp_path / "ing" / "journeys.jsonl").read_text().splitlines()
    assert len(lines) == 20
    m = json.loads((tmp_path / "ing" / "manifest.json").read_text())
    assert m["inputs"]["events"]["name"] == "events.jsonl"
    assert "threads" in m and Path(m["artifacts"][0]["path"]).parent == Path(".")


def test_report(pipeline):
    root = pipeline
    run_ok("report", *FAST, "--data", root / "data", "--encoder", root / "enc.npz", "--values", root / "val.npz",
           "--split", "all", "--out", root / "report")  # fmt: skip
    out = root / "report"
    for name in ("scores.csv", "pairs.csv", "validation.json", "auc.json", "correlation.json", "curation.json"):
        assert (out / name).exists(), name
    corr = json.loads((out / "correlation.json").read_text())
    assert [b["max_length"] for b in corr["rating"]["bins"]] == [25, 50, 75, 100]
    m = json.loads((out / "manifest.json").read_text())
    assert {"curation.json", "roc_z.csv"} <= {a["path"] for a in m["artifacts"]}
