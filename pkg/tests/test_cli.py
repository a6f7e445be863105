import csv
import json
import os

import numpy as np
import pytest

from tgpt import anno, cli, pipeline, predfile

SMALL = {"clips_per_scenario": 5, "n_points": 2, "clip_size": "short", "steps": 2,
         "scenarios": ["Instrument Occlusion", "Cauterization Smoke"]}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("TGPT_SEED", raising=False)


def read(p):
    with open(p, "rb") as fh:
        return fh.read()


def test_gen_counts_with_clean(tmp_path):
    out = tmp_path / "clips"
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"clips_per_scenario": 5, "n_points": 1, "clip_size": "short"}))
    assert cli.main(["gen", "--config", str(cfgp), "--out", str(out)]) == 0
    names = os.listdir(out)
    assert sum(n.endswith(".vlspt.json") for n in names) == 30
    assert sum(n.endswith(".frames.bin") for n in names) == 30
    split = json.loads((out / "split.json").read_text())
    assert len(split["train"]) == 24 and len(split["test"]) == 6
    assert cli.main(["validate"] + [str(out / n) for n in names if n.endswith(".vlspt.json")]) == 0


def test_train_twice_identical(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["train", "--config", cfg_file, "--seed", "7", "--out", str(d)]) == 0
    assert read(a / "checkpoint.tgpt") == read(b / "checkpoint.tgpt")
    assert read(a / "loss.csv") == read(b / "loss.csv")
    with open(a / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "clip_id", "total", "points", "smooth", "text"]
    assert len(rows) == 2
    for r in rows:
        assert float(r["total"]) == float(r["points"]) + float(r["smooth"]) + float(r["text"])
    assert json.loads((a / "config.json").read_text())["seed"] == 7


def test_env_seed_overrides_flag(tmp_path, cfg_file, monkeypatch):
    assert cli.main(["train", "--config", cfg_file, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("TGPT_SEED", "3")
    assert cli.main(["train", "--config", cfg_file, "--seed", "99", "--out", str(tmp_path / "b")]) == 0
    assert read(tmp_path / "a" / "checkpoint.tgpt") == read(tmp_path / "b" / "checkpoint.tgpt")


def test_eval_identity(tmp_path, cfg_file):
    clips = tmp_path / "clips"
    assert cli.main(["gen", "--config", cfg_file, "--no-clean", "--out", str(clips)]) == 0
    preds = tmp_path / "preds"
    preds.mkdir()
    for name in os.listdir(clips):
        if name.endswith(".vlspt.json"):
            a = anno.read_clip(clips / name)
            predfile.write_pred(preds / (a.clip_id + ".pred.json"), predfile.from_annotation(a))
    out = tmp_path / "rep"
    assert cli.main(["eval", "--clips", str(clips), "--preds", str(preds), "--out", str(out)]) == 0
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    for r in rows:
        assert float(r["aj"]) == float(r["delta_avg"]) == float(r["oa"]) == 1.0
        assert float(r["epe"]) == 0.0 or r["epe"] == "nan"
    assert (out / "delta_curves.png").exists() and (out / "status_recall.png").exists()
    assert "Mean Results" in (out / "report.md").read_text()


def test_track_then_eval(tmp_path, cfg_file):
    clips, run = tmp_path / "clips", tmp_path / "run"
    assert cli.main(["gen", "--config", cfg_file, "--no-clean", "--out", str(clips)]) == 0
    assert cli.main(["train", "--config", cfg_file, "--clips", str(clips), "--out", str(run)]) == 0
    assert cli.main(["track", str(run / "checkpoint.tgpt"), "--config", cfg_file, "--clips", str(clips),
                     "--out", str(run / "preds")]) == 0
    assert len(os.listdir(run / "preds")) == 2          # test split only
    p = predfile.read_pred(run / "preds" / sorted(os.listdir(run / "preds"))[0])
    assert np.array_equal(p.coords, p.coarse + p.offsets) or np.allclose(p.coords, p.coarse + p.offsets, atol=2e-6)
    assert cli.main(["eval", "--clips", str(clips), "--preds", str(run / "preds"), "--out", str(run),
                     "--no-figures"]) == 0
    assert (run / "report.csv").exists() and not (run / "delta_curves.png").exists()


def test_run_layout_and_determinism(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["run", "--config", cfg_file, "--out", str(d)]) == 0
    for rel in ("config.json", "checkpoint.tgpt", "loss.csv", "report.md", "report.csv",
                "delta_curves.png", "status_recall.png", "loss_curve.png"):
        assert read(a / rel) == read(b / rel), rel
    assert sorted(os.listdir(a / "preds")) == sorted(os.listdir(b / "preds"))
    for n in os.listdir(a / "preds"):
        assert read(a / "preds" / n) == read(b / "preds" / n)


def test_ablate_four_rows(tmp_path):
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps(dict(SMALL, steps=1, scenarios=["Clean"])))
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(cfgp), "--out", str(out)]) == 0
    md = (out / "ablation.md").read_text().strip().splitlines()
    assert md[0].startswith("| Text | Clip size | AJ")
    body = md[2:]
    assert len(body) == 4
    assert [r.split("|")[1].strip() + r.split("|")[2].strip() for r in body] == \
        ["✓short", "✗short", "✓long", "✗long"]
    assert (out / "ablation.png").exists() and (out / "ablation.csv").exists()


@pytest.mark.parametrize("argv,category", [
    (["eval", "--clips", "/nonexistent", "--preds", "/nonexistent"], "FileNotFound"),
    (["track", "/nonexistent.tgpt", "--clips", "/nonexistent"], "FileNotFound"),
])
def test_errors_exit_nonzero(argv, category, capsys):
    assert cli.main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {category}:")


def test_bad_config_key(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"stpes": 3}))
    assert cli.main(["train", "--config", str(p)]) == 2
    assert capsys.readouterr().err.startswith("error: ConfigError: unknown config keys")


def test_bad_env_seed(monkeypatch, capsys):
    monkeypatch.setenv("TGPT_SEED", "abc")
    assert cli.main(["train", "--steps", "0"]) == 2
    assert "TGPT_SEED" in capsys.readouterr().err


def test_validate_reports_violation(tmp_path, capsys):
    p = tmp_path / "x.vlspt.json"
    p.write_text('{"clip_id": "x"}')
    assert cli.main(["validate", str(p)]) == 1
    assert "SchemaViolation" in capsys.readouterr().out


def test_bad_checkpoint(tmp_path, capsys, cfg_file):
    ck = tmp_path / "c.tgpt"
    ck.write_bytes(b"nope")
    clips = tmp_path / "clips"
    clips.mkdir()
    assert cli.main(["track", str(ck), "--clips", str(clips), "--all"]) == 2
    assert capsys.readouterr().err.startswith("error: BadCheckpoint")


def test_config_roundtrip(tmp_path):
    cfg = pipeline.load_config(None, seed=5, steps=10)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert pipeline.load_config(str(p)) == cfg
