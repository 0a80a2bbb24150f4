import json

import numpy as np
import pytest

from taskforge import pipeline, probes, report
from taskforge.pipeline import PipelineConfig, PipelineError, output_label, run_pipeline
from taskforge.spectral import SpectralProfile
from taskforge.taskvec import base_hash_of
from taskforge.tensor_store import Checkpoint, save_checkpoint


@pytest.fixture
def workspace(tmp_path):
    g = np.random.default_rng(1)
    base_t = {f"enc.layers.{i}.w": g.standard_normal((6, 5)).astype(np.float32) for i in range(2)}
    base = Checkpoint(base_t, {"model_id": "base"})
    save_checkpoint(base, tmp_path / "base.safetensors")
    for sid in ("G1", "G2", "G3"):
        t = {k: (v + 0.1 * g.standard_normal(v.shape)).astype(np.float32) for k, v in base_t.items()}
        save_checkpoint(Checkpoint(t, {"model_id": sid, "base_hash": base_hash_of(base)}),
                        tmp_path / f"{sid}.safetensors")
    doc = {
        "base": "base.safetensors",
        "specialists": [{"id": s, "path": f"{s}.safetensors"} for s in ("G1", "G2", "G3")],
        "strategies": [
            {"strategy": "task_arithmetic", "lambda": "0.5:1.0:0.5"},
            {"strategy": "ties", "k": [0.2]},
            {"strategy": "dare", "p": 0.5},
        ],
        "report_dir": "out",
        "n_perm": 2000,
        "n_boot": 500,
    }
    return tmp_path, doc


def test_config_grids_and_labels(workspace):
    tmp, doc = workspace
    cfg = PipelineConfig.from_dict(doc, tmp)
    assert cfg.base_path == tmp / "base.safetensors"
    points = [p for sg in cfg.strategies for p in sg.points()]
    assert points == [{"lambda": 0.5}, {"lambda": 1.0}, {"k": 0.2}, {"p": 0.5}]
    assert output_label("task_arithmetic", {"lambda": 0.5}) == "task_arithmetic_lambda=0.5"
    assert len(cfg.hash) == 64


@pytest.mark.parametrize("edit", [
    lambda d: d.pop("base"),
    lambda d: d.update(strategies=[{"strategy": "negation"}]),
    lambda d: d.update(strategies=[{"strategy": "ties", "k": []}]),
    lambda d: d.update(specialists=[{"id": "G1", "path": "G1.safetensors"}] * 2),
    lambda d: d.update(base="nope.safetensors"),
    lambda d: d.update(strategies=[{"strategy": "dare", "p": 1.0}]),
])
def test_invalid_configs_fail_before_writing(workspace, edit):
    tmp, doc = workspace
    edit(doc)
    try:
        cfg = PipelineConfig.from_dict(doc, tmp)
    except PipelineError:
        return
    res = run_pipeline(cfg)
    assert res.status == 2 and res.outputs == []
    assert not (tmp / "out").exists()


def test_full_run_outputs_and_reproducibility(workspace):
    tmp, doc = workspace
    res = run_pipeline(PipelineConfig.from_dict(doc, tmp))
    assert res.status == 0, res.error
    out = tmp / "out"
    assert len(list((out / "merged").glob("*.safetensors"))) == 4
    assert len(list((out / "merge_reports").glob("*.json"))) == 8  # reports and timing sidecars
    summary = json.loads((out / "summary.json").read_text())
    report.validate(summary)
    assert [r["output"] for r in summary["rows"]][:2] == ["task_arithmetic_lambda=0.5", "task_arithmetic_lambda=1.0"]
    assert all(r["accuracy"] is None for r in summary["rows"])
    snapshot = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file() and "timing" not in p.name}
    run_pipeline(PipelineConfig.from_dict(doc, tmp))
    again = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file() and "timing" not in p.name}
    assert again == snapshot


def test_features_and_profiles(workspace):
    tmp, doc = workspace
    feats = {}
    for label, sep in (("joint", 6.0), ("task_arithmetic_lambda=0.5", 2.0)):
        for split in ("train", "test"):
            fs = probes.synthetic_features(40, 3, 4, separation=sep, seed=3, split_tag=split)
            p = tmp / f"{label}.{split}.bin"
            probes.save_features_bin(fs, p)
            feats.setdefault(label, {})[split] = p.name
    doc["features"] = feats
    g = np.random.default_rng(2)
    doc["profiles"] = {}
    for sid in ("G1", "G2", "G3"):
        SpectralProfile(sid, g.standard_normal(128), 5).save(tmp / f"{sid}.profile.json")
        doc["profiles"][sid] = f"{sid}.profile.json"
    res = run_pipeline(PipelineConfig.from_dict(doc, tmp))
    assert res.status == 0, res.error
    row = next(r for r in res.summary if r["output"] == "task_arithmetic_lambda=0.5")
    assert 0 <= row["accuracy"] <= 1
    assert row["gap_ci_lo"] <= row["gap"] <= row["gap_ci_hi"]
    summary = json.loads((tmp / "out" / "summary.json").read_text())
    sc = summary["spectral_correlation"]
    assert sc["pairs"] == ["G1-G2", "G1-G3", "G2-G3"] and -1 <= sc["rho"] <= 1


def test_failure_after_writing_leaves_error_record(workspace, monkeypatch):
    tmp, doc = workspace

    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(pipeline, "merge", boom)
    res = run_pipeline(PipelineConfig.from_dict(doc, tmp))
    assert res.status == 1
    err = json.loads((tmp / "out" / "error.json").read_text())
    assert err["error"] == "FloatingPointError" and err["stage_started_writing"] is True
    assert any(p.endswith("geometry.json") for p in err["partial_outputs"])
