import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.io import wavfile

from taskforge import probes, report
from taskforge.cli import main
from taskforge.taskvec import base_hash_of
from taskforge.tensor_store import Checkpoint, load_checkpoint, save_checkpoint


@pytest.fixture
def models(tmp_path):
    g = np.random.default_rng(0)
    base_t = {f"enc.layers.{i}.w": g.standard_normal((8, 4)).astype(np.float32) for i in range(3)}
    base_t["head.w"] = g.standard_normal(5).astype(np.float32)
    base = Checkpoint(base_t, {"model_id": "base"})
    save_checkpoint(base, tmp_path / "base.safetensors")
    h = base_hash_of(base)
    paths = []
    for sid in ("G1", "G2", "G3"):
        t = {k: (v + 0.05 * g.standard_normal(v.shape)).astype(np.float32) for k, v in base_t.items()}
        p = tmp_path / f"{sid}.safetensors"
        save_checkpoint(Checkpoint(t, {"model_id": sid, "base_hash": h}), p)
        paths.append(p)
    return tmp_path, paths


def run(*argv):
    return main([str(a) for a in argv])


def extract_all(tmp, paths):
    out = []
    for p in paths:
        o = tmp / f"tv_{p.stem}.safetensors"
        assert run("tv", "extract", "--base", tmp / "base.safetensors", "--spec", p, "--exclude", "head.*", "-o", o) == 0
        out.append(o)
    return out


def test_ckpt_inspect_and_hash(models, capsys):
    tmp, paths = models
    assert run("ckpt", "inspect", paths[0], "--json") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_tensors"] == 4 and info["metadata"]["model_id"] == "G1"
    cfg = tmp / "c.json"
    cfg.write_text('{"b": 1,\n "a": [1, 2]}')
    assert run("ckpt", "hash", cfg) == 0
    h1 = capsys.readouterr().out.strip()
    cfg.write_text('{"a":[1,2],"b":1}')
    run("ckpt", "hash", cfg)
    assert capsys.readouterr().out.strip() == h1 and len(h1) == 64


def test_extract_merge_geom(models, capsys):
    tmp, paths = models
    tvs = extract_all(tmp, paths)
    assert load_checkpoint(tvs[0]).key_manifest == [f"enc.layers.{i}.w" for i in range(3)]
    out = tmp / "merged.safetensors"
    assert run("merge", "--strategy", "ties", "--k", "0.2", "--tv", tmp / "tv_*.safetensors",
               "--base", tmp / "base.safetensors", "-o", out, "--report", tmp / "merge.json", "--force") == 0
    rep = json.loads((tmp / "merge.json").read_text())
    report.validate(rep)
    assert rep["kind"] == "merge" and rep["tool"] == "taskforge"
    assert (tmp / "merge.timing.json").exists()
    assert run("geom", "--tv", *tvs, "--report", tmp / "geo.json", "--csv-dir", tmp / "csv", "--displacement") == 0
    geo = json.loads((tmp / "geo.json").read_text())
    assert geo["vector_ids"] == ["G1", "G2", "G3"]
    assert (tmp / "csv" / "cosine.csv").read_text().splitlines()[0] == "id,G1,G2,G3"
    assert len(geo["displacement"]) == 3


def test_sweep_writes_ten_outputs(models):
    tmp, paths = models
    tvs = extract_all(tmp, paths)
    assert run("merge", "--strategy", "task_arithmetic", "--tv", *tvs, "-o", tmp / "sw" / "ta.safetensors",
               "--report", tmp / "sw" / "ta.json", "--sweep", "lambda=0.1:1.0:0.1") == 0
    outs = sorted((tmp / "sw").glob("ta.lambda=*.safetensors"))
    assert len(outs) == 10
    assert len(list((tmp / "sw").glob("ta.lambda=*.json"))) == 20  # report plus timing sidecar


def test_reports_byte_identical_on_rerun(models):
    tmp, paths = models
    tvs = extract_all(tmp, paths)
    args = ["merge", "--strategy", "dare", "--p", "0.5", "--tv", *tvs, "-o"]
    run(*args, tmp / "a.safetensors", "--report", tmp / "a.json")
    run("--threads", "3", *args, tmp / "b.safetensors", "--report", tmp / "a2.json")
    assert (tmp / "a.safetensors").read_bytes() != b""
    assert load_checkpoint(tmp / "a.safetensors").tensors["enc.layers.0.w"].tobytes() == \
        load_checkpoint(tmp / "b.safetensors").tensors["enc.layers.0.w"].tobytes()
    ra = json.loads((tmp / "a.json").read_text())
    rb = json.loads((tmp / "a2.json").read_text())
    # output paths enter the config hash; everything else must agree across thread counts
    ra.pop("config_hash"), rb.pop("config_hash")
    assert ra == rb
    # the output path is part of the recorded invocation, so compare an exact rerun
    first = (tmp / "a.json").read_bytes()
    run(*args, tmp / "a.safetensors", "--report", tmp / "a.json")
    assert (tmp / "a.json").read_bytes() == first


def test_extract_base_hash_mismatch(models, capsys):
    tmp, paths = models
    ck = load_checkpoint(paths[0])
    ck.metadata["base_hash"] = "0" * 64
    save_checkpoint(ck, tmp / "bad.safetensors")
    out = tmp / "tv_bad.safetensors"
    assert run("tv", "extract", "--base", tmp / "base.safetensors", "--spec", tmp / "bad.safetensors", "-o", out) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "IncompatibleTaskVectors" and err["command"] == "tv"
    assert not out.exists()


def _pipeline_cfg(tmp, paths, base=None):
    doc = {
        "base": str(base or tmp / "base.safetensors"),
        "specialists": [{"id": p.stem, "path": str(p)} for p in paths],
        "strategies": [{"strategy": "task_arithmetic", "lambda": 0.5}],
        "exclude": ["head.*"],
        "report_dir": str(tmp / "run"),
    }
    p = tmp / "pipe.json"
    p.write_text(json.dumps(doc))
    return p


def test_pipeline_smoke(models):
    tmp, paths = models
    assert run("pipeline", "--config", _pipeline_cfg(tmp, paths[:2])) == 0
    merged = list((tmp / "run" / "merged").glob("*.safetensors"))
    assert len(merged) == 1
    geo = json.loads((tmp / "run" / "geometry.json").read_text())
    assert geo["vector_ids"] == ["G1", "G2"]
    assert (tmp / "run" / "summary.json").exists()


def test_pipeline_base_mismatch_writes_nothing(models, capsys):
    tmp, paths = models
    other = Checkpoint({k: v + 1 for k, v in load_checkpoint(tmp / "base.safetensors").tensors.items()},
                       {"model_id": "other"})
    save_checkpoint(other, tmp / "other.safetensors")
    assert run("pipeline", "--config", _pipeline_cfg(tmp, paths[:2], tmp / "other.safetensors")) != 0
    assert not (tmp / "run").exists()
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "IncompatibleTaskVectors" and err["partial_outputs"] == []


def test_synth_verify_and_pca(tmp_path):
    assert run("--seed", "3", "synth", "--mode", "disjoint", "--n", "3", "--dim", "300",
               "--norms", "13.58,9.51,6.86", "--outdir", tmp_path / "s", "--verify") == 0
    ver = json.loads((tmp_path / "s" / "verify.json").read_text())
    assert all(d["rel_error"] < 1e-6 for d in ver["displacement"])
    assert ver["seeds"]["seed"] == 3
    cks = sorted((tmp_path / "s").glob("synth*.safetensors"))
    assert run("pca", "--ckpt", *cks, "-o", tmp_path / "pca.csv", "--report", tmp_path / "pca.json") == 0
    assert len((tmp_path / "pca.csv").read_text().splitlines()) == 4


def test_lmc_commands(models, capsys):
    tmp, paths = models
    assert run("lmc", "interp", "--a", paths[0], "--b", paths[1], "--outdir", tmp / "path") == 0
    files = sorted((tmp / "path").glob("alpha=*.safetensors"))
    assert len(files) == 11
    a0 = load_checkpoint(tmp / "path" / "alpha=0.0.safetensors").tensors["head.w"]
    assert a0.tobytes() == load_checkpoint(paths[1]).tensors["head.w"].tobytes()
    (tmp / "l.csv").write_text("alpha,loss\n0.0,1.0\n0.5,2.0\n1.0,1.5\n")
    capsys.readouterr()
    assert run("lmc", "barrier", "--losses", tmp / "l.csv", "-o", tmp / "b.json") == 0
    assert "barrier = 0.5" in capsys.readouterr().out
    assert json.loads((tmp / "b.json").read_text())["barrier"] == 0.5


def test_stats_commands(tmp_path, capsys):
    from test_stats import COS, JSD, PAIRS

    rows = "\n".join(f"{l},{j},{c}" for l, j, c in zip(PAIRS, JSD, COS))
    (tmp_path / "p.csv").write_text("pair,jsd,cosine\n" + rows + "\n")
    assert run("stats", "spearman", "--csv", tmp_path / "p.csv", "--x", "jsd", "--y", "cosine",
               "--perm", "20000", "-o", tmp_path / "s.json") == 0
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["rho"] == pytest.approx(-0.9058, abs=1e-4) and doc["n"] == 10
    assert run("stats", "spearman", "--csv", tmp_path / "p.csv", "--x", "jsd", "--y", "cosine",
               "--exclude", "G4", "--exact") == 0
    assert "n = 6" in capsys.readouterr().out
    report.write_correctness(tmp_path / "a.csv", np.ones(40, int))
    report.write_correctness(tmp_path / "b.csv", np.zeros(40, int))
    assert run("stats", "bootstrap", "--a", tmp_path / "a.csv", "--b", tmp_path / "b.csv", "--n-boot", "200") == 0
    assert "delta = 1.0000" in capsys.readouterr().out


def test_probe_commands(tmp_path, capsys):
    tr = probes.synthetic_features(60, 3, 6, separation=8.0, seed=1)
    te = probes.synthetic_features(20, 3, 6, separation=8.0, seed=1, split_tag="test")
    probes.save_features_bin(tr, tmp_path / "tr.bin")
    probes.save_features_csv(te, tmp_path / "te.csv")
    assert run("probe", "train", "--train", tmp_path / "tr.bin", "-o", tmp_path / "m.npz", "--lr", "0.05",
               "--epochs", "30", "--batch-size", "32") == 0
    assert run("probe", "eval", "--model", tmp_path / "m.npz", "--test", tmp_path / "te.csv",
               "--correctness", tmp_path / "c1.csv") == 0
    assert run("probe", "knn", "--train", tmp_path / "tr.bin", "--test", tmp_path / "te.csv",
               "--correctness", tmp_path / "c2.csv", "-o", tmp_path / "knn.json") == 0
    assert json.loads((tmp_path / "knn.json").read_text())["accuracy"] >= 0.95
    assert run("probe", "gap", "--joint", tmp_path / "c1.csv", "--merged", tmp_path / "c2.csv",
               "--n-boot", "200", "-o", tmp_path / "gap.json") == 0
    assert "gap" in json.loads((tmp_path / "gap.json").read_text())


def test_spectral_commands(tmp_path):
    t = np.arange(3200) / 16000
    for g, f in (("A", 500.0), ("B", 2000.0)):
        d = tmp_path / g
        d.mkdir()
        for i in range(3):
            wavfile.write(d / f"{i}.wav", 16000, (0.3 * np.sin(2 * np.pi * (f + 10 * i) * t) * 32767).astype(np.int16))
        assert run("spectral", "profile", "--glob", str(d / "*.wav"), "--group", g, "-o", tmp_path / f"{g}.json") == 0
    assert run("spectral", "dist", "--profiles", tmp_path / "A.json", tmp_path / "B.json", "-o", tmp_path / "d.csv") == 0
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "a,b,jsd" and lines[1].startswith("A,B,")
    assert 0 < float(lines[1].split(",")[2]) <= 1


def test_bad_inputs_exit_2(tmp_path, capsys):
    (tmp_path / "junk.safetensors").write_bytes(b"\x01\x00")
    assert run("ckpt", "inspect", tmp_path / "junk.safetensors") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["tool"] == "taskforge" and err["message"]
    assert run("ckpt", "inspect", tmp_path / "missing.safetensors") == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "taskforge.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("taskforge ")
