"""``taskforge`` command line entry point."""

from __future__ import annotations

import argparse
import csv
import glob as globmod
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, geometry, lmc, merge as merging, parallel, probes, report, spectral, stats, synth
from .grids import parse_assignment, parse_grid
from .pipeline import PipelineConfig, run_pipeline
from .taskvec import TaskVector, apply, extract
from .tensor_store import (
    CheckpointError,
    canonical_json,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("taskforge")

SWEEP_KEYS = {"lambda": "lam", "p": "drop_rate", "k": "trim_fraction", "gamma": "gamma", "beta": "beta"}


def _invocation(args: argparse.Namespace) -> dict:
    """Deterministic view of the parsed arguments for provenance hashing."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "threads")}


def _seeds(args) -> dict:
    return {"seed": args.seed}


def _expand(patterns) -> list[str]:
    out = []
    for p in patterns:
        hits = sorted(globmod.glob(p))
        out.extend(hits if hits else [p])
    return out


def _load_tvs(paths, strict) -> list[TaskVector]:
    return [TaskVector.from_checkpoint(load_checkpoint(p, strict=strict)) for p in _expand(paths)]


def _print_table(header, rows) -> None:
    cells = [[str(h) for h in header]] + [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


# -- ckpt / tv -------------------------------------------------------------


def cmd_ckpt_inspect(args) -> int:
    ck = load_checkpoint(args.path, strict=args.strict)
    info = {
        "path": str(args.path),
        "metadata": ck.metadata,
        "n_tensors": len(ck.tensors),
        "n_params": ck.n_params,
        "tensors": [{"name": n, "shape": list(ck.tensors[n].shape)} for n in ck.key_manifest],
    }
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
    else:
        print(f"{args.path}: {info['n_tensors']} tensors, {info['n_params']} parameters")
        for k, v in sorted(ck.metadata.items()):
            print(f"  {k} = {v}")
        _print_table(["name", "shape"], [(t["name"], tuple(t["shape"])) for t in info["tensors"]])
    return 0


def cmd_ckpt_hash(args) -> int:
    raw = Path(args.config).read_bytes()
    if not args.raw:
        raw = canonical_json(json.loads(raw))
    print(config_hash(raw))
    return 0


def cmd_tv_extract(args) -> int:
    base = load_checkpoint(args.base, strict=args.strict)
    spec = load_checkpoint(args.spec, strict=args.strict)
    tv = extract(base, spec, args.exclude, specialist_id=args.id, force=args.force)
    save_checkpoint(tv.to_checkpoint(), args.output)
    print(f"wrote {args.output}: {len(tv.delta)} tensors, specialist {tv.specialist_id}")
    return 0


# -- merge -----------------------------------------------------------------


def _merge_spec(args, **override) -> merging.MergeSpec:
    kw = dict(strategy=args.strategy, lam=args.lam, drop_rate=args.p, trim_fraction=args.k, gamma=args.gamma,
              beta=args.beta, base_seed=args.seed, seed_policy=args.seed_policy, trim_scope=args.trim_scope,
              della_max_scope=args.della_max_scope)
    kw.update(override)
    return merging.MergeSpec(**kw)


def _sweep_path(path: str, name: str, value: float) -> Path:
    p = Path(path)
    suffixes = "".join(p.suffixes)
    stem = p.name[: -len(suffixes)] if suffixes else p.name
    return p.with_name(f"{stem}.{name}={value!r}{suffixes}")


def cmd_merge(args) -> int:
    tvs = _load_tvs(args.tv, args.strict)
    base = load_checkpoint(args.base, strict=args.strict) if args.base else None
    if args.sweep:
        name, values = parse_assignment(args.sweep)
        if name not in SWEEP_KEYS:
            raise ValueError(f"cannot sweep {name!r}; choose from {sorted(SWEEP_KEYS)}")
        points = [(name, v) for v in values]
    else:
        points = [(None, None)]
    # validate every grid point before writing anything
    specs = [_merge_spec(args, **({SWEEP_KEYS[n]: v} if n else {})) for n, v in points]
    for s in specs:
        s.validate()
    rows = []
    for (name, value), spec in zip(points, specs):
        delta, rep = merging.merge(tvs, spec, force=args.force)
        out = _sweep_path(args.output, name, value) if name else Path(args.output)
        if base is not None:
            ck = apply(base, delta, model_id=out.name)
        else:
            ck = TaskVector(delta, f"merged-{spec.strategy}", tvs[0].base_hash).to_checkpoint()
        save_checkpoint(ck, out)
        if args.report:
            rpath = _sweep_path(args.report, name, value) if name else Path(args.report)
            report.write_report(rpath, "merge", rep.to_dict(), _invocation(args), _seeds(args),
                                timing={"wall_time": rep.wall_time})
        rf = rep.retained_fraction
        rows.append((str(out), sum(rf.values()) / len(rf), "" if rep.sign_conflicts is None else rep.sign_conflicts))
    _print_table(["output", "mean_retained", "sign_conflicts"], rows)
    return 0


# -- geometry --------------------------------------------------------------


def cmd_geom(args) -> int:
    tvs = _load_tvs(args.tv, args.strict)
    geo = geometry.geometry_report(tvs, args.threshold)
    payload = geo.to_dict()
    layers = geometry.per_layer_report(tvs, args.layer_pattern)
    payload["layers"] = layers.to_dict()
    if args.displacement:
        payload["displacement"] = [geometry.displacement_check(tvs, i) for i in range(len(tvs))]
    report.write_report(args.report, "geometry", payload, _invocation(args), _seeds(args))
    if args.csv_dir:
        d = Path(args.csv_dir)
        report.write_matrix_csv(d / "cosine.csv", geo.vector_ids, geo.cosine)
        report.write_matrix_csv(d / "sign_agreement.csv", geo.vector_ids, geo.sign_agreement)
        report.write_csv(d / "layers.csv", ["vector_id", *layers.layer_labels],
                         ([i, *row] for i, row in zip(layers.vector_ids, layers.per_layer_norms)))
    _print_table(["vector", "l2", "mean_abs", "sparsity"],
                 list(zip(geo.vector_ids, geo.l2_norms, geo.mean_abs, geo.sparsity)))
    return 0


def cmd_pca(args) -> int:
    paths = _expand(args.ckpt)
    cks = [load_checkpoint(p, strict=args.strict) for p in paths]
    ids = [c.model_id or Path(p).name for c, p in zip(cks, paths)]
    res = geometry.checkpoint_pca([c.tensors for c in cks], args.components, ids)
    header = ["id", *(f"pc{i + 1}" for i in range(args.components))]
    report.write_csv(args.output, header, ([i, *row] for i, row in zip(res.point_ids, res.coordinates)))
    if args.report:
        report.write_report(args.report, "pca", res.to_dict(), _invocation(args), _seeds(args))
    print("explained variance ratio:", " ".join(f"{r:.4f}" for r in res.explained_variance_ratio))
    return 0


# -- lmc -------------------------------------------------------------------


def cmd_lmc_interp(args) -> int:
    a = load_checkpoint(args.a, strict=args.strict)
    b = load_checkpoint(args.b, strict=args.strict)
    alphas = parse_grid(args.alphas)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for alpha, ck in lmc.iter_interpolate(a, b, alphas):
        save_checkpoint(ck, outdir / f"alpha={alpha!r}.safetensors")
    print(f"wrote {len(alphas)} checkpoints to {outdir}")
    return 0


def cmd_lmc_barrier(args) -> int:
    alphas, losses = lmc.read_losses_csv(args.losses, args.column)
    lmc.validate_alphas(alphas)
    b = lmc.barrier(losses)
    doc = {"alphas": alphas, "losses": losses, "barrier": b, "loss_column": args.column}
    if args.output:
        report.write_report(args.output, "barrier", doc, _invocation(args), _seeds(args))
    print(f"barrier = {b!r}")
    return 0


# -- spectral --------------------------------------------------------------


def cmd_spectral_profile(args) -> int:
    paths = sorted(globmod.glob(args.glob))
    prof = spectral.profile_from_files(paths, args.group, max_clips=args.max_clips, seed=args.seed)
    prof.save(args.output)
    print(f"{args.group}: {prof.clip_count} clips -> {args.output}")
    return 0


def cmd_spectral_dist(args) -> int:
    profs = [spectral.SpectralProfile.load(p) for p in _expand(args.profiles)]
    rows = spectral.pairwise_distances(profs, args.metric, args.base)
    report.write_csv(args.output, ["a", "b", args.metric], rows)
    _print_table(["a", "b", args.metric], rows)
    return 0


# -- stats -----------------------------------------------------------------


def _read_pairs(path, x, y, label) -> stats.PairedSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    for col in (x, y):
        if col not in rows[0]:
            raise ValueError(f"{path}: no column {col!r} (have {list(rows[0])})")
    if label is None:
        label = next((c for c in rows[0] if c not in (x, y)), None)
    labels = [r[label] if label else str(i) for i, r in enumerate(rows)]
    return stats.PairedSeries(labels, [float(r[x]) for r in rows], [float(r[y]) for r in rows])


def cmd_stats_spearman(args) -> int:
    series = _read_pairs(args.csv, args.x, args.y, args.label)
    if args.exclude:
        series = series.subset([args.exclude not in lab for lab in series.labels])
    res = stats.permutation_test(series, n_perm=args.perm, seed=args.seed, exact=args.exact)
    doc = {"x": args.x, "y": args.y, "labels": series.labels, "n": len(series.labels), "rho": res.rho,
           "p_two_sided": res.p_two_sided, "n_perm": res.n_perm, "exceed": res.exceed, "method": res.method}
    if args.output:
        report.write_report(args.output, "spearman", doc, _invocation(args), _seeds(args))
    print(f"n = {doc['n']}  rho = {res.rho:.4f}  p = {res.p_two_sided:.3g} ({res.method}, {res.n_perm} permutations)")
    return 0


def cmd_stats_bootstrap(args) -> int:
    a = report.read_correctness(args.a, args.column)
    b = report.read_correctness(args.b, args.column)
    res = stats.paired_bootstrap_ci(a, b, n_boot=args.n_boot, level=args.level, seed=args.seed)
    doc = {"delta": res.delta, "ci": [res.lo, res.hi], "level": res.level, "n_boot": res.n_boot, "n": int(a.size)}
    if args.output:
        report.write_report(args.output, "bootstrap", doc, _invocation(args), _seeds(args))
    print(f"delta = {res.delta:.4f}  {res.level:.0%} CI [{res.lo:.4f}, {res.hi:.4f}]")
    return 0


# -- probes ----------------------------------------------------------------


def cmd_probe_train(args) -> int:
    train = probes.load_features(args.train, "train")
    cfg = probes.ProbeConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    model = probes.train_linear_probe(train, cfg, n_classes=args.n_classes)
    with open(args.output, "wb") as fh:
        model.save(fh)
    print(f"final training loss {model.epoch_losses[-1]:.6g} -> {args.output}")
    return 0


def _eval_outputs(args, res: probes.EvalResult, kind: str) -> None:
    if args.correctness:
        report.write_correctness(args.correctness, res.correctness)
    if args.output:
        report.write_report(args.output, kind, {"accuracy": res.accuracy, "n": int(res.correctness.size)},
                            _invocation(args), _seeds(args))
    print(f"accuracy = {res.accuracy:.4f} ({int(res.correctness.sum())}/{res.correctness.size})")


def cmd_probe_eval(args) -> int:
    model = probes.ProbeModel.load(args.model)
    res = probes.evaluate(model, probes.load_features(args.test, "test"))
    _eval_outputs(args, res, "probe_eval")
    return 0


def cmd_probe_knn(args) -> int:
    train = probes.load_features(args.train, "train")
    test = probes.load_features(args.test, "test")
    res = probes.knn_classify(train, test, k=args.k, strict=args.strict)
    _eval_outputs(args, res, "knn_eval")
    return 0


def cmd_probe_gap(args) -> int:
    joint = report.read_correctness(args.joint)
    merged = report.read_correctness(args.merged)
    doc = probes.composition_gap(joint, merged, n_boot=args.n_boot, level=args.level, seed=args.seed)
    if args.output:
        report.write_report(args.output, "gap", doc, _invocation(args), _seeds(args))
    lo, hi = doc["ci"]
    print(f"gap = {doc['gap']:.4f}  CI [{lo:.4f}, {hi:.4f}]")
    return 0


# -- synth / pipeline ------------------------------------------------------


def cmd_synth(args) -> int:
    norms = [float(v) for v in args.norms.split(",")] if args.norms else []
    spec = synth.SynthSpec(n_vectors=args.n, dim=args.dim, target_norms=norms, mode=args.mode,
                           target_cosine=args.cosine, sparsity=args.sparsity, seed=args.seed,
                           n_tensors=args.n_tensors)
    tvs = synth.generate(spec)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for tv in tvs:
        save_checkpoint(tv.to_checkpoint(), outdir / f"{tv.specialist_id}.safetensors")
    if args.verify:
        ks = parse_grid(args.ks)
        report.write_report(outdir / "verify.json", "synth_verify", synth.verify_predictions(tvs, ks),
                            _invocation(args), _seeds(args))
    print(f"wrote {len(tvs)} task vectors to {outdir}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.force:
        cfg.force = True
    if args.seed_given:
        cfg.seed = args.seed
    cfg.strict = cfg.strict and args.strict
    res = run_pipeline(cfg)
    if res.error:
        print(json.dumps(res.error, sort_keys=True), file=sys.stderr)
        return res.status
    header = ["output", "mean_retained_fraction", "sign_conflicts", "accuracy", "gap"]
    _print_table(header, [["" if r[h] is None else r[h] for h in header] for r in res.summary])
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taskforge", description="Task-vector merging and weight-space analysis.")
    ap.add_argument("--version", action="version", version=f"taskforge {__version__}")
    ap.add_argument("--seed", type=int, default=None, help="base seed for every stochastic step (default 42)")
    ap.add_argument("--threads", type=int, default=None, help="worker threads; results do not depend on it")
    ap.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                    help="reject NaN/Inf tensors and zero-norm kNN rows (default on)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    ck = sub.add_parser("ckpt", help="inspect checkpoints, hash configs").add_subparsers(dest="action", required=True)
    p = ck.add_parser("inspect")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ckpt_inspect)
    p = ck.add_parser("hash", help="SHA-256 of a config file in canonical JSON form")
    p.add_argument("config")
    p.add_argument("--raw", action="store_true", help="hash the file bytes as they are")
    p.set_defaults(func=cmd_ckpt_hash)

    tv = sub.add_parser("tv", help="task vectors").add_subparsers(dest="action", required=True)
    p = tv.add_parser("extract")
    p.add_argument("--base", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--exclude", action="append", default=[], help="name glob to skip (repeatable)")
    p.add_argument("--id", default=None, help="specialist id (default: model_id of --spec)")
    p.add_argument("--force", action="store_true", help="accept a base_hash mismatch")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_tv_extract)

    p = sub.add_parser("merge", help="merge task vectors")
    p.add_argument("--strategy", required=True, choices=merging.STRATEGIES)
    p.add_argument("--tv", action="extend", nargs="+", required=True, help="task vector files or globs")
    p.add_argument("--base", default=None, help="write base + merged delta instead of the delta")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--p", type=float, default=0.0, help="DARE drop rate / DELLA target")
    p.add_argument("--k", type=float, default=0.0, help="TIES trim fraction")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--seed-policy", choices=("by_name", "by_index"), default="by_name")
    p.add_argument("--trim-scope", choices=("global", "per_tensor"), default="global")
    p.add_argument("--della-max-scope", choices=("per_tensor", "global"), default="per_tensor")
    p.add_argument("--sweep", default=None, help="name=start:stop:step, e.g. lambda=0.1:1.0:0.1")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("geom", help="geometry report")
    p.add_argument("--tv", nargs="+", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--layer-pattern", default=geometry.DEFAULT_LAYER_PATTERN)
    p.add_argument("--threshold", type=float, default=geometry.DEFAULT_THRESHOLD)
    p.add_argument("--csv-dir", default=None)
    p.add_argument("--displacement", action="store_true")
    p.set_defaults(func=cmd_geom)

    p = sub.add_parser("pca", help="PCA of checkpoints")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_pca)

    lm = sub.add_parser("lmc", help="linear mode connectivity").add_subparsers(dest="action", required=True)
    p = lm.add_parser("interp")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--alphas", default="0:1:0.1")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_lmc_interp)
    p = lm.add_parser("barrier")
    p.add_argument("--losses", required=True, help="CSV with alpha and loss columns")
    p.add_argument("--column", default="loss")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_lmc_barrier)

    sp = sub.add_parser("spectral", help="spectral profiles").add_subparsers(dest="action", required=True)
    p = sp.add_parser("profile")
    p.add_argument("--glob", required=True)
    p.add_argument("--group", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--max-clips", type=int, default=500)
    p.set_defaults(func=cmd_spectral_profile)
    p = sp.add_parser("dist")
    p.add_argument("--profiles", nargs="+", required=True)
    p.add_argument("--metric", choices=sorted(spectral.METRICS), default="jsd")
    p.add_argument("--base", type=float, default=2.0, help="JSD logarithm base")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_spectral_dist)

    st = sub.add_parser("stats", help="correlation and bootstrap").add_subparsers(dest="action", required=True)
    p = st.add_parser("spearman")
    p.add_argument("--csv", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--label", default=None, help="label column (default: first other column)")
    p.add_argument("--exclude", default=None, help="drop rows whose label contains this text")
    p.add_argument("--perm", type=int, default=100_000)
    p.add_argument("--exact", action="store_true", help="enumerate all permutations (n <= 9)")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_stats_spearman)
    p = st.add_parser("bootstrap")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--column", default=None)
    p.add_argument("--n-boot", type=int, default=10_000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_stats_bootstrap)

    pr = sub.add_parser("probe", help="linear probe and kNN").add_subparsers(dest="action", required=True)
    p = pr.add_parser("train")
    p.add_argument("--train", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--n-classes", type=int, default=None)
    p.set_defaults(func=cmd_probe_train)
    for name, fn in (("eval", cmd_probe_eval), ("knn", cmd_probe_knn)):
        p = pr.add_parser(name)
        if name == "eval":
            p.add_argument("--model", required=True)
        else:
            p.add_argument("--train", required=True)
            p.add_argument("--k", type=int, default=1)
        p.add_argument("--test", required=True)
        p.add_argument("--correctness", default=None, help="write per-example 0/1 CSV")
        p.add_argument("-o", "--output", default=None)
        p.set_defaults(func=fn)
    p = pr.add_parser("gap")
    p.add_argument("--joint", required=True, help="correctness CSV of the joint model")
    p.add_argument("--merged", required=True, help="correctness CSV of the merged model")
    p.add_argument("--n-boot", type=int, default=10_000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_probe_gap)

    p = sub.add_parser("synth", help="synthetic task vectors")
    p.add_argument("--mode", choices=synth.MODES, default="gaussian")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--norms", default=None, help="comma-separated target L2 norms")
    p.add_argument("--cosine", type=float, default=0.0)
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--n-tensors", type=int, default=1)
    p.add_argument("--outdir", required=True)
    p.add_argument("--verify", action="store_true", help="also write verify.json with prediction checks")
    p.add_argument("--ks", default="0.1,0.2,0.5,0.8")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="run a JSON-configured batch")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 42
    if args.threads is not None:
        parallel.set_threads(args.threads)
    try:
        return args.func(args)
    except (CheckpointError, ValueError, OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        err = {"tool": report.TOOL, "version": __version__, "command": args.command,
               "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
