"""Batch mode: extract task vectors, merge over strategy grids, report geometry and stats.

Every input is loaded and checked before the first output is written, so a
bad config or an incompatible specialist leaves the report directory
untouched. A failure after writing has started produces ``error.json``
listing the partial outputs.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, geometry, probes, report, stats
from .grids import parse_grid
from .merge import STRATEGIES, MergeSpec, merge
from .spectral import SpectralProfile, jsd
from .taskvec import apply, extract
from .tensor_store import canonical_json, config_hash, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# config key -> MergeSpec field
GRID_KEYS = {"lambda": "lam", "p": "drop_rate", "k": "trim_fraction", "gamma": "gamma"}
KEY_ORDER = ("lambda", "p", "k", "gamma")


class PipelineError(ValueError):
    pass


@dataclass
class StrategyGrid:
    strategy: str
    grids: dict[str, list[float]]

    def points(self) -> list[dict[str, float]]:
        keys = [k for k in KEY_ORDER if k in self.grids]
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grids[k] for k in keys))]


@dataclass
class PipelineConfig:
    base_path: Path
    specialists: list[tuple[str, Path]]
    strategies: list[StrategyGrid]
    report_dir: Path
    seed: int = 42
    seed_policy: str = "by_name"
    exclude: list[str] = field(default_factory=list)
    threshold: float = geometry.DEFAULT_THRESHOLD
    layer_pattern: str = geometry.DEFAULT_LAYER_PATTERN
    write_checkpoints: bool = True
    force: bool = False
    strict: bool = True
    features: dict[str, dict[str, Path]] = field(default_factory=dict)
    profiles: dict[str, Path] = field(default_factory=dict)
    n_perm: int = 100_000
    n_boot: int = 10_000
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict, root: Path | str = ".") -> "PipelineConfig":
        """Parse a JSON config; relative paths resolve against ``root``."""
        root = Path(root)

        def path(p):
            p = Path(p)
            return p if p.is_absolute() else root / p

        try:
            specs = [(str(s["id"]), path(s["path"])) for s in doc["specialists"]]
            strategies = []
            for entry in doc.get("strategies", [{"strategy": "simple_average"}]):
                entry = dict(entry)
                name = entry.pop("strategy")
                grids = {}
                for key, val in entry.items():
                    if key not in GRID_KEYS:
                        raise PipelineError(f"strategy {name!r}: unknown parameter {key!r}")
                    if isinstance(val, str):
                        grids[key] = parse_grid(val)
                    elif isinstance(val, list):
                        grids[key] = [float(v) for v in val]
                    else:
                        grids[key] = [float(val)]
                strategies.append(StrategyGrid(name, grids))
            cfg = cls(
                base_path=path(doc["base"]),
                specialists=specs,
                strategies=strategies,
                report_dir=path(doc["report_dir"]),
                seed=int(doc.get("seed", 42)),
                seed_policy=doc.get("seed_policy", "by_name"),
                exclude=list(doc.get("exclude", [])),
                threshold=float(doc.get("threshold", geometry.DEFAULT_THRESHOLD)),
                layer_pattern=doc.get("layer_pattern", geometry.DEFAULT_LAYER_PATTERN),
                write_checkpoints=bool(doc.get("write_checkpoints", True)),
                force=bool(doc.get("force", False)),
                strict=bool(doc.get("strict", True)),
                features={k: {s: path(p) for s, p in v.items()} for k, v in doc.get("features", {}).items()},
                profiles={k: path(v) for k, v in doc.get("profiles", {}).items()},
                n_perm=int(doc.get("n_perm", 100_000)),
                n_boot=int(doc.get("n_boot", 10_000)),
                raw=doc,
            )
        except KeyError as exc:
            raise PipelineError(f"config is missing required field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, PipelineError):
                raise
            raise PipelineError(f"invalid config: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PipelineError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def validate(self) -> None:
        if not self.specialists:
            raise PipelineError("no specialists listed")
        ids = [i for i, _ in self.specialists]
        if len(set(ids)) != len(ids):
            raise PipelineError(f"duplicate specialist ids: {ids}")
        files = [self.base_path, *(p for _, p in self.specialists)]
        files += [p for fs in self.features.values() for p in fs.values()]
        files += list(self.profiles.values())
        missing = [str(p) for p in files if not Path(p).is_file()]
        if missing:
            raise PipelineError(f"missing input files: {missing}")
        if not self.strategies:
            raise PipelineError("no merge strategies listed")
        for sg in self.strategies:
            if sg.strategy not in STRATEGIES or sg.strategy == "negation":
                raise PipelineError(f"unsupported pipeline strategy {sg.strategy!r}")
            if any(len(v) == 0 for v in sg.grids.values()):
                raise PipelineError(f"strategy {sg.strategy!r} has an empty grid")
            for point in sg.points():
                self.merge_spec(sg.strategy, point).validate()
        for label, fs in self.features.items():
            if set(fs) != {"train", "test"}:
                raise PipelineError(f"features[{label!r}] needs exactly 'train' and 'test'")
        if self.profiles and set(self.profiles) != set(ids):
            raise PipelineError("profiles must be given for every specialist id")
        if self.seed_policy not in ("by_name", "by_index"):
            raise PipelineError(f"unknown seed policy {self.seed_policy!r}")

    def merge_spec(self, strategy: str, point: dict) -> MergeSpec:
        kw = {GRID_KEYS[k]: v for k, v in point.items()}
        return MergeSpec(strategy, base_seed=self.seed, seed_policy=self.seed_policy, **kw)

    @property
    def hash(self) -> str:
        return config_hash(canonical_json(self.raw))


def output_label(strategy: str, point: dict) -> str:
    return "_".join([strategy, *(f"{k}={v!r}" for k, v in point.items())])


@dataclass
class PipelineResult:
    status: int
    outputs: list[Path]
    summary: list[dict]
    error: dict | None = None


def _features_accuracy(fs: dict[str, Path], seed: int):
    train = probes.load_features(fs["train"], "train")
    test = probes.load_features(fs["test"], "test")
    model = probes.train_linear_probe(train, probes.ProbeConfig(seed=seed), n_classes=max(train.n_classes, test.n_classes))
    return probes.evaluate(model, test)


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run the whole chain; returns status 0 only if every report was written and validated."""
    written: list[Path] = []
    prov = {"pipeline": cfg.raw}
    seeds = {"base_seed": cfg.seed, "seed_policy": cfg.seed_policy}
    t0 = time.perf_counter()
    timing: dict[str, float] = {}
    started = False
    try:
        # stage 0: validate and load everything before writing anything
        cfg.validate()
        base = load_checkpoint(cfg.base_path, strict=cfg.strict)
        tvs = []
        for sid, p in cfg.specialists:
            spec_ckpt = load_checkpoint(p, strict=cfg.strict)
            tvs.append(extract(base, spec_ckpt, cfg.exclude, specialist_id=sid, force=cfg.force))
        profiles = {sid: SpectralProfile.load(p) for sid, p in cfg.profiles.items()}
        timing["load_extract"] = time.perf_counter() - t0

        out = cfg.report_dir
        started = True
        out.mkdir(parents=True, exist_ok=True)

        # stage 1: geometry
        t = time.perf_counter()
        geo = geometry.geometry_report(tvs, cfg.threshold)
        written.append(report.write_report(out / "geometry.json", "geometry", geo.to_dict(), prov, seeds))
        layers = geometry.per_layer_report(tvs, cfg.layer_pattern)
        written.append(report.write_report(out / "layers.json", "layers", layers.to_dict(), prov, seeds))
        written.append(report.write_matrix_csv(out / "cosine.csv", geo.vector_ids, geo.cosine))
        written.append(report.write_matrix_csv(out / "sign_agreement.csv", geo.vector_ids, geo.sign_agreement))
        timing["geometry"] = time.perf_counter() - t

        # stage 2: merges
        t = time.perf_counter()
        rows = []
        for sg in cfg.strategies:
            for point in sg.points():
                label = output_label(sg.strategy, point)
                delta, rep = merge(tvs, cfg.merge_spec(sg.strategy, point), force=cfg.force)
                if cfg.write_checkpoints:
                    merged = apply(base, delta, model_id=label)
                    ckpt_path = out / "merged" / f"{label}.safetensors"
                    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(merged, ckpt_path)
                    written.append(ckpt_path)
                written.append(report.write_report(out / "merge_reports" / f"{label}.json", "merge",
                                                   rep.to_dict(), prov, seeds, timing={"wall_time": rep.wall_time}))
                rf = rep.retained_fraction
                rows.append({
                    "output": label,
                    "strategy": sg.strategy,
                    **{k: point.get(k) for k in KEY_ORDER},
                    "mean_retained_fraction": sum(rf.values()) / len(rf),
                    "sign_conflicts": rep.sign_conflicts,
                    "accuracy": None,
                    "gap": None,
                    "gap_ci_lo": None,
                    "gap_ci_hi": None,
                })
        timing["merge"] = time.perf_counter() - t

        # stage 3: accuracy columns, only with feature sets
        joint_eval = None
        if "joint" in cfg.features:
            joint_eval = _features_accuracy(cfg.features["joint"], cfg.seed)
        for row in rows:
            fs = cfg.features.get(row["output"])
            if fs is None:
                continue
            ev = _features_accuracy(fs, cfg.seed)
            row["accuracy"] = ev.accuracy
            if joint_eval is not None:
                gap = probes.composition_gap(joint_eval.correctness, ev.correctness, n_boot=cfg.n_boot, seed=cfg.seed)
                row["gap"] = gap["gap"]
                row["gap_ci_lo"], row["gap_ci_hi"] = gap["ci"]

        summary = {"rows": rows, "vector_ids": geo.vector_ids,
                   "joint_accuracy": joint_eval.accuracy if joint_eval else None}

        # stage 4: spectral distance vs cosine
        if profiles:
            ids = geo.vector_ids
            labels, xs, ys = [], [], []
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    labels.append(f"{ids[i]}-{ids[j]}")
                    xs.append(jsd(profiles[ids[i]], profiles[ids[j]]))
                    ys.append(geo.cosine[i][j])
            if len(xs) >= 3:
                res = stats.permutation_test(stats.PairedSeries(labels, xs, ys), n_perm=cfg.n_perm, seed=cfg.seed)
                summary["spectral_correlation"] = {"pairs": labels, "jsd": xs, "cosine": ys,
                                                   "rho": res.rho, "p_two_sided": res.p_two_sided,
                                                   "n_perm": res.n_perm}

        timing["total"] = time.perf_counter() - t0
        written.append(report.write_report(out / "summary.json", "summary", summary, prov, seeds, timing=timing))
        written.append(out / "summary.timing.json")
        header = ["output", "strategy", *KEY_ORDER, "mean_retained_fraction", "sign_conflicts",
                  "accuracy", "gap", "gap_ci_lo", "gap_ci_hi"]
        written.append(report.write_csv(out / "summary.csv", header,
                                        ([("" if r[h] is None else r[h]) for h in header] for r in rows)))
        for p in written:
            if p.suffix == ".json" and not p.name.endswith(".timing.json"):
                report.validate(json.loads(p.read_text()))
        return PipelineResult(0, written, rows)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        err = {
            "tool": report.TOOL,
            "version": __version__,
            "error": type(exc).__name__,
            "message": str(exc),
            "stage_started_writing": started,
            "partial_outputs": [str(p) for p in written],
        }
        log.debug("pipeline failure:\n%s", traceback.format_exc())
        if started:
            report.write_json(cfg.report_dir / "error.json", err)
        return PipelineResult(1 if started else 2, written, [], err)
