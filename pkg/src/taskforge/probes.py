"""Frozen-feature evaluation: linear probe, 1-NN with cosine distance, composition gap."""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .parallel import ordered_map
from .rng import numpy_generator
from .stats import paired_bootstrap_ci

SPLITS = ("train", "val", "test")


class ProbeDivergedError(FloatingPointError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x D matrix")
        if self.features.shape[0] < 1:
            raise ValueError("feature set is empty")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("need exactly one label per feature row")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1
        elif self.labels.max() >= self.n_classes:
            raise ValueError("label outside [0, n_classes)")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


# -- file formats ----------------------------------------------------------


def save_features_bin(fs: FeatureSet, path: str | Path) -> None:
    """Little-endian: N, D as int64; N*D float32 row-major; N int32 labels."""
    n, d = fs.features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", n, d))
        fh.write(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fs.labels, dtype="<i4").tobytes())


def load_features_bin(path: str | Path, split_tag: str = "train") -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    n, d = struct.unpack("<qq", raw[:16])
    need = 16 + 4 * n * d + 4 * n
    if n < 0 or d < 0 or len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes for N={n}, D={d}, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=16).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=16 + 4 * n * d)
    return FeatureSet(feats, labels, split_tag)


def save_features_csv(fs: FeatureSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(fs.dim)] + ["label"])
        for row, lab in zip(fs.features, fs.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_features_csv(path: str | Path, split_tag: str = "train") -> FeatureSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if "label" not in header:
        raise ValueError(f"{path}: no 'label' column")
    li = header.index("label")
    feats = [[float(v) for j, v in enumerate(r) if j != li] for r in body]
    labels = [int(r[li]) for r in body]
    return FeatureSet(np.array(feats, dtype=np.float64).reshape(len(body), len(header) - 1), labels, split_tag)


def load_features(path: str | Path, split_tag: str = "train") -> FeatureSet:
    if str(path).endswith(".csv"):
        return load_features_csv(path, split_tag)
    return load_features_bin(path, split_tag)


def synthetic_features(n_per_class: int, n_classes: int, dim: int, separation: float = 4.0,
                       noise: float = 1.0, seed: int = 0, split_tag: str = "train") -> FeatureSet:
    """Gaussian class clusters whose means sit ``separation`` apart along random directions."""
    g = numpy_generator(seed, "synthetic-features")
    means = g.standard_normal((n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    x = np.concatenate([means[c] + noise * g.standard_normal((n_per_class, dim)) for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return FeatureSet(x, y, split_tag, n_classes)


# -- linear probe ----------------------------------------------------------


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42


@dataclass
class ProbeModel:
    weights: np.ndarray  # C x D
    bias: np.ndarray  # C
    config: ProbeConfig = field(default_factory=ProbeConfig)
    epoch_losses: list[float] = field(default_factory=list)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def save(self, path: str | Path) -> None:
        np.savez(path, weights=self.weights, bias=self.bias,
                 epoch_losses=np.asarray(self.epoch_losses), **{f"cfg_{k}": v for k, v in asdict(self.config).items()})

    @classmethod
    def load(cls, path: str | Path) -> "ProbeModel":
        z = np.load(path)
        cfg = ProbeConfig(**{k[4:]: z[k].item() for k in z.files if k.startswith("cfg_")})
        return cls(z["weights"], z["bias"], cfg, z["epoch_losses"].tolist())


def softmax_xent(w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradients with respect to ``w`` and ``b``."""
    z = x @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g.T @ x, g.sum(axis=0)


def train_linear_probe(train: FeatureSet, config: ProbeConfig | None = None,
                       n_classes: int | None = None) -> ProbeModel:
    """Softmax regression by Adam from zero initialization, no regularization.

    Each epoch visits the rows in an order drawn from a generator keyed by
    ``(seed, epoch)``; the final-epoch parameters are returned.
    """
    cfg = config or ProbeConfig()
    c = n_classes or train.n_classes
    x, y = train.features, train.labels
    n, d = x.shape
    w = np.zeros((c, d))
    b = np.zeros(c)
    mw, vw = np.zeros_like(w), np.zeros_like(w)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    t = 0
    losses = []
    for epoch in range(cfg.epochs):
        order = numpy_generator(cfg.seed, "probe-shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gw, gb = softmax_xent(w, b, x[idx], y[idx])
            if not np.isfinite(loss):
                raise ProbeDivergedError(
                    f"non-finite loss at epoch {epoch}, step {t}: loss={loss}, "
                    f"|w|max={np.abs(w).max():.3g}, |x|max={np.abs(x[idx]).max():.3g}"
                )
            t += 1
            mw = cfg.beta1 * mw + (1 - cfg.beta1) * gw
            vw = cfg.beta2 * vw + (1 - cfg.beta2) * gw * gw
            mb = cfg.beta1 * mb + (1 - cfg.beta1) * gb
            vb = cfg.beta2 * vb + (1 - cfg.beta2) * gb * gb
            c1 = 1 - cfg.beta1**t
            c2 = 1 - cfg.beta2**t
            w = w - cfg.lr * (mw / c1) / (np.sqrt(vw / c2) + cfg.eps)
            b = b - cfg.lr * (mb / c1) / (np.sqrt(vb / c2) + cfg.eps)
        losses.append(softmax_xent(w, b, x, y)[0])
    return ProbeModel(w, b, cfg, losses)


@dataclass
class EvalResult:
    accuracy: float
    correctness: np.ndarray
    predictions: np.ndarray


def predict(model: ProbeModel, x: np.ndarray) -> np.ndarray:
    return np.argmax(model.logits(x), axis=1)  # first maximum = lowest class index


def evaluate(model: ProbeModel, test: FeatureSet) -> EvalResult:
    if test.dim != model.weights.shape[1]:
        raise ValueError(f"feature dimension {test.dim} does not match probe input {model.weights.shape[1]}")
    pred = predict(model, test.features)
    correct = pred == test.labels
    return EvalResult(float(correct.mean()), correct, pred)


# -- nearest neighbour -----------------------------------------------------


def _unit_rows(x: np.ndarray, strict: bool, eps: float, what: str) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = norms == 0
    if zero.any():
        if strict:
            raise ValueError(f"{what} has {int(zero.sum())} zero-norm rows (first at {int(np.argmax(zero))})")
        norms = np.maximum(norms, eps)
    return x / norms[:, None]


def knn_classify(train: FeatureSet, test: FeatureSet, k: int = 1, strict: bool = True,
                 eps: float = 1e-12, block: int = 1024) -> EvalResult:
    """k-NN by cosine similarity; ties go to the lowest train index.

    For k > 1 the label is the majority among the k most similar rows, ties
    broken by lowest class index.
    """
    if test.dim != train.dim:
        raise ValueError("train and test feature dimensions differ")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in [1, {len(train)}]")
    a = _unit_rows(train.features, strict, eps, "train features")
    q = _unit_rows(test.features, strict, eps, "test features")
    n_cls = max(train.n_classes, test.n_classes)

    def run(start):
        sims = q[start : start + block] @ a.T
        if k == 1:
            return train.labels[np.argmax(sims, axis=1)]
        # stable sort on -sim keeps lower train indices first among equals
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        votes = np.zeros((top.shape[0], n_cls), dtype=np.int64)
        np.add.at(votes, (np.arange(top.shape[0])[:, None], train.labels[top]), 1)
        return np.argmax(votes, axis=1)

    pred = np.concatenate(ordered_map(run, range(0, len(test), block)))
    correct = pred == test.labels
    return EvalResult(float(correct.mean()), correct, pred)


# -- composition gap -------------------------------------------------------


def composition_gap(joint, merged, n_boot: int = 10_000, level: float = 0.95, seed: int = 42) -> dict:
    """Accuracy of the jointly trained model minus the merged model, with a paired bootstrap CI."""
    r = paired_bootstrap_ci(joint, merged, n_boot=n_boot, level=level, seed=seed)
    return {"gap": r.delta, "ci": [r.lo, r.hi], "level": level, "n_boot": n_boot, "seed": seed}
