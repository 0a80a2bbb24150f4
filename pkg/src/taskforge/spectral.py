"""Mean log-mel spectral profiles and the distances between them.

Front end: 16 kHz mono, 400-sample periodic Hann window (25 ms), 160-sample
hop (10 ms), 512-point FFT, power spectrum, 128 triangular mel filters on
the HTK scale ``m = 2595 log10(1 + f/700)`` over 0-8 kHz with area
normalization, then ``log(max(power, 1e-10))``. Each clip contributes the
time average of its log-mel frames; a group profile is the mean over clips.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .parallel import ordered_map

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 128
LOG_FLOOR = 1e-10


class AudioError(ValueError):
    pass


@dataclass
class SpectralProfile:
    group_id: str
    profile: np.ndarray
    clip_count: int
    sample_rate: int = SAMPLE_RATE
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.profile = np.asarray(self.profile, dtype=np.float64)
        if self.profile.ndim != 1 or self.profile.size == 0:
            raise ValueError("profile must be a nonempty 1-D vector")
        if not np.isfinite(self.profile).all():
            raise ValueError(f"profile for {self.group_id!r} has non-finite values")
        if self.clip_count < 1:
            raise ValueError("clip_count must be positive")

    @property
    def n_mels(self) -> int:
        return int(self.profile.size)

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "profile": self.profile.tolist(),
            "clip_count": self.clip_count,
            "sample_rate": self.sample_rate,
            "n_mels": self.n_mels,
            "metadata": self.metadata,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SpectralProfile":
        """Read a saved profile, or a bare JSON array of per-bin values computed upstream."""
        path = Path(path)
        doc = json.loads(path.read_text())
        if isinstance(doc, list):
            name = path.name.split(".")[0]
            return cls(group_id=name, profile=np.asarray(doc, dtype=np.float64), clip_count=1,
                       metadata={"source": "precomputed array"})
        return cls(group_id=doc["group_id"], profile=np.asarray(doc["profile"]),
                   clip_count=int(doc.get("clip_count", 1)), sample_rate=int(doc.get("sample_rate", SAMPLE_RATE)),
                   metadata=doc.get("metadata", {}))


# -- front end -------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) area-normalized triangular filters.

    At 16 kHz with a 512-point FFT the lowest filters are narrower than a
    frequency bin, so a few of them can be all zero; their log energy then
    sits at the floor.
    """
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall)) * (2.0 / (hi - lo))
    return fb


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(x: np.ndarray) -> np.ndarray:
    """(n_fft // 2 + 1, frames) power spectrum; clips shorter than a window are zero-padded."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise AudioError("empty audio clip")
    if x.size < WIN_LENGTH:
        x = np.pad(x, (0, WIN_LENGTH - x.size))
    n_frames = 1 + (x.size - WIN_LENGTH) // HOP_LENGTH
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    frames = x[idx] * hann(WIN_LENGTH)
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    return (spec.real**2 + spec.imag**2).T


def log_mel_frames(x: np.ndarray, n_mels: int = N_MELS, fb: np.ndarray | None = None) -> np.ndarray:
    fb = mel_filterbank(n_mels=n_mels) if fb is None else fb
    return np.log(np.maximum(fb @ power_spectrogram(x), LOG_FLOOR))


def clip_profile(x: np.ndarray, n_mels: int = N_MELS, fb: np.ndarray | None = None) -> np.ndarray:
    return log_mel_frames(x, n_mels, fb).mean(axis=1)


def mel_profile(clips: Sequence[np.ndarray], n_mels: int = N_MELS, group_id: str = "",
                metadata: dict | None = None) -> SpectralProfile:
    """Group profile: per-clip time-averaged log-mel, then averaged over clips.

    Clips must already be 16 kHz mono (see :func:`read_wav`).
    """
    clips = list(clips)
    if not clips:
        raise AudioError("no clips given")
    fb = mel_filterbank(n_mels=n_mels)
    per_clip = ordered_map(lambda c: clip_profile(c, n_mels, fb), clips)
    acc = np.zeros(n_mels)
    for p in per_clip:
        acc += p
    return SpectralProfile(group_id=group_id, profile=acc / len(clips), clip_count=len(clips),
                           metadata=dict(metadata or {}))


# -- audio ingestion -------------------------------------------------------


def to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"unsupported sample format {data.dtype}")


def resample_linear(x: np.ndarray, sr: int, target: int = SAMPLE_RATE) -> np.ndarray:
    if sr == target or x.size == 0:
        return x
    n_out = int(round(x.size * target / sr))
    t_out = np.arange(n_out) / target
    return np.interp(t_out, np.arange(x.size) / sr, x)


def read_wav(path: str | Path, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    """Decode a PCM WAV file to float64 mono at ``target_sr``."""
    from scipy.io import wavfile

    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise AudioError(f"cannot decode {path}: {exc}") from None
    x = to_float(np.asarray(data))
    if x.ndim == 2:
        x = x.mean(axis=1)
    return resample_linear(x, int(sr), target_sr)


def sample_paths(paths: Iterable[str | Path], max_clips: int, seed: int) -> list[Path]:
    """Seeded uniform sample of at most ``max_clips`` paths, returned in sorted order."""
    paths = sorted(Path(p) for p in paths)
    if len(paths) <= max_clips:
        return paths
    idx = np.random.default_rng(seed).choice(len(paths), size=max_clips, replace=False)
    return [paths[i] for i in sorted(idx)]


def profile_from_files(paths: Iterable[str | Path], group_id: str, max_clips: int = 500, seed: int = 42,
                       n_mels: int = N_MELS) -> SpectralProfile:
    chosen = sample_paths(paths, max_clips, seed)
    if not chosen:
        raise AudioError(f"no audio files for group {group_id!r}")
    clips = ordered_map(read_wav, chosen)
    meta = {"seed": seed, "max_clips": max_clips, "files": [p.name for p in chosen]}
    return mel_profile(clips, n_mels=n_mels, group_id=group_id, metadata=meta)


# -- distances -------------------------------------------------------------


def _values(p) -> np.ndarray:
    return p.profile if isinstance(p, SpectralProfile) else np.asarray(p, dtype=np.float64)


def _same_bins(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"bin count mismatch: {a.size} vs {b.size}")


def softmax(v: np.ndarray) -> np.ndarray:
    z = np.exp(v - v.max())
    return z / z.sum()


def jsd_distributions(p: np.ndarray, q: np.ndarray, base: float = 2.0) -> float:
    """Jensen-Shannon divergence of two probability vectors; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _same_bins(p, q)
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    val = (0.5 * kl(p) + 0.5 * kl(q)) / math.log(base)
    return max(0.0, val)


def jsd(a, b, base: float = 2.0) -> float:
    """JSD between softmax-normalized log-mel profiles."""
    va, vb = _values(a), _values(b)
    _same_bins(va, vb)
    return jsd_distributions(softmax(va), softmax(vb), base)


def l2_distance(a, b, center: bool = False) -> float:
    va, vb = _values(a), _values(b)
    _same_bins(va, vb)
    if center:
        va = va - va.mean()
        vb = vb - vb.mean()
    return float(np.sqrt(np.sum((va - vb) ** 2)))


METRICS = {
    "jsd": lambda a, b, base=2.0: jsd(a, b, base),
    "l2": lambda a, b, base=2.0: l2_distance(a, b, center=False),
    "l2c": lambda a, b, base=2.0: l2_distance(a, b, center=True),
}


def pairwise_distances(profiles: Sequence[SpectralProfile], metric: str = "jsd",
                       base: float = 2.0) -> list[tuple[str, str, float]]:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    fn = METRICS[metric]
    out = []
    for i in range(len(profiles)):
        for j in range(i + 1, len(profiles)):
            out.append((profiles[i].group_id, profiles[j].group_id, fn(profiles[i], profiles[j], base)))
    return out
