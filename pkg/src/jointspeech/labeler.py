"""Pseudo-label generation: MFCC features, k-means codebooks, relabeling.

File formats
------------
feature file   b"FEAT" + uint32 frames + uint32 dim (little endian), then
               frames*dim float64 values in row-major order.
label file     ``utt_id<TAB>z1 z2 z3 ...``, one utterance per line.
manifest       ``utt_id<TAB>feature_path<TAB>frames[<TAB>transcript]``;
               relative feature paths resolve against the manifest's folder.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.fft import dct


# --------------------------------------------------------------------- MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape [n_filters, n_fft // 2 + 1]."""
    nyquist = sample_rate / 2.0
    fmax = nyquist if fmax is None else fmax
    if fmax > nyquist or fmin >= fmax:
        raise ValueError(f"analysis band [{fmin}, {fmax}] Hz does not fit sample rate {sample_rate}")
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_filters, bin_freqs.size))
    for m in range(n_filters):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if samples.size < frame_len:
        raise ValueError(f"need at least one full frame ({frame_len} samples), got {samples.size}")
    n_frames = 1 + (samples.size - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def filterbank_energies(
    samples,
    sample_rate: int,
    frame_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_filters: int = 26,
    fmin: float = 0.0,
    fmax: float | None = None,
    preemphasis: float = 0.97,
) -> np.ndarray:
    """Mel filterbank power per frame, [T, n_filters] (before the log)."""
    x = np.asarray(samples, dtype=np.float64)
    frame_len = int(round(sample_rate * frame_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if x.size < frame_len:
        raise ValueError(f"need at least one full frame ({frame_len} samples), got {x.size}")
    if preemphasis:
        x = np.append(x[0], x[1:] - preemphasis * x[:-1])
    frames = frame_signal(x, frame_len, hop) * np.hamming(frame_len)
    n_fft = 1 << (frame_len - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft)) ** 2 / n_fft
    fb = mel_filterbank(n_filters, n_fft, sample_rate, fmin, fmax)
    return power @ fb.T


def deltas(features: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    padded = np.pad(features, ((width, width), (0, 0)), mode="edge")
    n = features.shape[0]
    num = sum(k * (padded[width + k : width + k + n] - padded[width - k : width - k + n]) for k in range(1, width + 1))
    return num / (2.0 * sum(k * k for k in range(1, width + 1)))


def compute_mfcc(
    samples,
    sample_rate: int,
    frame_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_ceps: int = 13,
    n_filters: int = 26,
    fmin: float = 0.0,
    fmax: float | None = None,
    floor: float = np.finfo(np.float64).eps,
) -> np.ndarray:
    """13 cepstra + deltas + delta-deltas -> [T, 39]."""
    energies = filterbank_energies(samples, sample_rate, frame_ms, hop_ms, n_filters, fmin, fmax)
    logfb = np.log(np.maximum(energies, floor))
    ceps = dct(logfb, type=2, axis=1, norm="ortho")[:, :n_ceps]
    d1 = deltas(ceps)
    d2 = deltas(d1)
    return np.concatenate([ceps, d1, d2], axis=1)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV -> (float samples in [-1, 1), sample rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate = w.getframerate()
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        if w.getnchannels() > 1:
            raw = raw.reshape(-1, w.getnchannels())[:, 0]
    return raw.astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# ------------------------------------------------------------------ k-means


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


def _sq_distances(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], centroids.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - centroids[None, :, :]
        out[s : s + chunk] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(x.shape[0]))]
    d2 = _sq_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("not enough distinct rows to seed k-means")
        nxt = int(rng.choice(x.shape[0], p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_distances(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def kmeans_fit(
    features: np.ndarray,
    n_clusters: int,
    iterations: int = 50,
    rng: np.random.Generator | None = None,
    init: np.ndarray | None = None,
) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations.

    ``inertia_history[i]`` is the inertia of the assignment made at the start
    of iteration i; the last entry is the inertia of the returned codebook.
    Empty clusters are re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D row collection")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if x.shape[0] < n_clusters:
        raise ValueError(f"need at least {n_clusters} rows, got {x.shape[0]}")
    if init is None:
        if np.unique(x, axis=0).shape[0] < n_clusters:
            raise ValueError(f"need at least {n_clusters} distinct rows")
        centroids = kmeans_plus_plus(x, n_clusters, rng if rng is not None else np.random.default_rng(0))
    else:
        centroids = np.array(init, dtype=np.float64, copy=True)
        if centroids.shape != (n_clusters, x.shape[1]):
            raise ValueError(f"init must have shape {(n_clusters, x.shape[1])}")

    history: list[float] = []
    prev_labels = None
    for _ in range(iterations):
        d2 = _sq_distances(x, centroids)
        labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(x.shape[0]), labels]
        inertia = float(point_d2.sum())
        if history and inertia > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        counts = np.bincount(labels, minlength=n_clusters)
        # shift by one member per cluster so a cluster of identical rows lands exactly on them
        anchor = np.zeros_like(centroids)
        anchor[labels[::-1]] = x[::-1]
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x - anchor[labels])
        filled = counts > 0
        centroids[filled] = anchor[filled] + sums[filled] / counts[filled, None]
        taken: set[int] = set()
        for c in np.flatnonzero(~filled):
            order = np.argsort(-point_d2, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            centroids[c] = x[far]
            point_d2[far] = 0.0
            prev_labels = None
    else:
        d2 = _sq_distances(x, centroids)
        inertia = float(d2.min(axis=1).sum())
        if inertia > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
    return Codebook(centroids, history)


def assign_labels(features: np.ndarray, codebook: Codebook | np.ndarray) -> np.ndarray:
    """Nearest centroid per frame; ties go to the lowest index."""
    centroids = codebook.centroids if isinstance(codebook, Codebook) else np.asarray(codebook)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != centroids.shape[1]:
        raise ValueError(f"feature dim {x.shape[-1]} != centroid dim {centroids.shape[1]}")
    return _sq_distances(x, centroids).argmin(axis=1).astype(np.int64)


def fit_labels(
    features: Mapping[str, np.ndarray],
    n_clusters: int,
    rng: np.random.Generator,
    iterations: int = 50,
) -> tuple[Codebook, dict[str, np.ndarray]]:
    keys = sorted(features)
    stacked = np.concatenate([features[k] for k in keys], axis=0)
    book = kmeans_fit(stacked, n_clusters, iterations, rng)
    return book, {k: assign_labels(features[k], book) for k in keys}


def relabel_from_hidden(
    model,
    features: Mapping[str, np.ndarray],
    layer: int | None = None,
    n_clusters: int = 32,
    rng: np.random.Generator | None = None,
    iterations: int = 50,
) -> tuple[Codebook, dict[str, np.ndarray]]:
    """Second-iteration targets: k-means on an intermediate speech layer.

    ``layer`` indexes ``HiddenStates.per_layer`` (0 = embedded input); the
    default is the last speech-encoder layer.
    """
    if layer is None:
        layer = model.config.layers_speech
    n_layers = model.config.layers_speech + model.config.layers_shared + 1
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range [0, {n_layers})")
    hidden = {k: model.encode_speech(features[k]).per_layer[layer] for k in sorted(features)}
    return fit_labels(hidden, n_clusters, rng if rng is not None else np.random.default_rng(0), iterations)


# -------------------------------------------------------------------- files

_FEAT_MAGIC = b"FEAT"


def write_features(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _FEAT_MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, frames, dim = struct.unpack_from("<4sII", raw)
    if magic != _FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    data = np.frombuffer(raw, dtype="<f8", offset=12)
    if data.size != frames * dim:
        raise ValueError(f"{path}: header says {frames}x{dim}, found {data.size} values")
    return data.reshape(frames, dim).astype(np.float64)


def write_labels(path: str | Path, labels: Mapping[str, np.ndarray]) -> None:
    lines = [f"{k}\t{' '.join(map(str, np.asarray(v, dtype=np.int64)))}" for k, v in sorted(labels.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, body = line.partition("\t")
            out[key] = np.array(body.split(), dtype=np.int64)
    return out


def write_codebook(path: str | Path, book: Codebook) -> None:
    write_features(path, book.centroids)


def read_codebook(path: str | Path) -> Codebook:
    return Codebook(read_features(path))


@dataclass
class ManifestEntry:
    utt_id: str
    feature_path: Path
    frames: int
    transcript: str | None = None

    def load(self) -> np.ndarray:
        feats = read_features(self.feature_path)
        if feats.shape[0] != self.frames:
            raise ValueError(f"{self.utt_id}: manifest says {self.frames} frames, file has {feats.shape[0]}")
        return feats


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns")
        fp = Path(cols[1])
        if not fp.is_absolute():
            fp = path.parent / fp
        entries.append(ManifestEntry(cols[0], fp, int(cols[2]), cols[3] if len(cols) == 4 else None))
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        fp = Path(e.feature_path)
        try:
            fp = fp.relative_to(path.parent)
        except ValueError:
            pass
        cols = [e.utt_id, fp.as_posix(), str(e.frames)]
        if e.transcript is not None:
            cols.append(e.transcript)
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
