"""Speech/text alignment diagnostics: similarity heat maps and 2-D projections.

Outputs of the ``diagnose`` command:
``heatmap_layer<k>.csv`` / ``heatmap_layer<k>.pgm`` (aggregated map, PGM is
8-bit binary grayscale) and ``projection_layer<k>.csv`` with columns
``x,y,modality``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class HeatMap:
    matrix: np.ndarray
    layer: int = -1
    utt_id: str = ""


def similarity_heatmap(h_speech, h_text, layer: int = -1, utt_id: str = "") -> HeatMap:
    """Cosine similarity of every speech row against every text row (zero rows -> 0)."""
    a = np.asarray(h_speech, dtype=np.float64)
    b = np.asarray(h_text, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    b = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return HeatMap(a @ b.T, layer, utt_id)


def bilinear_resize(m: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation."""
    m = np.asarray(m, dtype=np.float64)
    rows, cols = shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    r, c = coords(rows, m.shape[0]), coords(cols, m.shape[1])
    r0 = np.minimum(np.floor(r).astype(int), m.shape[0] - 1)
    c0 = np.minimum(np.floor(c).astype(int), m.shape[1] - 1)
    r1 = np.minimum(r0 + 1, m.shape[0] - 1)
    c1 = np.minimum(c0 + 1, m.shape[1] - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    top = m[np.ix_(r0, c0)] * (1 - fc) + m[np.ix_(r0, c1)] * fc
    bottom = m[np.ix_(r1, c0)] * (1 - fc) + m[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bottom * fr


def minmax(m: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant map becomes all 0.5."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.full_like(m, 0.5)
    return (m - lo) / (hi - lo)


def aggregate_heatmaps(maps: Sequence[HeatMap | np.ndarray], out_shape: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Resize each map, min-max normalise it, then average."""
    if not maps:
        raise ValueError("need at least one heat map")
    acc = np.zeros(out_shape)
    for m in maps:
        mat = m.matrix if isinstance(m, HeatMap) else np.asarray(m)
        acc += minmax(bilinear_resize(mat, out_shape))
    return acc / len(maps)


def diagonal_dominance(m: np.ndarray, band: float = 0.1) -> float:
    """Mean inside the band |i/rows - j/cols| < band minus the mean outside it."""
    if not 0.0 < band < 1.0:
        raise ValueError("band must be in (0, 1)")
    m = np.asarray(m, dtype=np.float64)
    rows, cols = m.shape
    i = np.arange(rows)[:, None] / rows
    j = np.arange(cols)[None, :] / cols
    inside = np.abs(i - j) < band
    if inside.all() or not inside.any():
        return 0.0
    return float(m[inside].mean() - m[~inside].mean())


def project_2d(states, labels: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Top-2 principal components of the mean-centred rows."""
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least 3 rows")
    centred = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    return centred @ comps.T, list(labels) if labels is not None else [""] * x.shape[0]


def write_heatmap_csv(path: str | Path, m: np.ndarray) -> None:
    np.savetxt(path, m, delimiter=",", fmt="%.10g")


def write_pgm(path: str | Path, m: np.ndarray) -> None:
    img = np.clip(np.round(minmax(np.asarray(m)) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_projection_csv(path: str | Path, coords: np.ndarray, labels: Sequence[str]) -> None:
    lines = ["x,y,modality"] + [f"{x:.10g},{y:.10g},{lab}" for (x, y), lab in zip(coords, labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------ model helpers


def diagnostic_layers(config) -> dict[str, int]:
    """Speech-path layer indices: private output, middle of the shared stack, shared output."""
    p, s = config.layers_speech, config.layers_shared
    return {"private": p, "shared_mid": p + max(1, s // 2) if s else p, "shared_out": p + s}


def text_layer_for(config, speech_layer: int) -> int:
    """The text-path index at the same depth relative to the shared stack."""
    p = config.layers_speech
    if speech_layer <= p:
        return speech_layer if speech_layer == 0 else config.layers_text - (p - speech_layer)
    return config.layers_text + (speech_layer - p)


def model_heatmaps(model, pairs, layer: int) -> list[HeatMap]:
    """``pairs``: (utt_id, speech features, frame-level phoneme ids) with equal lengths."""
    t_layer = text_layer_for(model.config, layer)
    maps = []
    for utt_id, feats, ids in pairs:
        hs = model.encode_speech(feats).per_layer[layer]
        ht = model.encode_text(ids).per_layer[t_layer]
        maps.append(similarity_heatmap(hs, ht, layer, utt_id))
    return maps


def model_projection(model, pairs, layer: int) -> tuple[np.ndarray, list[str]]:
    t_layer = text_layer_for(model.config, layer)
    rows, labels = [], []
    for _, feats, ids in pairs:
        rows.append(model.encode_speech(feats).per_layer[layer])
        labels += ["speech"] * len(feats)
        rows.append(model.encode_text(ids).per_layer[t_layer])
        labels += ["text"] * len(ids)
    return project_2d(np.concatenate(rows), labels)
