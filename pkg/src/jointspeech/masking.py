"""Span masking shared by the speech and text branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compute import Tensor, add, mul


@dataclass(frozen=True)
class MaskSpec:
    start_probability: float = 0.08
    span_length: int = 10

    def __post_init__(self):
        if not 0.0 <= self.start_probability <= 1.0:
            raise ValueError(f"start_probability must be in [0, 1], got {self.start_probability}")
        if self.span_length < 1:
            raise ValueError(f"span_length must be >= 1, got {self.span_length}")


SPEECH_MASK = MaskSpec(0.08, 10)
TEXT_MASK = MaskSpec(0.15, 40)


def sample_starts(length: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    return np.flatnonzero(rng.random(length) < spec.start_probability)


def spans_from_starts(starts: np.ndarray, length: int, span_length: int) -> list[tuple[int, int]]:
    return [(int(s), min(int(s) + span_length, length)) for s in starts]


def sample_mask(length: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of length ``length``.

    Every position is independently a span start with probability
    ``spec.start_probability``; each start masks itself and the following
    ``span_length - 1`` positions, clipped at the end. Spans may overlap.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    starts = sample_starts(length, spec, rng)
    # difference-array union of [s, s + span)
    delta = np.zeros(length + 1, dtype=np.int64)
    np.add.at(delta, starts, 1)
    np.add.at(delta, np.minimum(starts + spec.span_length, length), -1)
    return np.cumsum(delta[:-1]) > 0


def apply_mask(frames, mask, mask_embedding):
    """Replace masked rows with ``mask_embedding``; other rows stay bit-identical.

    Works on numpy arrays and on Tensors (where it stays differentiable).
    """
    mask = np.asarray(mask)
    n = frames.shape[0]
    if mask.dtype != bool:
        idx = mask.astype(np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"mask index out of range for {n} rows")
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
    elif mask.shape != (n,):
        raise IndexError(f"mask of shape {mask.shape} does not match {n} rows")
    if isinstance(frames, Tensor) or isinstance(mask_embedding, Tensor):
        if not mask.any():
            return frames
        keep = (~mask).astype(np.float64)[:, None]
        return add(mul(frames, keep), mul(mask_embedding, mask.astype(np.float64)[:, None]))
    out = np.array(frames, dtype=np.float64, copy=True)
    out[mask] = np.asarray(mask_embedding, dtype=np.float64)
    return out
