"""Paired speech/text data: forced alignments and representation swapping.

Alignment file: ``utt_id<TAB>PHONEME<TAB>start_frame<TAB>end_frame`` per
span (end exclusive), spans of an utterance sorted and contiguous.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import compute as C
from .compute import Tensor


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Span:
    phoneme: str
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Alignment:
    spans: tuple[Span, ...]

    def __post_init__(self):
        if not self.spans:
            raise AlignmentError("alignment has no spans")
        cursor = 0
        for i, sp in enumerate(self.spans):
            if sp.start != cursor:
                kind = "gap" if sp.start > cursor else "overlap"
                raise AlignmentError(f"span {i} ({sp.phoneme}) starts at {sp.start}, expected {cursor}: {kind}")
            if sp.end <= sp.start:
                raise AlignmentError(f"span {i} ({sp.phoneme}) is empty")
            cursor = sp.end

    @classmethod
    def from_tuples(cls, spans: Sequence[tuple[str, int, int]]) -> "Alignment":
        return cls(tuple(Span(p, int(s), int(e)) for p, s, e in spans))

    @classmethod
    def from_frames(cls, frames: Sequence[str]) -> "Alignment":
        spans, start = [], 0
        for i in range(1, len(frames) + 1):
            if i == len(frames) or frames[i] != frames[start]:
                spans.append(Span(frames[start], start, i))
                start = i
        return cls(tuple(spans))

    @property
    def frames(self) -> int:
        return self.spans[-1].end


def span_runs(alignment: Alignment) -> list[tuple[str, int]]:
    return [(sp.phoneme, len(sp)) for sp in alignment.spans]


def frame_phonemes(alignment: Alignment) -> list[str]:
    return [sp.phoneme for sp in alignment.spans for _ in range(len(sp))]


@dataclass
class SwapPlan:
    selected: list[int]
    from_text: np.ndarray  # bool per frame

    @property
    def frames(self) -> int:
        return self.from_text.size


def plan_swap(alignment: Alignment, speech_mask, swap_probability: float, rng: np.random.Generator) -> SwapPlan:
    """Select whole phoneme spans that avoid every masked frame, each with ``swap_probability``."""
    if not 0.0 <= swap_probability <= 1.0:
        raise ValueError(f"swap_probability must be in [0, 1], got {swap_probability}")
    mask = np.asarray(speech_mask, dtype=bool)
    if mask.shape != (alignment.frames,):
        raise AlignmentError(f"mask covers {mask.size} frames, alignment {alignment.frames}")
    draws = rng.random(len(alignment.spans))
    from_text = np.zeros(alignment.frames, dtype=bool)
    selected = []
    for i, (sp, u) in enumerate(zip(alignment.spans, draws)):
        if u < swap_probability and not mask[sp.start : sp.end].any():
            selected.append(i)
            from_text[sp.start : sp.end] = True
    return SwapPlan(selected, from_text)


def swap_representations(speech_repr, text_repr, plan: SwapPlan):
    """Rows of selected spans come from ``text_repr``; all others are ``speech_repr`` untouched."""
    if speech_repr.shape != text_repr.shape:
        raise ValueError(f"length mismatch: {speech_repr.shape} vs {text_repr.shape}")
    if plan.frames != speech_repr.shape[0]:
        raise ValueError(f"plan covers {plan.frames} frames, representations have {speech_repr.shape[0]}")
    sel = plan.from_text
    if isinstance(speech_repr, Tensor) or isinstance(text_repr, Tensor):
        if not sel.any():
            return speech_repr
        keep = (~sel).astype(np.float64)[:, None]
        return C.add(C.mul(speech_repr, keep), C.mul(text_repr, sel.astype(np.float64)[:, None]))
    return np.where(sel[:, None], text_repr, speech_repr)


def read_alignments(path: str | Path) -> dict[str, Alignment]:
    raw: dict[str, list[tuple[str, int, int]]] = defaultdict(list)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise AlignmentError(f"{path}:{lineno}: expected utt_id<TAB>PHONEME<TAB>start<TAB>end")
        raw[cols[0]].append((cols[1], int(cols[2]), int(cols[3])))
    out = {}
    for utt, spans in raw.items():
        try:
            out[utt] = Alignment.from_tuples(spans)
        except AlignmentError as exc:
            raise AlignmentError(f"{path}: {utt}: {exc}") from None
    return out


def write_alignments(path: str | Path, alignments: Mapping[str, Alignment]) -> None:
    lines = [
        f"{utt}\t{sp.phoneme}\t{sp.start}\t{sp.end}"
        for utt, ali in sorted(alignments.items())
        for sp in ali.spans
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
