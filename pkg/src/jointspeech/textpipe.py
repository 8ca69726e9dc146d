"""Text side: phonemization, SIL insertion, duration statistics and up-sampling.

Text is turned into a frame-rate phoneme sequence so that the text branch
sees inputs whose length statistics match speech. Duration statistics come
from forced alignments of a small paired set.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SIL = "SIL"

_PUNCT = re.compile(r"[^A-Z' ]+")


class OutOfVocabulary(KeyError):
    """A word is missing from the lexicon and the policy does not allow a fallback."""


def normalize(text: str) -> list[str]:
    """Uppercase, replace everything except letters/apostrophes/space by space, split."""
    return _PUNCT.sub(" ", text.upper()).split()


@dataclass
class Lexicon:
    entries: dict[str, tuple[str, ...]]
    inventory: tuple[str, ...] = ()

    def __post_init__(self):
        seen = {p for pron in self.entries.values() for p in pron}
        if SIL in seen:
            raise ValueError("SIL is reserved and may not appear inside a lexicon entry")
        if not self.inventory:
            self.inventory = (SIL, *sorted(seen))
        else:
            inv = tuple(self.inventory)
            if SIL not in inv:
                inv = (SIL, *inv)
            missing = seen - set(inv)
            if missing:
                raise ValueError(f"phonemes not in inventory: {sorted(missing)}")
            self.inventory = inv
        self._ids = {p: i for i, p in enumerate(self.inventory)}

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> tuple[str, ...]:
        return self.entries[word]

    def phoneme_id(self, phoneme: str) -> int:
        return self._ids[phoneme]

    def ids(self, phonemes: Iterable[str]) -> np.ndarray:
        return np.array([self._ids[p] for p in phonemes], dtype=np.int64)

    @property
    def sil_id(self) -> int:
        return self._ids[SIL]


def read_lexicon(path: str | Path) -> Lexicon:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            word, pron = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected WORD<TAB>PH1 PH2 ...") from None
        entries[word.strip().upper()] = tuple(pron.split())
    return Lexicon(entries)


def write_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    lines = [f"{w}\t{' '.join(p)}" for w, p in sorted(lexicon.entries.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


@dataclass
class Phonemized:
    phonemes: list[str]
    # token index after which a word boundary falls
    boundaries: list[int]
    words: list[str] = field(default_factory=list)


def phonemize(text: str | Sequence[str], lexicon: Lexicon, oov: str = "skip") -> Phonemized:
    """Look every word up in ``lexicon``.

    ``oov="skip"`` raises :class:`OutOfVocabulary` so the caller can drop the
    utterance; ``oov="spell"`` falls back to the entries of the word's letters.
    """
    words = normalize(text) if isinstance(text, str) else [w.upper() for w in text]
    if not words:
        raise ValueError("empty text after normalization")
    phonemes: list[str] = []
    boundaries: list[int] = []
    for i, word in enumerate(words):
        if word in lexicon:
            pron = lexicon[word]
        elif oov == "spell":
            try:
                pron = tuple(p for ch in word if ch != "'" for p in lexicon[ch])
            except KeyError:
                raise OutOfVocabulary(word) from None
        elif oov == "skip":
            raise OutOfVocabulary(word)
        else:
            raise ValueError(f"unknown OOV policy {oov!r}")
        if i > 0:
            boundaries.append(len(phonemes) - 1)
        phonemes.extend(pron)
    return Phonemized(phonemes, boundaries, words)


def insert_sil(text: Phonemized, rate: float, rng: np.random.Generator) -> list[str]:
    """SIL at both ends, plus one SIL at each word boundary with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    draws = rng.random(len(text.boundaries)) < rate
    insert_after = {b for b, d in zip(text.boundaries, draws) if d}
    out = [SIL]
    for i, p in enumerate(text.phonemes):
        out.append(p)
        if i in insert_after:
            out.append(SIL)
    out.append(SIL)
    return out


def run_lengths(labels: Sequence) -> list[tuple[object, int]]:
    runs: list[tuple[object, int]] = []
    for lab in labels:
        if runs and runs[-1][0] == lab:
            runs[-1] = (lab, runs[-1][1] + 1)
        else:
            runs.append((lab, 1))
    return runs


def truncate_counts(counts: Mapping[int, int], cutoff: float) -> dict[int, float]:
    """Keep lengths (ascending) up to the first whose cumulative share reaches ``cutoff``."""
    lengths = sorted(counts)
    total = sum(counts[n] for n in lengths)
    if total <= 0:
        raise ValueError("empty histogram")
    kept: list[int] = []
    running = 0
    for n in lengths:
        kept.append(n)
        running += counts[n]
        if running >= cutoff * total * (1.0 - 1e-12):
            break
    mass = sum(counts[n] for n in kept)
    return {n: counts[n] / mass for n in kept}


@dataclass
class DurationModel:
    distributions: dict[str, dict[int, float]]
    pooled: dict[int, float]
    fallback: set[str] = field(default_factory=set)
    cutoff: float = 0.98

    def distribution(self, phoneme: str) -> dict[int, float]:
        dist = self.distributions.get(phoneme)
        return dist if dist is not None else self.pooled

    def max_length(self) -> int:
        return max(max(d) for d in [*self.distributions.values(), self.pooled])

    def sample(self, phoneme: str, n: int, rng: np.random.Generator) -> np.ndarray:
        dist = self.distribution(phoneme)
        lengths = np.fromiter(dist.keys(), dtype=np.int64)
        probs = np.fromiter(dist.values(), dtype=np.float64)
        return rng.choice(lengths, size=n, p=probs / probs.sum())


def estimate_duration_model(
    alignments: Iterable[Sequence[str]],
    cutoff: float = 0.98,
    inventory: Iterable[str] = (),
) -> DurationModel:
    """Per-phoneme run-length histograms from frame-level label sequences.

    Identical neighbouring phonemes merge into one run here; use
    :func:`estimate_duration_model_from_runs` with alignment spans to keep them apart.
    """
    return estimate_duration_model_from_runs((run_lengths(list(seq)) for seq in alignments), cutoff, inventory)


def estimate_duration_model_from_runs(
    runs: Iterable[Sequence[tuple[str, int]]],
    cutoff: float = 0.98,
    inventory: Iterable[str] = (),
) -> DurationModel:
    """Duration model from ``(phoneme, length)`` runs, one sequence per utterance.

    Phonemes listed in ``inventory`` but never observed get the pooled
    (all non-SIL phonemes) distribution and are reported in ``fallback``.
    """
    counts: dict[str, Counter] = defaultdict(Counter)
    n_seq = 0
    for seq in runs:
        n_seq += 1
        for phoneme, length in seq:
            if int(length) < 1:
                raise ValueError(f"run of {phoneme} has length {length}")
            counts[phoneme][int(length)] += 1
    if n_seq == 0 or not counts:
        raise ValueError("no alignments given")
    pooled_counts: Counter = Counter()
    for phoneme, c in counts.items():
        if phoneme != SIL:
            pooled_counts.update(c)
    if not pooled_counts:
        pooled_counts = sum(counts.values(), Counter())
    dists = {p: truncate_counts(c, cutoff) for p, c in sorted(counts.items())}
    pooled = truncate_counts(pooled_counts, cutoff)
    fallback = {p for p in inventory if p not in dists}
    for p in sorted(fallback):
        dists[p] = dict(pooled)
    return DurationModel(dists, pooled, fallback, cutoff)


def write_duration_model(model: DurationModel, path: str | Path) -> None:
    def fmt(dist):
        return ",".join(f"{n}:{p!r}" for n, p in sorted(dist.items()))

    lines = [f"# cutoff {model.cutoff!r}"]
    if model.fallback:
        lines.append("# fallback " + " ".join(sorted(model.fallback)))
    lines.append(f"*\t{fmt(model.pooled)}")
    lines += [f"{p}\t{fmt(d)}" for p, d in sorted(model.distributions.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_duration_model(path: str | Path) -> DurationModel:
    dists: dict[str, dict[int, float]] = {}
    pooled: dict[int, float] = {}
    fallback: set[str] = set()
    cutoff = 0.98
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("# cutoff"):
            cutoff = float(line.split()[-1])
            continue
        if line.startswith("# fallback"):
            fallback = set(line.split()[2:])
            continue
        if line.startswith("#"):
            continue
        key, body = line.split("\t")
        dist = {}
        for item in body.split(","):
            n, p = item.split(":")
            dist[int(n)] = float(p)
        if key == "*":
            pooled = dist
        else:
            dists[key] = dist
    return DurationModel(dists, pooled, fallback, cutoff)


@dataclass
class UpsampledText:
    frames: list[str]
    tokens: list[str]
    spans: list[tuple[int, int]]
    word_boundaries: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def recover_tokens(self) -> list[str]:
        return [self.frames[s] for s, _ in self.spans]


def upsample(
    tokens: Sequence[str],
    model: DurationModel,
    rng: np.random.Generator,
    word_starts: Sequence[int] = (),
) -> UpsampledText:
    """Expand each token to a run whose length is drawn from its duration distribution."""
    tokens = list(tokens)
    lengths = np.zeros(len(tokens), dtype=np.int64)
    positions: dict[str, list[int]] = defaultdict(list)
    for i, tok in enumerate(tokens):
        positions[tok].append(i)
    # one vectorised draw per distinct token keeps sampling cheap and seeded
    for tok in sorted(positions):
        idx = positions[tok]
        lengths[idx] = model.sample(tok, len(idx), rng)
    ends = np.cumsum(lengths)
    starts = ends - lengths
    spans = [(int(s), int(e)) for s, e in zip(starts, ends)]
    frames = [tok for tok, n in zip(tokens, lengths) for _ in range(int(n))]
    boundaries = [int(starts[i]) for i in word_starts]
    return UpsampledText(frames, tokens, spans, boundaries)


def word_start_tokens(tokens: Sequence[str], text: Phonemized) -> list[int]:
    """Token indices (in a SIL-inserted sequence) where each word begins."""
    starts, k = [], 0
    first = {0} | {b + 1 for b in text.boundaries}
    for i, tok in enumerate(tokens):
        if tok == SIL:
            continue
        if k in first:
            starts.append(i)
        k += 1
    return starts


def prepare_text(
    sentence: str,
    lexicon: Lexicon,
    model: DurationModel,
    rng: np.random.Generator,
    sil_rate: float = 0.25,
    oov: str = "skip",
) -> UpsampledText:
    """normalize -> phonemize -> SIL insertion -> up-sampling."""
    ph = phonemize(sentence, lexicon, oov=oov)
    tokens = insert_sil(ph, sil_rate, rng)
    return upsample(tokens, model, rng, word_start_tokens(tokens, ph))


def duration_report(model: DurationModel, limit: int = 20) -> dict[str, object]:
    longest = model.max_length()
    return {"max_retained_length": longest, "within_limit": longest <= limit, "limit": limit}


# ---------------------------------------------------------------- characters

BLANK_SYMBOL = "<b>"
WORD_SEP = "|"
CHARS: tuple[str, ...] = (BLANK_SYMBOL, WORD_SEP, "'", *(chr(c) for c in range(ord("A"), ord("Z") + 1)))
_CHAR_IDS = {c: i for i, c in enumerate(CHARS)}


def encode_chars(text: str) -> np.ndarray:
    """Normalized words joined by the word separator -> character ids (no blank)."""
    words = normalize(text)
    out = []
    for i, w in enumerate(words):
        if i:
            out.append(_CHAR_IDS[WORD_SEP])
        for ch in w:
            if ch not in _CHAR_IDS:
                raise ValueError(f"character {ch!r} not in the character vocabulary")
            out.append(_CHAR_IDS[ch])
    return np.array(out, dtype=np.int64)


def decode_chars(ids) -> str:
    """Character ids -> words separated by single spaces."""
    text = "".join(CHARS[int(i)] for i in ids if int(i) != 0)
    return " ".join(w for w in text.split(WORD_SEP) if w)
