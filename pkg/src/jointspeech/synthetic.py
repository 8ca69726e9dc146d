"""Seeded toy corpus: phoneme prototypes plus noise stand in for acoustics.

Every word is spelled with one letter per phoneme, so the character target
of a transcript is a deterministic function of its phonemes. Frames of a
phoneme are its 39-d prototype plus Gaussian noise, durations are
``1 + Poisson`` with a per-phoneme mean. Alignments are exact.

Directory layout written by :func:`write_corpus`::

    lexicon.tsv       WORD<TAB>PH PH ...
    text.txt          unpaired sentences, one per line
    train.tsv         utt_id<TAB>feats/<id>.feat<TAB>frames<TAB>transcript
    heldout.tsv       same layout
    alignments.tsv    utt_id<TAB>PHONEME<TAB>start<TAB>end (train and held-out)
    feats/*.feat
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labeler import ManifestEntry, write_features, write_manifest
from .paired import Alignment, write_alignments
from .textpipe import SIL, Lexicon, write_lexicon

PHONEME_LETTERS: tuple[tuple[str, str], ...] = (
    ("AA", "A"), ("B", "B"), ("K", "C"), ("D", "D"), ("EH", "E"), ("F", "F"),
    ("G", "G"), ("HH", "H"), ("IY", "I"), ("JH", "J"), ("L", "L"), ("M", "M"),
    ("N", "N"), ("OW", "O"), ("P", "P"), ("R", "R"), ("S", "S"), ("T", "T"),
    ("UW", "U"), ("V", "V"), ("W", "W"), ("Z", "Z"),
)  # fmt: skip


@dataclass(frozen=True)
class SyntheticSpec:
    n_phonemes: int = 8
    n_words: int = 10
    n_train: int = 20
    n_heldout: int = 40
    n_text: int = 200
    words_per_utterance: tuple[int, int] = (2, 4)
    phonemes_per_word: tuple[int, int] = (2, 3)
    mean_duration: tuple[float, float] = (2.0, 5.0)
    sil_mean_duration: float = 4.0
    max_duration: int = 12
    sil_rate: float = 0.25
    feature_dim: int = 39
    prototype_scale: float = 1.0
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_phonemes <= len(PHONEME_LETTERS):
            raise ValueError(f"n_phonemes must be in [2, {len(PHONEME_LETTERS)}]")
        lo, hi = self.phonemes_per_word
        if self.n_phonemes * (self.n_phonemes - 1) ** (hi - 1) < self.n_words:
            raise ValueError("not enough distinct pronunciations for n_words")


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    transcript: str
    alignment: Alignment


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    lexicon: Lexicon
    prototypes: dict[str, np.ndarray]
    durations: dict[str, float]
    train: list[Utterance]
    heldout: list[Utterance]
    text: list[str] = field(default_factory=list)

    @property
    def alignments(self) -> dict[str, Alignment]:
        return {u.utt_id: u.alignment for u in [*self.train, *self.heldout]}


def _make_lexicon(spec: SyntheticSpec, rng: np.random.Generator) -> Lexicon:
    phones = PHONEME_LETTERS[: spec.n_phonemes]
    entries: dict[str, tuple[str, ...]] = {}
    lo, hi = spec.phonemes_per_word
    while len(entries) < spec.n_words:
        n = int(rng.integers(lo, hi + 1))
        # no phoneme directly repeated: identical neighbours are acoustically one run
        picks = [int(rng.integers(0, len(phones)))]
        while len(picks) < n:
            picks.append((picks[-1] + int(rng.integers(1, len(phones)))) % len(phones))
        word = "".join(phones[i][1] for i in picks)
        entries.setdefault(word, tuple(phones[i][0] for i in picks))
    return Lexicon(dict(sorted(entries.items())), (SIL, *(p for p, _ in phones)))


def _sentence(lexicon: Lexicon, spec: SyntheticSpec, rng: np.random.Generator) -> list[str]:
    words = sorted(lexicon.entries)
    lo, hi = spec.words_per_utterance
    return [words[i] for i in rng.integers(0, len(words), size=int(rng.integers(lo, hi + 1)))]


def _speak(
    words: list[str], corpus_parts: tuple, spec: SyntheticSpec, rng: np.random.Generator
) -> tuple[np.ndarray, Alignment]:
    lexicon, prototypes, durations = corpus_parts
    tokens = [SIL]
    for i, w in enumerate(words):
        if i and rng.random() < spec.sil_rate:
            tokens.append(SIL)
        tokens.extend(lexicon[w])
    tokens.append(SIL)
    lengths = np.minimum(1 + rng.poisson([durations[t] - 1.0 for t in tokens]), spec.max_duration)
    spans, cursor = [], 0
    for tok, n in zip(tokens, lengths):
        spans.append((tok, cursor, cursor + int(n)))
        cursor += int(n)
    frames = np.concatenate([np.repeat(prototypes[t][None, :], n, axis=0) for t, n in zip(tokens, lengths)])
    frames = frames + spec.noise * rng.normal(size=frames.shape)
    return frames, Alignment.from_tuples(spans)


def make_corpus(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    lexicon = _make_lexicon(spec, rng)
    prototypes = {p: spec.prototype_scale * rng.normal(size=spec.feature_dim) for p in lexicon.inventory}
    lo, hi = spec.mean_duration
    durations = {p: float(rng.uniform(lo, hi)) for p in lexicon.inventory}
    durations[SIL] = spec.sil_mean_duration
    parts = (lexicon, prototypes, durations)

    def utterances(prefix: str, n: int) -> list[Utterance]:
        out = []
        for i in range(n):
            words = _sentence(lexicon, spec, rng)
            feats, ali = _speak(words, parts, spec, rng)
            out.append(Utterance(f"{prefix}{i:04d}", feats, " ".join(words), ali))
        return out

    train = utterances("train", spec.n_train)
    heldout = utterances("heldout", spec.n_heldout)
    text = [" ".join(_sentence(lexicon, spec, rng)) for _ in range(spec.n_text)]
    return SyntheticCorpus(spec, lexicon, prototypes, durations, train, heldout, text)


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    write_lexicon(corpus.lexicon, out / "lexicon.tsv")
    (out / "text.txt").write_text("\n".join(corpus.text) + "\n", encoding="utf-8")
    for name, utts in (("train", corpus.train), ("heldout", corpus.heldout)):
        entries = []
        for u in utts:
            fp = out / "feats" / f"{u.utt_id}.feat"
            write_features(fp, u.features)
            entries.append(ManifestEntry(u.utt_id, fp, u.features.shape[0], u.transcript))
        write_manifest(out / f"{name}.tsv", entries)
    write_alignments(out / "alignments.tsv", corpus.alignments)
    return out
