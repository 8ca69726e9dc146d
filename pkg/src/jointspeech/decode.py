"""CTC decoding (greedy and prefix beam search with n-gram shallow fusion) and WER.

A hypothesis ``y`` is ranked by

    log p_ctc(y | x) + lm_weight * log p_lm(y) + length_weight * |y|

where ``|y|`` counts output symbols.

LM file grammar (ARPA subset, natural tokens are characters)::

    \\data\\
    ngram 1=<count>
    ...
    \\1-grams:
    <log10 prob>\\t<token>[\\t<log10 backoff>]
    ...
    \\end\\

Missing backoff fields mean log10 backoff 0.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .losses import BLANK, ctc_forward_backward
from .textpipe import CHARS

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
_LN10 = math.log(10.0)


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 16  # 1500 at full scale
    lm_weight: float = 0.0
    length_weight: float = 0.0
    lm_order: int = 4
    lm_eos: bool = True

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")


def greedy_decode(logits, blank: int = BLANK) -> list[int]:
    """Frame argmax, merge repeats, drop blanks."""
    best = np.asarray(logits).argmax(axis=-1)
    out, prev = [], None
    for s in best:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


# ----------------------------------------------------------------- n-grams


@dataclass
class NGramLM:
    """Backoff n-gram model; probabilities stored as natural logs."""

    order: int
    vocab: tuple[str, ...]
    logprob: dict[tuple[str, ...], float] = field(default_factory=dict)
    backoff: dict[tuple[str, ...], float] = field(default_factory=dict)

    def log_prob(self, token: str, history: Sequence[str] = ()) -> float:
        if token not in self._vocab_set:
            token = UNK
        hist = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        acc = 0.0
        while True:
            key = hist + (token,)
            if key in self.logprob:
                return acc + self.logprob[key]
            if not hist:
                return -math.inf
            acc += self.backoff.get(hist, 0.0)
            hist = hist[1:]

    def sentence_log_prob(self, tokens: Sequence[str], eos: bool = True) -> float:
        hist = [BOS]
        total = 0.0
        for tok in tokens:
            total += self.log_prob(tok, hist)
            hist.append(tok)
        if eos:
            total += self.log_prob(EOS, hist)
        return total

    @property
    def _vocab_set(self) -> frozenset:
        cached = getattr(self, "_vs", None)
        if cached is None:
            cached = frozenset(self.vocab)
            object.__setattr__(self, "_vs", cached)
        return cached


def _sentences(corpus: Iterable[str | Sequence[str]]) -> list[list[str]]:
    return [list(s) for s in corpus]


def train_ngram(
    corpus: Iterable[str | Sequence[str]],
    order: int,
    k: float = 0.1,
    vocab: Iterable[str] | None = None,
    eos: bool = True,
) -> NGramLM:
    """Add-k estimates for seen n-grams; leftover mass goes to the next lower
    order, renormalised over the unseen tokens (so every conditional sums to 1).

    ``corpus`` items are token sequences (a string is a sequence of characters).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    sents = _sentences(corpus)
    if not sents:
        raise ValueError("empty corpus")
    tokens = set(vocab or ()) | {t for s in sents for t in s}
    tokens.discard(BOS)
    V = tuple(sorted(tokens)) + ((EOS,) if eos else ()) + (UNK,)
    lm = NGramLM(order, V)

    counts: list[dict[tuple[str, ...], Counter]] = [defaultdict(Counter) for _ in range(order)]
    for s in sents:
        seq = [BOS, *s] + ([EOS] if eos else [])
        for i in range(1, len(seq)):
            for n in range(1, order + 1):
                if i - n + 1 < 0:
                    break
                hist = tuple(seq[i - n + 1 : i])
                counts[n - 1][hist][seq[i]] += 1

    uni = counts[0][()]
    total = sum(uni.values())
    for w in V:
        lm.logprob[(w,)] = math.log((uni.get(w, 0) + k) / (total + k * len(V)))
    for n in range(2, order + 1):
        for hist, c in sorted(counts[n - 1].items()):
            ch = sum(c.values())
            denom = ch + k * len(V)
            seen_mass_lo = 0.0
            for w in sorted(c):
                lm.logprob[hist + (w,)] = math.log((c[w] + k) / denom)
                seen_mass_lo += math.exp(lm.log_prob(w, hist[1:]))
            alpha = k * (len(V) - len(c)) / denom
            rest = 1.0 - seen_mass_lo
            if alpha > 0 and rest > 0:
                lm.backoff[hist] = math.log(alpha / rest)
            elif alpha > 0:
                lm.backoff[hist] = 0.0
            else:
                lm.backoff[hist] = -math.inf
    return lm


def perplexity(lm: NGramLM, corpus: Iterable[str | Sequence[str]], eos: bool = True) -> float:
    total, n = 0.0, 0
    for s in _sentences(corpus):
        total += lm.sentence_log_prob(s, eos)
        n += len(s) + (1 if eos else 0)
    return math.exp(-total / n)


def _fmt10(x: float) -> str:
    return "-99" if x == -math.inf else repr(x / _LN10)


def write_arpa(lm: NGramLM, path: str | Path) -> None:
    by_order: dict[int, list[tuple[str, ...]]] = defaultdict(list)
    for key in lm.logprob:
        by_order[len(key)].append(key)
    contexts = set(lm.backoff)
    if (BOS,) in contexts and (BOS,) not in lm.logprob:
        by_order[1].append((BOS,))
    lines = ["\\data\\"]
    lines += [f"ngram {n}={len(by_order[n])}" for n in range(1, lm.order + 1)]
    for n in range(1, lm.order + 1):
        lines.append("")
        lines.append(f"\\{n}-grams:")
        for key in sorted(by_order[n]):
            lp = lm.logprob.get(key, -math.inf)
            row = f"{_fmt10(lp)}\t{' '.join(key)}"
            if key in lm.backoff:
                row += f"\t{_fmt10(lm.backoff[key])}"
            lines.append(row)
    lines += ["", "\\end\\"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_arpa(path: str | Path) -> NGramLM:
    order = 0
    logprob: dict[tuple[str, ...], float] = {}
    backoff: dict[tuple[str, ...], float] = {}
    section = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line == "\\data\\":
            continue
        if line.startswith("ngram "):
            order = max(order, int(line.split()[1].split("=")[0]))
            continue
        if line == "\\end\\":
            break
        if line.startswith("\\") and line.endswith("-grams:"):
            section = int(line[1:].split("-")[0])
            continue
        if section is None:
            continue
        cols = raw.split("\t")
        key = tuple(cols[1].split(" "))
        if len(key) != section:
            raise ValueError(f"{path}: {section}-gram section holds {cols[1]!r}")
        lp = float(cols[0])
        if lp > -99:
            logprob[key] = lp * _LN10
        if len(cols) > 2:
            bo = float(cols[2])
            backoff[key] = -math.inf if bo <= -99 else bo * _LN10
    vocab = tuple(sorted(k[0] for k in logprob if len(k) == 1))
    return NGramLM(order, vocab, logprob, backoff)


# ------------------------------------------------------------- beam search


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    ctc_log_prob: float
    lm_log_prob: float

    def text(self, symbols: Sequence[str] = CHARS) -> str:
        return "".join(symbols[t] for t in self.tokens)


def _lm_tokens(prefix: Sequence[int], symbols: Sequence[str]) -> list[str]:
    return [symbols[t] for t in prefix]


def score_hypothesis(log_probs, tokens: Sequence[int], lm: NGramLM | None, cfg: DecodeConfig, symbols: Sequence[str] = CHARS, blank: int = BLANK) -> float:
    """Fused score of one hypothesis computed directly (no search)."""
    _, _, ll = ctc_forward_backward(np.asarray(log_probs), list(tokens), blank)
    lm_lp = 0.0
    if lm is not None and cfg.lm_weight != 0.0:
        lm_lp = lm.sentence_log_prob(_lm_tokens(tokens, symbols), cfg.lm_eos)
    return ll + cfg.lm_weight * lm_lp + cfg.length_weight * len(tokens)


def beam_decode(
    log_probs,
    lm: NGramLM | None = None,
    cfg: DecodeConfig = DecodeConfig(),
    symbols: Sequence[str] = CHARS,
    blank: int = BLANK,
) -> Hypothesis:
    """CTC prefix beam search; prefixes pruned by fused score.

    Ties are broken by the lexicographically smallest hypothesis string.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    use_lm = lm is not None and cfg.lm_weight != 0.0
    lm_cache: dict[tuple[int, ...], float] = {(): 0.0}

    def lm_score(prefix: tuple[int, ...]) -> float:
        if not use_lm:
            return 0.0
        if prefix not in lm_cache:
            hist = [BOS, *_lm_tokens(prefix[:-1], symbols)]
            lm_cache[prefix] = lm_score(prefix[:-1]) + lm.log_prob(symbols[prefix[-1]], hist)
        return lm_cache[prefix]

    def text(prefix):
        return "".join(symbols[t] for t in prefix)

    def fused(prefix, pb, pnb):
        return np.logaddexp(pb, pnb) + cfg.lm_weight * lm_score(prefix) + cfg.length_weight * len(prefix)

    neg = -np.inf
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, neg)}
    for t in range(T):
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [neg, neg])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], total + lp[t, blank])
            for c in range(V):
                if c == blank:
                    continue
                p = lp[t, c]
                if p == neg:
                    continue
                new = prefix + (c,)
                if prefix and prefix[-1] == c:
                    cell[1] = np.logaddexp(cell[1], pnb + p)
                    nc = nxt[new]
                    nc[1] = np.logaddexp(nc[1], pb + p)
                else:
                    nc = nxt[new]
                    nc[1] = np.logaddexp(nc[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-fused(kv[0], *kv[1]), text(kv[0])))
        beams = {k: (v[0], v[1]) for k, v in ranked[: cfg.beam]}

    def final(prefix, pb, pnb):
        ctc = float(np.logaddexp(pb, pnb))
        lm_lp = 0.0
        if use_lm:
            lm_lp = lm_score(prefix)
            if cfg.lm_eos:
                lm_lp += lm.log_prob(EOS, [BOS, *_lm_tokens(prefix, symbols)])
        return ctc + cfg.lm_weight * lm_lp + cfg.length_weight * len(prefix), ctc, lm_lp

    scored = []
    for prefix, (pb, pnb) in beams.items():
        s, ctc, lm_lp = final(prefix, pb, pnb)
        scored.append((-s, text(prefix), Hypothesis(prefix, s, ctc, lm_lp)))
    scored.sort(key=lambda x: (x[0], x[1]))
    return scored[0][2]


def exhaustive_decode(log_probs, lm: NGramLM | None = None, cfg: DecodeConfig = DecodeConfig(), symbols: Sequence[str] = CHARS, blank: int = BLANK) -> Hypothesis:
    """Enumerate every label sequence up to length T (tiny instances only)."""
    import itertools

    lp = np.asarray(log_probs)
    T, V = lp.shape
    labels = [c for c in range(V) if c != blank]
    best = None
    for n in range(T + 1):
        for y in itertools.product(labels, repeat=n):
            if ctc_min_frames_ok(y, T):
                s = score_hypothesis(lp, y, lm, cfg, symbols, blank)
                key = (-s, "".join(symbols[t] for t in y))
                if best is None or key < best[0]:
                    best = (key, y, s)
    _, _, ll = ctc_forward_backward(lp, list(best[1]), blank)
    return Hypothesis(tuple(best[1]), best[2], ll, 0.0)


def ctc_min_frames_ok(y: Sequence[int], T: int) -> bool:
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b) <= T


# --------------------------------------------------------------------- WER


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(hyp: str | Sequence[str], ref: str | Sequence[str]) -> float:
    hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
    ref = ref.split() if isinstance(ref, str) else list(ref)
    if not ref:
        raise ValueError("reference must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(pairs: Iterable[tuple[str, str]]) -> float:
    errors, words = 0, 0
    for hyp, ref in pairs:
        r = ref.split()
        errors += edit_distance(hyp.split(), r)
        words += len(r)
    if words == 0:
        raise ValueError("references are empty")
    return errors / words


def read_hypotheses(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, hyp = line.partition("\t")
            out[key] = hyp
    return out


def write_hypotheses(path: str | Path, hyps: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in sorted(hyps.items())), encoding="utf-8")
