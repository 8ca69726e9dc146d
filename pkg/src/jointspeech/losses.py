"""Training objectives: masked codeword prediction, phoneme MLM, character CTC,
and the cross-entropy alignment alternative used in ablations.

CTC uses blank index 0 throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import Tensor

BLANK = 0


@dataclass
class HubertHead:
    projection: Tensor  # [model_dim, embed_dim]
    codewords: Tensor  # [n_codewords, embed_dim]
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_codewords(self) -> int:
        return self.codewords.shape[0]


@dataclass
class LinearHead:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return C.add(C.matmul(x, self.weight), self.bias)


@dataclass
class MaskedLoss:
    value: Tensor
    count: int
    probs: np.ndarray | None = None

    def item(self) -> float:
        return self.value.item()


@dataclass
class LossBundle:
    hubert: float | None = None
    mlm: float | None = None
    ctc: float | None = None
    ce: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def terms(self) -> dict[str, float]:
        return {k: v for k, v in (("hubert", self.hubert), ("mlm", self.mlm), ("ctc", self.ctc), ("ce", self.ce)) if v is not None}

    @property
    def total(self) -> float:
        return float(sum(self.terms().values()))


def _rows(mask, length: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (length,):
            raise ValueError(f"mask shape {mask.shape} != ({length},)")
        return np.flatnonzero(mask)
    return np.unique(mask.astype(np.int64))


def _l2_normalize(x: Tensor) -> Tensor:
    return C.div(x, C.sqrt(C.reduce_sum(C.mul(x, x), axis=-1, keepdims=True)))


def codeword_logits(h: Tensor, head: HubertHead) -> Tensor:
    """cosine(W h_t, e_c) / tau for every row of ``h``."""
    proj = _l2_normalize(C.matmul(h, head.projection))
    codes = _l2_normalize(head.codewords)
    return C.div(C.matmul(proj, C.transpose(codes)), head.temperature)


def hubert_loss(h_shared, labels, mask, head: HubertHead) -> MaskedLoss:
    """Mean over masked frames of -log p(z_t | h_t); p is the codeword softmax."""
    h_shared = C.as_tensor(h_shared)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (h_shared.shape[0],):
        raise ValueError(f"labels length {labels.shape} != frames {h_shared.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= head.n_codewords):
        raise ValueError(f"label outside [0, {head.n_codewords})")
    rows = _rows(mask, h_shared.shape[0])
    if rows.size == 0:
        return MaskedLoss(Tensor(0.0), 0, np.zeros((0, head.n_codewords)))
    logp = C.log_softmax(codeword_logits(C.getitem(h_shared, rows), head))
    picked = C.getitem(logp, (np.arange(rows.size), labels[rows]))
    loss = C.neg(C.mean(picked))
    return MaskedLoss(loss, int(rows.size), np.exp(logp.data))


def mlm_loss(h_shared, targets, mask, head: LinearHead) -> MaskedLoss:
    """Cross-entropy over the phoneme vocabulary at masked frames only."""
    h_shared = C.as_tensor(h_shared)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (h_shared.shape[0],):
        raise ValueError(f"targets length {targets.shape} != frames {h_shared.shape[0]}")
    vocab = head.weight.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target outside phoneme vocabulary of size {vocab}")
    rows = _rows(mask, h_shared.shape[0])
    if rows.size == 0:
        return MaskedLoss(Tensor(0.0), 0)
    logp = C.log_softmax(head(C.getitem(h_shared, rows)))
    picked = C.getitem(logp, (np.arange(rows.size), targets[rows]))
    return MaskedLoss(C.neg(C.mean(picked)), int(rows.size))


# ---------------------------------------------------------------------- CTC


def _extend(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * target.size + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allowed = np.zeros(ext.size, dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def ctc_min_frames(target) -> int:
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_forward_backward(log_probs: np.ndarray, target, blank: int = BLANK):
    """Log-space alpha/beta tables; returns (log_alpha, log_beta, log_likelihood)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    ext = _extend(np.asarray(target, dtype=np.int64), blank)
    S = ext.size
    skip = _skip_allowed(ext, blank)
    emit = lp[:, ext]  # [T, S]
    neg_inf = -np.inf
    alpha = np.full((T, S), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((T, S), neg_inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    ll = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return alpha, beta, float(ll)


def ctc_nll(log_probs: Tensor, target, blank: int = BLANK) -> Tensor:
    """-log p(target | x) from per-frame log-probabilities (a graph primitive).

    An infeasible target gives +inf with a zero gradient, never NaN.
    """
    log_probs = C.as_tensor(log_probs)
    if log_probs.ndim != 2 or log_probs.shape[0] < 1:
        raise ValueError(f"log_probs must be [T >= 1, vocab], got {log_probs.shape}")
    target = np.asarray(target, dtype=np.int64)
    vocab = log_probs.shape[1]
    if target.size and (target.min() < 0 or target.max() >= vocab or (target == blank).any()):
        raise ValueError("target symbols must be non-blank vocabulary indices")
    if ctc_min_frames(target) > log_probs.shape[0]:
        return C.custom_op("ctc", np.array(np.inf), (log_probs,), lambda g: (np.zeros(log_probs.shape),))
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha, beta, ll = ctc_forward_backward(log_probs.data, target, blank)
    if not np.isfinite(ll):
        return C.custom_op("ctc", np.array(np.inf), (log_probs,), lambda g: (np.zeros(log_probs.shape),))
    ext = _extend(target, blank)

    def _back(g):
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - log_probs.data[:, ext] - ll)
        occ = np.nan_to_num(occ)
        grad = np.zeros_like(log_probs.data)
        np.add.at(grad, (slice(None), ext), occ)
        return (-g * grad,)

    return C.custom_op("ctc", np.array(-ll), (log_probs,), _back)


def ctc_loss(logits, target, blank: int = BLANK) -> Tensor:
    return ctc_nll(C.log_softmax(C.as_tensor(logits)), target, blank)


def ctc_collapse(path, blank: int = BLANK) -> tuple[int, ...]:
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return tuple(out)


def ctc_brute_force(probs: np.ndarray, target, blank: int = BLANK) -> float:
    """-log sum over every frame path that collapses to ``target`` (T <= 8, vocab <= 4)."""
    probs = np.asarray(probs, dtype=np.float64)
    T, V = probs.shape
    if T > 8 or V > 4:
        raise ValueError(f"brute force limited to T <= 8 and vocab <= 4, got T={T}, vocab={V}")
    goal = tuple(int(s) for s in target)
    terms = [
        math.prod(probs[t, s] for t, s in enumerate(path))
        for path in itertools.product(range(V), repeat=T)
        if ctc_collapse(path, blank) == goal
    ]
    total = math.fsum(terms)
    return math.inf if total <= 0.0 else -math.log(total)


# --------------------------------------------------------- CE alignment alt.


def ce_alignment_loss(h_speech, h_text, unmasked) -> Tensor:
    """Mean over unmasked frames of CE(softmax(text), softmax(speech)); text is the target."""
    h_speech, h_text = C.as_tensor(h_speech), C.as_tensor(h_text)
    if h_speech.shape != h_text.shape:
        raise ValueError(f"length mismatch: {h_speech.shape} vs {h_text.shape}")
    rows = _rows(unmasked, h_speech.shape[0])
    if rows.size == 0:
        return Tensor(0.0)
    q = C.log_softmax(C.getitem(h_speech, rows))
    p = C.softmax(C.getitem(h_text, rows))
    return C.neg(C.mean(C.reduce_sum(C.mul(p, q), axis=-1)))


def weighted_mean(terms: list[MaskedLoss]) -> MaskedLoss:
    """Position-weighted average of several per-utterance masked losses."""
    total = sum(t.count for t in terms)
    if total == 0:
        return MaskedLoss(Tensor(0.0), 0)
    acc = None
    for t in terms:
        if t.count == 0:
            continue
        part = C.mul(t.value, t.count / total)
        acc = part if acc is None else C.add(acc, part)
    return MaskedLoss(acc, total)
