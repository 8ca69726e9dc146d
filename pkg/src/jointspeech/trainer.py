"""Joint pre-training, CTC fine-tuning and transcription.

Every update is single-task: a batch holds only speech, only text or only
paired items. Within an epoch the speech batches are packed to a frame
budget, as many text batches are drawn as there are speech batches, every
paired batch is kept, and the combined list is shuffled by the seeded rng.

Training log: one line per loss term and step,
``step<TAB>task:term<TAB>loss<TAB>lr``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import compute as C
from .compute import Tensor
from .config import Config, FinetuneConfig, TrainConfig
from .decode import DecodeConfig, NGramLM, beam_decode, greedy_decode
from .encoder import SPEECH, TEXT, Model
from .losses import (
    MaskedLoss,
    ce_alignment_loss,
    ctc_min_frames,
    ctc_nll,
    hubert_loss,
    mlm_loss,
    weighted_mean,
)
from .masking import MaskSpec, sample_mask
from .paired import Alignment, frame_phonemes, plan_swap, swap_representations
from .textpipe import CHARS, DurationModel, Lexicon, OutOfVocabulary, decode_chars, encode_chars, normalize, prepare_text

SPEECH_TASK, TEXT_TASK, PAIRED_TASK = "speech", "text", "paired"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class UnsupportedAlignment(NotImplementedError):
    pass


# ----------------------------------------------------------------- schedules


def lr_linear(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    return peak * (total - step) / (total - warmup)


def lr_tristage(
    step: int,
    total: int,
    peak: float,
    fractions: tuple[float, float, float] = (0.1, 0.4, 0.5),
    floor_ratio: float = 0.05,
) -> float:
    """Warm up linearly to ``peak``, hold, then decay linearly to ``floor_ratio * peak``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = fractions[0] * total
    hold_end = warm + fractions[1] * total
    if step < warm:
        return peak * step / warm
    if step <= hold_end:
        return peak
    if step >= total:
        return floor_ratio * peak
    frac = (step - hold_end) / (total - hold_end)
    return peak * (1.0 - frac) + floor_ratio * peak * frac


# ----------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction, decoupled weight decay and global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.98), eps=1e-6, weight_decay=0.0, clip=10.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps, self.weight_decay, self.clip = eps, weight_decay, clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    @staticmethod
    def global_norm(grads: dict[str, np.ndarray]) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))

    def step(self, grads: dict[str, np.ndarray], lr: float) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        norm = self.global_norm(grads)
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue  # frozen or unused this step
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        return norm


# ---------------------------------------------------------------------- data


@dataclass
class SpeechItem:
    utt_id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    alignment: Alignment | None = None
    transcript: str | None = None

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass
class PretrainData:
    speech: list[SpeechItem]
    text: list[str]
    lexicon: Lexicon
    durations: DurationModel
    paired: list[SpeechItem] = field(default_factory=list)

    def __post_init__(self):
        for item in self.paired:
            if item.alignment is None or item.labels is None:
                raise ValueError(f"paired item {item.utt_id} needs labels and an alignment")
            if item.alignment.frames != item.frames:
                raise ValueError(f"{item.utt_id}: alignment covers {item.alignment.frames} frames, features {item.frames}")


def select_paired(items: Sequence[SpeechItem], hours: float) -> list[SpeechItem]:
    """Keep the first ``hours / 100`` of the aligned items (in utterance-id order)."""
    aligned = sorted((i for i in items if i.alignment is not None), key=lambda i: i.utt_id)
    n = int(round(len(aligned) * min(max(hours, 0.0), 100.0) / 100.0))
    return aligned[:n]


@dataclass(frozen=True)
class Batch:
    task: str
    items: tuple[int, ...]


def pack_by_frames(lengths: Sequence[int], order: Sequence[int], budget: int) -> list[tuple[int, ...]]:
    """Greedy packing in the given order; a batch always holds at least one item."""
    batches, current, used = [], [], 0
    for i in order:
        n = int(lengths[i])
        if current and used + n > budget:
            batches.append(tuple(current))
            current, used = [], 0
        current.append(int(i))
        used += n
    if current:
        batches.append(tuple(current))
    return batches


def schedule_tasks(
    speech_lengths: Sequence[int],
    n_text: int,
    paired_lengths: Sequence[int],
    batch_frames: int,
    rng: np.random.Generator,
) -> list[Batch]:
    """One epoch of single-task batches in shuffled order."""
    speech = pack_by_frames(speech_lengths, rng.permutation(len(speech_lengths)), batch_frames)
    batches = [Batch(SPEECH_TASK, b) for b in speech]
    if n_text and speech:
        per = max(1, int(round(len(speech_lengths) / len(speech))))
        need = per * len(speech)
        picks = rng.choice(n_text, size=need, replace=need > n_text)
        batches += [Batch(TEXT_TASK, tuple(int(x) for x in picks[i * per : (i + 1) * per])) for i in range(len(speech))]
    if len(paired_lengths):
        paired = pack_by_frames(paired_lengths, rng.permutation(len(paired_lengths)), batch_frames)
        batches += [Batch(PAIRED_TASK, b) for b in paired]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# -------------------------------------------------------------- task losses


def _ctc_term(logits: Tensor, chars: np.ndarray) -> Tensor | None:
    """Per-character CTC loss, or None when the target cannot fit in the frames."""
    if chars.size == 0 or ctc_min_frames(chars) > logits.shape[0]:
        return None
    return C.div(ctc_nll(C.log_softmax(logits), chars), float(chars.size))


def _mean(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = C.add(acc, t)
    return C.div(acc, float(len(terms)))


def speech_batch_loss(model: Model, items: Sequence[SpeechItem], spec: MaskSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    parts = []
    for item in items:
        mask = sample_mask(item.frames, spec, rng)
        h = model.encode_speech(item.features, mask).last
        parts.append(hubert_loss(model.final(h), item.labels, mask, model.hubert_head))
    merged = weighted_mean(parts)
    return {"hubert": merged.value} if merged.count else {}


def text_batch_loss(
    model: Model,
    sentences: Sequence[str],
    data: PretrainData,
    cfg: Config,
    rng: np.random.Generator,
    with_ctc: bool,
) -> dict[str, Tensor]:
    mlm_parts: list[MaskedLoss] = []
    ctc_parts: list[Tensor] = []
    for sentence in sentences:
        try:
            up = prepare_text(sentence, data.lexicon, data.durations, rng, cfg.text.sil_rate, cfg.text.oov)
        except OutOfVocabulary:
            continue
        ids = data.lexicon.ids(up.frames)
        mask = sample_mask(len(ids), cfg.mask.text, rng)
        h = model.encode_text(ids, mask).last
        if cfg.train.use_mlm:
            mlm_parts.append(mlm_loss(model.final(h), ids, mask, model.mlm_head))
        if with_ctc:
            term = _ctc_term(model.char_logits(h, cfg.train.use_char_layer), encode_chars(sentence))
            if term is not None:
                ctc_parts.append(term)
    out = {}
    merged = weighted_mean(mlm_parts)
    if merged.count:
        out["mlm"] = C.mul(merged.value, cfg.train.mlm_weight)
    ctc = _mean(ctc_parts)
    if ctc is not None:
        out["ctc"] = C.mul(ctc, cfg.train.ctc_weight)
    return out


def paired_batch_loss(
    model: Model,
    items: Sequence[SpeechItem],
    data: PretrainData,
    cfg: Config,
    rng: np.random.Generator,
) -> dict[str, Tensor]:
    if cfg.train.align_fn == "cross_attention":
        raise UnsupportedAlignment("cross_attention alignment is not implemented; use swap or ce_loss")
    hub_parts, ce_parts = [], []
    for item in items:
        mask = sample_mask(item.frames, cfg.mask.speech, rng)
        ids = data.lexicon.ids(frame_phonemes(item.alignment))
        h_speech = model.encode_private(item.features, SPEECH, mask)[-1]
        h_text = model.encode_private(ids, TEXT, None)[-1]
        if cfg.train.align_fn == "swap":
            plan = plan_swap(item.alignment, mask, cfg.paired.swap_prob, rng)
            if plan.from_text[mask].any():
                raise AssertionError(f"{item.utt_id}: swap selected a masked frame")
            mixed = swap_representations(h_speech, h_text, plan)
            scored = mask | plan.from_text if cfg.paired.swapped_loss else mask
        else:
            mixed, scored = h_speech, mask
            ce_parts.append(ce_alignment_loss(h_speech, h_text, ~mask))
        h = model.encode_shared(mixed)[-1] if model.config.layers_shared else mixed
        hub_parts.append(hubert_loss(model.final(h), item.labels, scored, model.hubert_head))
    out = {}
    merged = weighted_mean(hub_parts)
    if merged.count:
        out["hubert"] = merged.value
    ce = _mean(ce_parts)
    if ce is not None:
        out["ce"] = C.mul(ce, cfg.train.ce_weight)
    return out


# ------------------------------------------------------------------ training


@dataclass
class TrainState:
    model: Model
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    log: list[str] = field(default_factory=list)
    skipped: int = 0


def new_state(model: Model, train: TrainConfig | FinetuneConfig, seed: int) -> TrainState:
    if isinstance(train, TrainConfig):
        opt = Adam(model.params, (train.adam_beta1, train.adam_beta2), train.adam_eps, train.weight_decay, train.grad_clip)
    else:
        opt = Adam(model.params, (0.9, 0.98), 1e-6, 0.0, train.grad_clip)
    return TrainState(model, opt, np.random.default_rng(seed))


def _apply(
    state: TrainState,
    task: str,
    terms: dict[str, Tensor],
    lr: float,
    ids: Sequence[str],
    dump_dir: Path | None,
    trainable: Callable[[str], bool] | None = None,
) -> dict[str, float]:
    values = {k: float(v.item()) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in values.values()):
        dump = {"step": state.step, "task": task, "items": list(ids), "terms": values, "lr": lr}
        if dump_dir is not None:
            dump_dir.mkdir(parents=True, exist_ok=True)
            (dump_dir / f"nonfinite_step{state.step}.json").write_text(json.dumps(dump, indent=1), encoding="utf-8")
        raise NonFiniteLoss(f"non-finite loss at step {state.step} ({task}): {values}", dump)
    for p in state.model.params.values():
        p.grad = None
    if terms:
        total = None
        for v in terms.values():
            total = v if total is None else C.add(total, v)
        C.backprop(total)
        grads = {
            k: p.grad for k, p in state.model.params.items() if p.grad is not None and (trainable is None or trainable(k))
        }
        state.optimizer.step(grads, lr)
    for name, v in values.items():
        state.log.append(f"{state.step}\t{task}:{name}\t{v:.6f}\t{lr:.6g}")
    return values


def pretrain_step(state: TrainState, batch: Batch, data: PretrainData, cfg: Config, paired: Sequence[SpeechItem], dump_dir: Path | None = None) -> dict[str, float]:
    t = cfg.train
    lr = lr_linear(state.step, t.warmup_steps, t.steps, t.peak_lr)
    if batch.task == SPEECH_TASK:
        items = [data.speech[i] for i in batch.items]
        terms = speech_batch_loss(state.model, items, cfg.mask.speech, state.rng)
        ids = [i.utt_id for i in items]
    elif batch.task == TEXT_TASK:
        with_ctc = t.use_ctc and state.step >= t.ctc_start_step
        sentences = [data.text[i] for i in batch.items]
        terms = text_batch_loss(state.model, sentences, data, cfg, state.rng, with_ctc)
        ids = [f"text:{i}" for i in batch.items]
    elif batch.task == PAIRED_TASK:
        items = [paired[i] for i in batch.items]
        terms = paired_batch_loss(state.model, items, data, cfg, state.rng)
        ids = [i.utt_id for i in items]
    else:
        raise ValueError(f"unknown task {batch.task!r}")
    if not terms:
        state.skipped += 1
    values = _apply(state, batch.task, terms, lr, ids, dump_dir)
    state.step += 1
    return values


def check_text_mask(cfg: Config, durations: DurationModel) -> None:
    """The text mask span must cover the longest retained phoneme duration."""
    longest = durations.max_length()
    if cfg.mask.text_span < longest:
        raise ValueError(
            f"text mask span {cfg.mask.text_span} is shorter than the longest retained duration {longest}; "
            "masked phonemes would leak through their unmasked frames"
        )


def pretrain(
    data: PretrainData,
    cfg: Config,
    model: Model | None = None,
    callback: Callable[[TrainState], None] | None = None,
    dump_dir: str | Path | None = None,
) -> TrainState:
    t = cfg.train
    if len(data.lexicon.inventory) > cfg.model.phoneme_vocab:
        raise ValueError(f"lexicon has {len(data.lexicon.inventory)} phonemes, model vocabulary {cfg.model.phoneme_vocab}")
    check_text_mask(cfg, data.durations)
    if model is None:
        model = Model.init(cfg.model, np.random.default_rng(t.seed))
    for item in data.speech:
        if item.labels is None:
            raise ValueError(f"speech item {item.utt_id} has no labels")
    paired = select_paired(data.paired, t.paired_hours)
    state = new_state(model, t, t.seed + 1)
    dump = Path(dump_dir) if dump_dir is not None else None
    while state.step < t.steps:
        epoch = schedule_tasks(
            [i.frames for i in data.speech], len(data.text), [i.frames for i in paired], t.batch_frames, state.rng
        )
        for batch in epoch:
            if state.step >= t.steps:
                break
            pretrain_step(state, batch, data, cfg, paired, dump)
            if callback is not None:
                callback(state)
    return state


def evaluate_pretrain(
    model: Model,
    data: PretrainData,
    cfg: Config,
    seed: int = 1234,
    n_text: int = 32,
    with_ctc: bool = True,
) -> dict[str, float]:
    """Losses on a fixed draw of masks and text sampling; no parameter updates."""
    rng = np.random.default_rng(seed)
    out = {}
    sp = speech_batch_loss(model, data.speech, cfg.mask.speech, rng)
    if sp:
        out["speech:hubert"] = sp["hubert"].item()
    sentences = data.text[:n_text]
    if sentences:
        for k, v in text_batch_loss(model, sentences, data, cfg, rng, with_ctc).items():
            out[f"text:{k}"] = v.item()
    paired = select_paired(data.paired, cfg.train.paired_hours)
    if paired and cfg.train.align_fn != "cross_attention":
        for k, v in paired_batch_loss(model, paired, data, cfg, rng).items():
            out[f"paired:{k}"] = v.item()
    return out


# ---------------------------------------------------------------- fine-tune


def prepare_finetune_model(model: Model, ft: FinetuneConfig, rng: np.random.Generator) -> Model:
    """Copy of ``model``; the character head is re-initialised unless it is reused."""
    out = model.copy()
    if not ft.use_char_head:
        d, v = out.config.model_dim, out.config.char_vocab
        out.params["char.head.w"].data = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, v))
        out.params["char.head.b"].data = np.zeros(v)
        out.params["char.head.ln.g"].data = np.ones(d)
        out.params["char.head.ln.b"].data = np.zeros(d)
    return out


def finetune_batch_loss(model: Model, items: Sequence[SpeechItem], ft: FinetuneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    parts = []
    spec = MaskSpec(ft.mask_prob, ft.mask_span) if ft.mask_prob > 0 else None
    for item in items:
        mask = sample_mask(item.frames, spec, rng) if spec is not None else None
        h = model.encode_speech(item.features, mask).last
        term = _ctc_term(model.char_logits(h, ft.use_char_layer), encode_chars(item.transcript or ""))
        if term is not None:
            parts.append(term)
    ctc = _mean(parts)
    return {"ctc": ctc} if ctc is not None else {}


def finetune(
    model: Model,
    items: Sequence[SpeechItem],
    ft: FinetuneConfig,
    callback: Callable[[TrainState], None] | None = None,
    dump_dir: str | Path | None = None,
) -> TrainState:
    items = [i for i in items if i.transcript]
    if not items:
        raise ValueError("fine-tuning needs transcribed utterances")
    rng = np.random.default_rng(ft.seed)
    state = new_state(prepare_finetune_model(model, ft, rng), ft, ft.seed + 1)
    dump = Path(dump_dir) if dump_dir is not None else None
    lengths = [i.frames for i in items]
    while state.step < ft.steps:
        for b in pack_by_frames(lengths, state.rng.permutation(len(items)), ft.batch_frames):
            if state.step >= ft.steps:
                break
            lr = lr_tristage(state.step, ft.steps, ft.peak_lr, ft.fractions, ft.floor_ratio)
            batch = [items[i] for i in b]
            terms = finetune_batch_loss(state.model, batch, ft, state.rng)
            if not terms:
                state.skipped += 1
            head_only = (lambda k: k.startswith("char.")) if state.step < ft.freeze_steps else None
            _apply(state, "finetune", terms, lr, [i.utt_id for i in batch], dump, head_only)
            state.step += 1
            if callback is not None:
                callback(state)
    return state


# ---------------------------------------------------------------- decoding


def char_log_probs(model: Model, features: np.ndarray, use_char_layer: bool = True) -> np.ndarray:
    h = model.encode_speech(features).last
    return C.log_softmax(model.char_logits(h, use_char_layer)).data


def transcribe(
    model: Model,
    features: np.ndarray,
    use_char_layer: bool = True,
    cfg: DecodeConfig | None = None,
    lm: NGramLM | None = None,
) -> str:
    lp = char_log_probs(model, features, use_char_layer)
    if cfg is None or (cfg.beam == 1 and (lm is None or cfg.lm_weight == 0.0)):
        return decode_chars(greedy_decode(lp))
    hyp = beam_decode(lp, lm, cfg, CHARS)
    return decode_chars(hyp.tokens)


def char_sequences(sentences: Sequence[str]) -> list[list[str]]:
    """Sentences as character-token sequences for LM training (words joined by ``|``)."""
    return [list("|".join(normalize(s))) for s in sentences if normalize(s)]
