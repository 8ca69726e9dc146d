"""Toy end-to-end runs on the synthetic corpus (used by scripts/ and the acceptance tests)."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import compute as C
from .compute import Graph, GradCheckReport, finite_diff_check
from .config import Config, load_config
from .decode import corpus_wer
from .diagnostics import aggregate_heatmaps, diagnostic_layers, diagonal_dominance, model_heatmaps
from .encoder import Model, ModelConfig
from .labeler import fit_labels
from .losses import HubertHead, LinearHead, ce_alignment_loss, ctc_loss, hubert_loss, mlm_loss
from .paired import frame_phonemes, span_runs
from .synthetic import SyntheticCorpus, SyntheticSpec, make_corpus
from .textpipe import estimate_duration_model_from_runs
from .trainer import PretrainData, SpeechItem, TrainState, evaluate_pretrain, finetune, pretrain, transcribe


@dataclass
class ToyRun:
    config: Config
    corpus: SyntheticCorpus
    data: PretrainData
    initial: Model
    state: TrainState
    loss_before: dict[str, float]
    loss_after: dict[str, float]

    @property
    def model(self) -> Model:
        return self.state.model

    def loss_ratio(self, include_ctc: bool = True) -> float:
        keep = [k for k in self.loss_before if include_ctc or not k.endswith(":ctc")]
        return sum(self.loss_after[k] for k in keep) / sum(self.loss_before[k] for k in keep)


def toy_data(corpus: SyntheticCorpus, cfg: Config, seed: int) -> PretrainData:
    feats = {u.utt_id: u.features for u in corpus.train}
    _, labels = fit_labels(feats, cfg.label.clusters_iter1, np.random.default_rng(seed), cfg.label.kmeans_iters)
    items = [SpeechItem(u.utt_id, u.features, labels[u.utt_id], u.alignment, u.transcript) for u in corpus.train]
    durations = estimate_duration_model_from_runs(
        [span_runs(u.alignment) for u in corpus.train], cfg.text.cutoff, corpus.lexicon.inventory
    )
    return PretrainData(items, list(corpus.text), corpus.lexicon, durations, items)


def run_toy(
    train_seed: int = 0,
    corpus_seed: int = 0,
    overrides: Sequence[str] = (),
    corpus: SyntheticCorpus | None = None,
) -> ToyRun:
    cfg = load_config(None, [f"train.seed={train_seed}", *overrides])
    corpus = corpus if corpus is not None else make_corpus(SyntheticSpec(seed=corpus_seed))
    data = toy_data(corpus, cfg, train_seed)
    initial = Model.init(cfg.model, np.random.default_rng(train_seed))
    before = evaluate_pretrain(initial, data, cfg)
    state = pretrain(data, cfg, model=initial.copy())
    after = evaluate_pretrain(state.model, data, cfg)
    return ToyRun(cfg, corpus, data, initial, state, before, after)


def heldout_pairs(corpus: SyntheticCorpus):
    return [(u.utt_id, u.features, corpus.lexicon.ids(frame_phonemes(u.alignment))) for u in corpus.heldout]


def alignment_score(model: Model, corpus: SyntheticCorpus, layer: str = "shared_mid", band: float = 0.1) -> float:
    index = diagnostic_layers(model.config)[layer]
    return diagonal_dominance(aggregate_heatmaps(model_heatmaps(model, heldout_pairs(corpus), index)), band)


def finetune_wer(run: ToyRun, use_char_head: bool = True, use_char_layer: bool = True) -> tuple[float, float, Model]:
    """(train WER, held-out WER, fine-tuned model) with greedy decoding."""
    ft = replace(run.config.finetune, use_char_head=use_char_head, use_char_layer=use_char_layer)
    model = finetune(run.model, run.data.speech, ft).model

    def score(utts):
        return corpus_wer([(transcribe(model, u.features, use_char_layer), u.transcript) for u in utts])

    return score(run.corpus.train), score(run.corpus.heldout), model


def gradient_checks(seed: int = 0, epsilon: float = 1e-4, tolerance: float = 1e-3) -> dict[str, GradCheckReport]:
    """Finite-difference checks of every loss and a 2-layer dim-8 encoder stack."""
    rng = np.random.default_rng(seed)
    T, d = 6, 8
    reports: dict[str, GradCheckReport] = {}

    def check(name, fn, inputs):
        reports[name] = finite_diff_check(Graph(fn, name), inputs, epsilon=epsilon, tolerance=tolerance)

    mask = np.array([True, False, True, True, False, True])
    labels = rng.integers(0, 5, size=T)

    def hub(h, proj, codes):
        return hubert_loss(h, labels, mask, HubertHead(proj, codes, 0.1)).value

    check("hubert_loss", hub, {"h": rng.normal(size=(T, d)), "proj": rng.normal(size=(d, 4)), "codes": rng.normal(size=(5, 4))})

    targets = rng.integers(0, 7, size=T)

    def mlm(h, w, b):
        return mlm_loss(h, targets, mask, LinearHead(w, b)).value

    check("mlm_loss", mlm, {"h": rng.normal(size=(T, d)), "w": rng.normal(size=(d, 7)), "b": rng.normal(size=7)})

    target = [1, 2, 2, 3]

    def ctc(logits):
        return ctc_loss(logits, target)

    check("ctc_loss", ctc, {"logits": rng.normal(size=(T + 3, 5))})

    def ce(hs, ht):
        return ce_alignment_loss(hs, ht, ~mask)

    check("ce_alignment_loss", ce, {"hs": rng.normal(size=(T, d)), "ht": rng.normal(size=(T, d))})

    cfg = ModelConfig(model_dim=d, inner_dim=16, heads=2, layers_speech=2, layers_text=0, layers_shared=0, layers_char=0, conv_pos_kernel=3, conv_pos_groups=2, rel_bias_buckets=8, rel_max_distance=16)
    model = Model.init(cfg, rng)
    names = [n for n in model.param_names() if n.startswith(("speech.block", "speech.rel_bias"))]
    probe = rng.normal(size=(T, d))

    def stack(x, **params):
        out = model.with_params(params).run_stack(x, "speech", cfg.layers_speech)[-1]
        return C.mean(C.mul(out, probe))

    check("encoder_stack", stack, {"x": rng.normal(size=(T, d)), **{n: model.params[n].data.copy() for n in names}})
    return reports
