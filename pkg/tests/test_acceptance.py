"""Acceptance criteria at their stated tolerances.

A summary line per criterion is printed at the end of the pytest run
(section "acceptance criteria"). The toy end-to-end runs are cached per
module; the whole file takes a few minutes on one core.
"""

import itertools
import math
import time
from collections import Counter

import numpy as np
import pytest

from jointspeech.compute import Graph, Tensor, backward, forward
from jointspeech.decode import DecodeConfig, beam_decode, exhaustive_decode, score_hypothesis
from jointspeech.experiment import alignment_score, finetune_wer, gradient_checks, run_toy
from jointspeech.labeler import fit_labels, kmeans_fit
from jointspeech.losses import HubertHead, LinearHead, ctc_brute_force, ctc_loss, hubert_loss, mlm_loss
from jointspeech.masking import MaskSpec, sample_mask
from jointspeech.paired import Alignment, frame_phonemes, plan_swap, span_runs, swap_representations
from jointspeech.synthetic import SyntheticSpec, make_corpus
from jointspeech.textpipe import SIL, estimate_duration_model_from_runs, insert_sil, phonemize, upsample
from jointspeech.trainer import lr_linear, lr_tristage

SEEDS = (0, 1, 2)


def log_softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1)
def test_ctc_oracle_equivalence(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, n = 0.0, 0
    for labels in (2, 3):  # vocab 3 with the blank, and 3 labels plus the blank
        V = labels + 1
        targets = [y for k in range(4) for y in itertools.product(range(1, V), repeat=k)]
        for T in range(1, 6):
            logits = rng.normal(size=(T, V))
            probs = np.exp(log_softmax_np(logits))
            for y in targets:
                ours = ctc_loss(Tensor(logits), list(y)).item()
                ref = ctc_brute_force(probs, y)
                n += 1
                if math.isinf(ref):
                    assert math.isinf(ours), (T, y)
                    continue
                worst = max(worst, abs(ours - ref))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{n} cases, max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 10.0


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2)
def test_gradient_integrity(record_property):
    start = time.perf_counter()
    reports = gradient_checks(seed=0, epsilon=1e-4, tolerance=1e-3)
    elapsed = time.perf_counter() - start
    worst = {k: r.worst() for k, r in reports.items()}
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s")
    assert set(reports) == {"hubert_loss", "mlm_loss", "ctc_loss", "ce_alignment_loss", "encoder_stack"}
    assert all(r.passed for r in reports.values()), {k: r.failures for k, r in reports.items()}
    assert elapsed < 60.0


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3)
def test_codeword_softmax_contract(record_property):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        head = HubertHead(Tensor(rng.normal(size=(8, 6))), Tensor(rng.normal(size=(12, 6))), 0.1)
        res = hubert_loss(rng.normal(size=(20, 8)), rng.integers(0, 12, 20), np.ones(20, bool), head)
        worst = max(worst, float(np.abs(res.probs.sum(axis=1) - 1.0).max()))
    # cosine 1 with the target codeword and 0 with the other: gap 1 at tau 0.1
    head = HubertHead(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.1)
    p = hubert_loss(np.array([[2.5, 0.0]]), [0], [True], head).probs[0, 0]
    expected = math.exp(10) / (math.exp(10) + 1)
    record_property("detail", f"max |sum-1| {worst:.1e}, p {p:.12f} vs {expected:.12f}")
    assert worst < 1e-9
    assert abs(p - expected) < 1e-9


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4)
def test_masking_statistics(record_property):
    mask = sample_mask(10**5, MaskSpec(0.08, 10), np.random.default_rng(0))
    frac = mask.mean()
    expected = 1 - 0.92**10
    record_property("detail", f"masked fraction {frac:.4f} (expected {expected:.4f})")
    assert abs(frac - 0.5656) <= 0.01


@pytest.mark.criterion(4)
def test_losses_use_masked_positions_only(record_property):
    rng = np.random.default_rng(1)
    T = 40
    mask = sample_mask(T, MaskSpec(0.08, 10), rng)
    assert mask.any() and not mask.all()
    head = HubertHead(Tensor(rng.normal(size=(8, 6))), Tensor(rng.normal(size=(12, 6))), 0.1)
    lin = LinearHead(Tensor(rng.normal(size=(8, 9))), Tensor(rng.normal(size=9)))
    labels = rng.integers(0, 9, T)
    for name, fn in (
        ("hubert", lambda h, z: hubert_loss(h, z, mask, head).value),
        ("mlm", lambda h, z: mlm_loss(h, z, mask, lin).value),
    ):
        g = Graph(lambda h: fn(h, labels))
        forward(g, {"h": rng.normal(size=(T, 8))})
        grad = backward(g)["h"].data
        assert np.all(grad[~mask] == 0.0), name
        other = labels.copy()
        other[~mask] = (other[~mask] + 1) % 9
        h = rng.normal(size=(T, 8))
        assert fn(h, labels).item() == fn(h, other).item(), name
    record_property("detail", f"{int(mask.sum())}/{T} masked; zero gradient and label-invariance off the mask")


# ------------------------------------------------------------------ 5


@pytest.fixture(scope="module")
def duration_setup():
    corpus = make_corpus(SyntheticSpec())
    runs = [span_runs(u.alignment) for u in corpus.train]
    return corpus, runs, estimate_duration_model_from_runs(runs, 0.98, corpus.lexicon.inventory)


@pytest.mark.criterion(5)
def test_upsampler_length_distribution(duration_setup, record_property):
    corpus, _, model = duration_setup
    rng = np.random.default_rng(0)
    worst = 0.0
    for ph in corpus.lexicon.inventory:
        up = upsample([ph] * 10**5, model, rng)
        counts = Counter(e - s for s, e in up.spans)
        dist = model.distribution(ph)
        support = set(counts) | set(dist)
        tv = 0.5 * sum(abs(counts.get(n, 0) / 10**5 - dist.get(n, 0.0)) for n in support)
        worst = max(worst, tv)
    record_property("detail", f"max total variation {worst:.4f} over {len(corpus.lexicon.inventory)} phonemes")
    assert worst <= 0.02


@pytest.mark.criterion(5)
def test_duration_truncation_rule(duration_setup, record_property):
    _, runs, model = duration_setup
    raw: dict[str, Counter] = {}
    for seq in runs:
        for ph, n in seq:
            raw.setdefault(ph, Counter())[n] += 1
    for ph, counts in raw.items():
        lengths = np.array(sorted(counts))
        mass = np.array([counts[n] for n in lengths], dtype=float)
        cum = np.cumsum(mass) / mass.sum()
        keep = lengths[: int(np.argmax(cum >= 0.98 - 1e-12)) + 1]
        assert sorted(model.distribution(ph)) == keep.tolist(), ph
        kept_mass = mass[: keep.size].sum()
        for n, p in model.distribution(ph).items():
            assert p == pytest.approx(counts[n] / kept_mass, abs=1e-12)
    record_property("detail", f"{len(raw)} phonemes truncated at cumulative 0.98")


@pytest.mark.criterion(5)
def test_sil_insertion_rates(duration_setup, record_property):
    corpus, _, _ = duration_setup
    rng = np.random.default_rng(0)
    ends_ok, interior, boundaries, n = 0, 0, 0, 0
    texts = [phonemize(s, corpus.lexicon) for s in corpus.text]
    while boundaries < 200_000:
        for ph in texts:
            out = insert_sil(ph, 0.25, rng)
            n += 1
            ends_ok += out[0] == SIL and out[-1] == SIL
            interior += out.count(SIL) - 2
            boundaries += len(ph.boundaries)
    rate = interior / boundaries
    record_property("detail", f"ends {ends_ok}/{n}, interior rate {rate:.4f} over {boundaries} boundaries")
    assert ends_ok == n
    assert abs(rate - 0.25) <= 0.005


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6)
def test_swap_invariants(record_property):
    rng = np.random.default_rng(0)
    phones = ["SIL", "A", "B", "C", "D"]
    swapped = 0
    for _ in range(10**4):
        lengths = rng.integers(1, 8, size=int(rng.integers(1, 15)))
        ends = np.cumsum(lengths)
        ali = Alignment.from_tuples([(phones[int(rng.integers(5))], e - n, e) for n, e in zip(lengths, ends)])
        mask = sample_mask(ali.frames, MaskSpec(float(rng.uniform(0, 0.3)), int(rng.integers(1, 12))), rng)
        plan = plan_swap(ali, mask, float(rng.uniform()), rng)
        assert not plan.from_text[mask].any()
        speech, text = rng.normal(size=(ali.frames, 4)), rng.normal(size=(ali.frames, 4))
        mixed = swap_representations(speech, text, plan)
        assert np.array_equal(mixed[~plan.from_text], speech[~plan.from_text])
        assert np.array_equal(mixed[plan.from_text], text[plan.from_text])
        swapped += int(plan.from_text.sum())
        none = np.zeros(ali.frames, bool)
        assert np.array_equal(swap_representations(speech, text, plan_swap(ali, none, 0.0, rng)), speech)
        assert np.array_equal(swap_representations(speech, text, plan_swap(ali, none, 1.0, rng)), text)
    record_property("detail", f"10^4 instances, {swapped} swapped frames, none masked")


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7)
def test_kmeans_properties(record_property):
    rng = np.random.default_rng(0)
    for _ in range(30):
        x = rng.normal(size=(int(rng.integers(20, 80)), 3))
        h = np.array(kmeans_fit(x, int(rng.integers(1, 8)), 50, rng).inertia_history)
        assert np.all(np.diff(h) <= 0.0)
    pts = rng.normal(size=(6, 3))
    x = np.concatenate([pts, pts[rng.integers(0, 6, 50)]])
    assert kmeans_fit(x, 6, 50, rng).inertia_history[-1] == 0.0

    corpus = make_corpus(SyntheticSpec(noise=0.0))
    feats = {u.utt_id: u.features for u in corpus.train}
    _, labels = fit_labels(feats, len(corpus.lexicon.inventory), np.random.default_rng(0))
    keys = sorted(feats)
    truth = np.concatenate([corpus.lexicon.ids(frame_phonemes(corpus.alignments[k])) for k in keys])
    got = np.concatenate([labels[k] for k in keys])
    pairs = set(zip(got.tolist(), truth.tolist()))
    record_property("detail", f"{len(pairs)} label/phoneme pairs for {len(set(truth.tolist()))} phonemes")
    assert len(pairs) == len(set(got.tolist())) == len(set(truth.tolist()))


# ------------------------------------------------------------------ 8, 9


@pytest.fixture(scope="module")
def toy_runs():
    corpus = make_corpus(SyntheticSpec())
    runs = {}
    for seed in SEEDS:
        runs[("paired", seed)] = run_toy(seed, corpus=corpus)
        runs[("unpaired", seed)] = run_toy(seed, corpus=corpus, overrides=["train.paired_hours=0"])
    return runs


@pytest.fixture(scope="module")
def finetuned(toy_runs):
    out = {}
    for seed in SEEDS:
        run = toy_runs[("paired", seed)]
        out[("pretrained_head", seed)] = finetune_wer(run, use_char_head=True, use_char_layer=True)[:2]
        out[("fresh_head", seed)] = finetune_wer(run, use_char_head=False, use_char_layer=True)[:2]
    return out


@pytest.mark.criterion("8a")
def test_pretraining_halves_combined_loss(toy_runs, record_property):
    ratios = [toy_runs[("paired", s)].loss_ratio() for s in SEEDS]
    med = float(np.median(ratios))
    record_property("detail", f"loss after/before per seed {', '.join(f'{r:.3f}' for r in ratios)}; median {med:.3f}")
    assert med <= 0.5


@pytest.mark.criterion("8b")
def test_finetune_fits_training_set(finetuned, record_property):
    train_wer = finetuned[("pretrained_head", 0)][0]
    record_property("detail", f"greedy train WER {train_wer:.3f} (seed 0)")
    assert train_wer == 0.0


@pytest.mark.criterion("8c")
@pytest.mark.xfail(strict=True, reason="no text-to-speech transfer at toy scale; see decisions ledger")
def test_pretrained_head_not_worse_on_heldout(finetuned, record_property):
    pre = [finetuned[("pretrained_head", s)][1] for s in SEEDS]
    fresh = [finetuned[("fresh_head", s)][1] for s in SEEDS]
    record_property(
        "detail",
        f"held-out WER median pre-trained head {np.median(pre):.3f} vs fresh {np.median(fresh):.3f} "
        f"(per seed {', '.join(f'{a:.2f}/{b:.2f}' for a, b in zip(pre, fresh))})",
    )
    assert np.median(pre) <= np.median(fresh)


def _gains(toy_runs, kind):
    out = []
    for s in SEEDS:
        run = toy_runs[(kind, s)]
        out.append(alignment_score(run.model, run.corpus) - alignment_score(run.initial, run.corpus))
    return out


@pytest.mark.criterion("9a")
def test_alignment_gain_with_paired_data(toy_runs, record_property):
    gains = _gains(toy_runs, "paired")
    record_property("detail", f"diagonal-dominance gain per seed {', '.join(f'{g:+.4f}' for g in gains)}")
    assert all(g > 0 for g in gains)


@pytest.mark.criterion("9b")
@pytest.mark.xfail(strict=True, reason="relative-position structure alone raises dominance; see decisions ledger")
def test_no_alignment_gain_without_paired_data(toy_runs, record_property):
    gains = _gains(toy_runs, "unpaired")
    paired = _gains(toy_runs, "paired")
    record_property(
        "detail",
        f"gain without paired data {', '.join(f'{g:+.4f}' for g in gains)} "
        f"(with paired {', '.join(f'{g:+.4f}' for g in paired)})",
    )
    assert all(g <= 0 for g in gains)


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10)
def test_beam_equals_exhaustive(record_property):
    rng = np.random.default_rng(0)
    symbols = ("<b>", "a", "b")
    cfg = DecodeConfig(beam=64)
    n = 0
    for T in range(1, 5):
        for _ in range(250):
            lp = log_softmax_np(rng.normal(size=(T, 3)) * rng.uniform(0.5, 4))
            beam = beam_decode(lp, None, cfg, symbols)
            full = exhaustive_decode(lp, None, cfg, symbols)
            assert beam.tokens == full.tokens
            assert beam.score == pytest.approx(full.score, abs=1e-9)
            n += 1
    record_property("detail", f"{n} instances identical")


@pytest.mark.criterion(10)
def test_length_weight_flips_ranking(record_property):
    symbols = ("<b>", "a", "b")
    lp = np.log(np.array([[0.05, 0.9, 0.05], [0.5, 0.1, 0.4]]))
    p_a = 0.9 * 0.5 + 0.9 * 0.1 + 0.05 * 0.1
    p_ab = 0.9 * 0.4
    for w2, winner in ((0.0, (1,)), (2.0, (1, 2))):
        cfg = DecodeConfig(beam=8, length_weight=w2)
        sa = score_hypothesis(lp, (1,), None, cfg, symbols)
        sab = score_hypothesis(lp, (1, 2), None, cfg, symbols)
        assert abs(sa - (math.log(p_a) + w2 * 1)) < 1e-12
        assert abs(sab - (math.log(p_ab) + w2 * 2)) < 1e-12
        assert beam_decode(lp, None, cfg, symbols).tokens == winner
    record_property("detail", f"w2=0 picks 'a' ({math.log(p_a):.3f} > {math.log(p_ab):.3f}); w2=2 picks 'ab'")


# ------------------------------------------------------------------ 11


@pytest.mark.criterion(11)
def test_schedules_at_boundaries(record_property):
    peak = 5e-4
    for warm, total in ((32, 400), (50, 500), (0, 10)):
        assert lr_linear(0, warm, total, peak) == (0.0 if warm else peak)
        assert lr_linear(warm, warm, total, peak) == peak
        assert lr_linear(total, warm, total, peak) == 0.0
        mid = (warm + total) // 2
        assert lr_linear(mid, warm, total, peak) == peak * (total - mid) / (total - warm)
        if warm:
            assert lr_linear(warm // 2, warm, total, peak) == peak * (warm // 2) / warm
    total, floor = 1000, 0.05
    w, h = 100, 500
    assert lr_tristage(0, total, peak, (0.1, 0.4, 0.5), floor) == 0.0
    assert lr_tristage(w // 2, total, peak, (0.1, 0.4, 0.5), floor) == peak * (w // 2) / w
    assert lr_tristage(w, total, peak, (0.1, 0.4, 0.5), floor) == peak
    assert lr_tristage(h, total, peak, (0.1, 0.4, 0.5), floor) == peak
    frac = (750 - h) / (total - h)
    assert lr_tristage(750, total, peak, (0.1, 0.4, 0.5), floor) == peak * (1 - frac) + floor * peak * frac
    assert lr_tristage(total, total, peak, (0.1, 0.4, 0.5), floor) == floor * peak
    record_property("detail", "linear and tri-stage exact at every boundary")


@pytest.mark.criterion(11)
def test_ctc_logged_from_start_step(toy_runs, record_property):
    run = toy_runs[("paired", 0)]
    start = run.config.train.ctc_start_step
    steps = [int(line.split("\t")[0]) for line in run.state.log if line.split("\t")[1] == "text:ctc"]
    record_property("detail", f"first text:ctc at step {min(steps)} (start {start}), {len(steps)} entries")
    assert steps and min(steps) >= start
    assert any(int(line.split("\t")[0]) < start and "text:mlm" in line for line in run.state.log)
