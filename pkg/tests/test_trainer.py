import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointspeech.compute import Tensor
from jointspeech.config import load_config
from jointspeech.encoder import Model
from jointspeech.experiment import toy_data
from jointspeech.synthetic import SyntheticSpec, make_corpus
from jointspeech.trainer import (
    Adam,
    NonFiniteLoss,
    UnsupportedAlignment,
    _apply,
    check_text_mask,
    char_sequences,
    evaluate_pretrain,
    finetune,
    lr_linear,
    lr_tristage,
    new_state,
    pack_by_frames,
    paired_batch_loss,
    pretrain,
    schedule_tasks,
    select_paired,
    transcribe,
)

TINY = [
    "model.model_dim=8", "model.inner_dim=16", "model.heads=2", "model.layers_speech=1", "model.layers_text=1",
    "model.layers_shared=1", "model.conv_pos_kernel=3", "model.conv_pos_groups=2", "label.clusters_iter1=8",
    "model.codeword_count=8", "train.steps=12", "train.warmup_steps=3", "train.ctc_start_step=6",
]  # fmt: skip


@pytest.fixture(scope="module")
def tiny():
    cfg = load_config(None, TINY)
    corpus = make_corpus(SyntheticSpec(n_train=6, n_heldout=2, n_text=20, seed=1))
    return cfg, corpus, toy_data(corpus, cfg, 0)


def test_lr_linear_shape():
    assert lr_linear(0, 10, 100, 1.0) == 0.0
    assert lr_linear(5, 10, 100, 1.0) == 0.5
    assert lr_linear(10, 10, 100, 1.0) == 1.0
    assert lr_linear(55, 10, 100, 1.0) == 0.5
    assert lr_linear(100, 10, 100, 1.0) == 0.0


@given(st.integers(0, 400))
def test_lr_tristage_bounds(step):
    lr = lr_tristage(step, 300, 2.0, (0.1, 0.4, 0.5), 0.05)
    assert 0.0 <= lr <= 2.0
    if step >= 30:
        assert lr >= 0.1


def test_adam_first_step_is_sign_times_lr():
    p = {"w": Tensor(np.array([1.0, -1.0, 0.5]))}
    opt = Adam(p, eps=0.0, clip=0.0)
    opt.step({"w": np.array([3.0, -0.2, 1e-3])}, 0.1)
    np.testing.assert_allclose(p["w"].data, [0.9, -0.9, 0.4])


def test_adam_clips_global_norm():
    p = {"a": Tensor(np.zeros(1)), "b": Tensor(np.zeros(1))}
    opt = Adam(p, clip=1.0)
    assert opt.step({"a": np.array([3.0]), "b": np.array([4.0])}, 0.1) == pytest.approx(5.0)
    np.testing.assert_allclose(opt.m["a"], 0.1 * 0.6)


def test_adam_skips_missing_gradients():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    Adam(p).step({"a": np.ones(2)}, 0.1)
    assert np.array_equal(p["b"].data, np.ones(2))


@given(st.lists(st.integers(1, 50), min_size=1, max_size=20), st.integers(1, 80))
def test_pack_by_frames_budget(lengths, budget):
    batches = pack_by_frames(lengths, range(len(lengths)), budget)
    assert [i for b in batches for i in b] == list(range(len(lengths)))
    for b in batches:
        assert len(b) == 1 or sum(lengths[i] for i in b) <= budget


@given(st.integers(0, 2**32 - 1))
def test_schedule_is_single_task_and_complete(seed):
    sp, pr = [30, 40, 50, 60, 70], [30, 40]
    epoch = schedule_tasks(sp, 10, pr, 100, np.random.default_rng(seed))
    speech = sorted(i for b in epoch if b.task == "speech" for i in b.items)
    paired = sorted(i for b in epoch if b.task == "paired" for i in b.items)
    assert speech == list(range(5)) and paired == [0, 1]
    assert sum(b.task == "text" for b in epoch) == sum(b.task == "speech" for b in epoch)


def test_select_paired_fraction(tiny):
    _, _, data = tiny
    assert select_paired(data.paired, 100) == sorted(data.paired, key=lambda i: i.utt_id)
    assert select_paired(data.paired, 0) == []
    assert len(select_paired(data.paired, 50)) == 3


def test_text_mask_must_cover_durations(tiny):
    cfg, _, data = tiny
    with pytest.raises(ValueError, match="shorter"):
        check_text_mask(cfg.with_overrides(["mask.text_span=1"]), data.durations)


def test_ctc_logged_only_after_start(tiny):
    cfg, _, data = tiny
    state = pretrain(data, cfg)
    assert state.step == 12
    ctc_steps = [int(line.split("\t")[0]) for line in state.log if line.split("\t")[1] == "text:ctc"]
    assert ctc_steps and min(ctc_steps) >= 6
    assert any(line.split("\t")[1] == "paired:hubert" for line in state.log)


def test_pretrain_is_reproducible(tiny):
    cfg, _, data = tiny
    a, b = pretrain(data, cfg), pretrain(data, cfg)
    assert a.log == b.log


def test_no_paired_task_when_disabled(tiny):
    cfg, _, data = tiny
    state = pretrain(data, cfg.with_overrides(["train.paired_hours=0"]))
    assert not any("paired:" in line for line in state.log)
    assert "paired:hubert" not in evaluate_pretrain(state.model, data, cfg.with_overrides(["train.paired_hours=0"]))


def test_ce_alignment_mode(tiny):
    cfg, _, data = tiny
    cfg = cfg.with_overrides(["train.align_fn=ce_loss"])
    losses = evaluate_pretrain(Model.init(cfg.model, np.random.default_rng(0)), data, cfg)
    assert "paired:ce" in losses and losses["paired:ce"] > 0


def test_cross_attention_is_refused(tiny):
    cfg, _, data = tiny
    cfg = cfg.with_overrides(["train.align_fn=cross_attention"])
    with pytest.raises(UnsupportedAlignment):
        paired_batch_loss(Model.init(cfg.model, np.random.default_rng(0)), data.paired[:1], data, cfg, np.random.default_rng(0))


def test_nonfinite_loss_dumps(tiny, tmp_path):
    cfg, _, _ = tiny
    state = new_state(Model.init(cfg.model, np.random.default_rng(0)), cfg.train, 0)
    with pytest.raises(NonFiniteLoss) as info:
        _apply(state, "speech", {"hubert": Tensor(np.nan)}, 0.1, ["u1"], tmp_path)
    dump = json.loads((tmp_path / "nonfinite_step0.json").read_text())
    assert dump["items"] == ["u1"] and info.value.dump["task"] == "speech"


def test_finetune_and_transcribe(tiny):
    cfg, corpus, data = tiny
    model = Model.init(cfg.model, np.random.default_rng(0))
    ft = replace(cfg.finetune, steps=4, freeze_steps=2)
    before = {k: v.data.copy() for k, v in model.params.items()}
    state = finetune(model, data.speech, ft)
    assert len(state.log) == 4
    # the input model is untouched
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)
    text = transcribe(state.model, corpus.train[0].features)
    assert isinstance(text, str)


def test_fresh_head_is_reinitialised(tiny):
    cfg, _, data = tiny
    model = Model.init(cfg.model, np.random.default_rng(0))
    ft = replace(cfg.finetune, steps=1, use_char_head=False, peak_lr=1e-12)
    out = finetune(model, data.speech, ft).model
    assert not np.allclose(out.params["char.head.w"].data, model.params["char.head.w"].data)
    assert np.allclose(out.params["char.head.b"].data, 0.0, atol=1e-9)


def test_char_sequences():
    assert char_sequences(["ab c", ""]) == [["A", "B", "|", "C"]]
