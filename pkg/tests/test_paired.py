import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointspeech.compute import Tensor
from jointspeech.masking import MaskSpec, sample_mask
from jointspeech.paired import (
    Alignment,
    AlignmentError,
    frame_phonemes,
    plan_swap,
    read_alignments,
    span_runs,
    swap_representations,
    write_alignments,
)


@st.composite
def alignments(draw):
    lengths = draw(st.lists(st.integers(1, 6), min_size=1, max_size=12))
    phones = draw(st.lists(st.sampled_from(["SIL", "A", "B", "C"]), min_size=len(lengths), max_size=len(lengths)))
    spans, cur = [], 0
    for p, n in zip(phones, lengths):
        spans.append((p, cur, cur + n))
        cur += n
    return Alignment.from_tuples(spans)


def test_alignment_rejects_gap_and_overlap():
    with pytest.raises(AlignmentError, match="gap"):
        Alignment.from_tuples([("A", 0, 2), ("B", 3, 4)])
    with pytest.raises(AlignmentError, match="overlap"):
        Alignment.from_tuples([("A", 0, 2), ("B", 1, 4)])
    with pytest.raises(AlignmentError):
        Alignment.from_tuples([("A", 0, 0)])


def test_from_frames_and_runs():
    ali = Alignment.from_frames(["A", "A", "B", "A"])
    assert span_runs(ali) == [("A", 2), ("B", 1), ("A", 1)]
    assert frame_phonemes(ali) == ["A", "A", "B", "A"]


@given(alignments(), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_swap_invariants(ali, p, seed):
    rng = np.random.default_rng(seed)
    mask = sample_mask(ali.frames, MaskSpec(0.2, 3), rng)
    plan = plan_swap(ali, mask, p, rng)
    assert not plan.from_text[mask].any()
    covered = np.zeros(ali.frames, bool)
    for i in plan.selected:
        sp = ali.spans[i]
        covered[sp.start : sp.end] = True
    np.testing.assert_array_equal(covered, plan.from_text)
    speech = rng.normal(size=(ali.frames, 3))
    text = rng.normal(size=(ali.frames, 3))
    mixed = swap_representations(speech, text, plan)
    assert np.array_equal(mixed[~plan.from_text], speech[~plan.from_text])
    assert np.array_equal(mixed[plan.from_text], text[plan.from_text])


@given(alignments(), st.integers(0, 2**32 - 1))
def test_swap_probability_extremes(ali, seed):
    rng = np.random.default_rng(seed)
    speech, text = rng.normal(size=(ali.frames, 2)), rng.normal(size=(ali.frames, 2))
    none = np.zeros(ali.frames, bool)
    assert np.array_equal(swap_representations(speech, text, plan_swap(ali, none, 0.0, rng)), speech)
    assert np.array_equal(swap_representations(speech, text, plan_swap(ali, none, 1.0, rng)), text)


def test_swap_tensor_path_matches_numpy():
    ali = Alignment.from_tuples([("A", 0, 2), ("B", 2, 5)])
    plan = plan_swap(ali, np.zeros(5, bool), 1.0, np.random.default_rng(0))
    s, t = np.zeros((5, 2)), np.ones((5, 2))
    np.testing.assert_array_equal(swap_representations(Tensor(s), Tensor(t), plan).data, t)


def test_swap_shape_errors():
    ali = Alignment.from_tuples([("A", 0, 3)])
    with pytest.raises(AlignmentError):
        plan_swap(ali, np.zeros(4, bool), 0.5, np.random.default_rng(0))
    plan = plan_swap(ali, np.zeros(3, bool), 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        swap_representations(np.zeros((3, 2)), np.zeros((4, 2)), plan)


def test_alignment_file_roundtrip(tmp_path):
    alis = {"u1": Alignment.from_tuples([("SIL", 0, 2), ("A", 2, 3)]), "u0": Alignment.from_tuples([("B", 0, 1)])}
    write_alignments(tmp_path / "a.tsv", alis)
    assert read_alignments(tmp_path / "a.tsv") == alis


def test_alignment_file_reports_utterance(tmp_path):
    (tmp_path / "a.tsv").write_text("u1\tA\t0\t2\nu1\tB\t3\t4\n")
    with pytest.raises(AlignmentError, match="u1"):
        read_alignments(tmp_path / "a.tsv")
