import json

import numpy as np
import pytest

from jointspeech.cli import main
from jointspeech.labeler import write_wav

TINY = [
    "model.model_dim=8", "model.inner_dim=16", "model.heads=2", "model.layers_speech=1", "model.layers_text=1",
    "model.layers_shared=2", "model.conv_pos_kernel=3", "model.conv_pos_groups=2", "model.codeword_count=8",
    "train.steps=6", "train.warmup_steps=2", "train.ctc_start_step=3", "finetune.steps=3", "decode.beam=4",
]  # fmt: skip


def run(*argv):
    sets = [a for s in TINY for a in ("--set", s)]
    return main([*argv, *sets])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(root / "c"), "--utterances", "6", "--heldout", "2", "--text", "20", "--seed", "2"]) == 0
    return root


def test_full_pipeline(corpus, capsys):
    c, w = corpus / "c", corpus / "work"
    assert run("labels", "--manifest", str(c / "train.tsv"), "--clusters", "8", "--out-dir", str(w)) == 0
    assert run("duration-model", "--alignments", str(c / "alignments.tsv"), "--lexicon", str(c / "lexicon.tsv"), "--out-dir", str(w)) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["within_limit"] is True
    assert run("upsample", "--text", str(c / "text.txt"), "--lexicon", str(c / "lexicon.tsv"), "--durations", str(w / "durations.txt"), "--out-dir", str(w)) == 0
    assert len((w / "upsampled.txt").read_text().splitlines()) == 20
    assert run(
        "pretrain", "--manifest", str(c / "train.tsv"), "--labels", str(w / "labels.txt"), "--lexicon", str(c / "lexicon.tsv"),
        "--text", str(c / "text.txt"), "--alignments", str(c / "alignments.tsv"), "--out-dir", str(w),
    ) == 0  # fmt: skip
    log = (w / "train.log").read_text().splitlines()
    assert all(int(line.split("\t")[0]) >= 3 for line in log if "text:ctc" in line)
    assert "train.steps = 6" in (w / "config.txt").read_text()
    assert run("relabel", "--checkpoint", str(w / "pretrained.ckpt"), "--manifest", str(c / "train.tsv"), "--clusters", "8", "--out-dir", str(w / "it2")) == 0
    assert run("finetune", "--checkpoint", str(w / "pretrained.ckpt"), "--manifest", str(c / "train.tsv"), "--out-dir", str(w)) == 0
    assert run("lm", "--text", str(c / "text.txt"), "--out-dir", str(w)) == 0
    assert run("decode", "--checkpoint", str(w / "finetuned.ckpt"), "--manifest", str(c / "heldout.tsv"), "--lm", str(w / "lm.arpa"),
               "--set", "decode.lm_weight=0.5", "--out-dir", str(w)) == 0  # fmt: skip
    assert len((w / "hyps.txt").read_text().splitlines()) == 2
    capsys.readouterr()
    assert run("score", "--hyps", str(w / "hyps.txt"), "--manifest", str(c / "heldout.tsv")) == 0
    assert capsys.readouterr().out.startswith("WER ")
    assert run("diagnose", "--checkpoint", str(w / "pretrained.ckpt"), "--manifest", str(c / "heldout.tsv"),
               "--alignments", str(c / "alignments.tsv"), "--lexicon", str(c / "lexicon.tsv"), "--out-dir", str(w / "diag")) == 0  # fmt: skip
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(summary) == {"private(layer1)", "shared_mid(layer2)", "shared_out(layer3)"}
    assert (w / "diag" / "heatmap_layer2.pgm").exists() and (w / "diag" / "projection_layer3.csv").exists()


def test_features_from_wavs(tmp_path):
    rng = np.random.default_rng(0)
    write_wav(tmp_path / "a.wav", 0.1 * rng.normal(size=8000), 16000)
    (tmp_path / "wavs.tsv").write_text("a\ta.wav\tHELLO\n")
    assert main(["features", "--wavs", str(tmp_path / "wavs.tsv"), "--out-dir", str(tmp_path / "o")]) == 0
    line = (tmp_path / "o" / "manifest.tsv").read_text().strip().split("\t")
    assert line[0] == "a" and int(line[2]) == 48 and line[3] == "HELLO"


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 5


def test_unknown_config_key_exits_2(corpus, capsys):
    assert main(["labels", "--manifest", str(corpus / "c" / "train.tsv"), "--set", "train.bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_file_exits_1(tmp_path, capsys):
    assert main(["labels", "--manifest", str(tmp_path / "none.tsv"), "--out-dir", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_score_missing_hypothesis_exits_1(corpus, tmp_path):
    (tmp_path / "h.txt").write_text("")
    assert main(["score", "--hyps", str(tmp_path / "h.txt"), "--manifest", str(corpus / "c" / "heldout.tsv")]) == 1


def test_bad_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
