"""Command-line entry point: ``jointspeech <command> [options]``.

Every command accepts ``--config FILE``, repeated ``--set key=value``
overrides (last one wins), ``--seed`` and ``--out-dir``. Exit status is 0 on
success, 2 for usage or configuration errors and 1 for data errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config
from .decode import corpus_wer, read_arpa, read_hypotheses, train_ngram, write_arpa, write_hypotheses
from .diagnostics import (
    aggregate_heatmaps,
    diagnostic_layers,
    diagonal_dominance,
    model_heatmaps,
    model_projection,
    write_heatmap_csv,
    write_pgm,
    write_projection_csv,
)
from .encoder import Model, load_checkpoint, save_checkpoint
from .experiment import gradient_checks
from .labeler import (
    ManifestEntry,
    compute_mfcc,
    fit_labels,
    read_labels,
    read_manifest,
    read_wav,
    relabel_from_hidden,
    write_codebook,
    write_features,
    write_labels,
    write_manifest,
)
from .paired import frame_phonemes, read_alignments, span_runs
from .synthetic import SyntheticSpec, make_corpus, write_corpus
from .textpipe import (
    duration_report,
    estimate_duration_model_from_runs,
    read_corpus,
    read_duration_model,
    read_lexicon,
    prepare_text,
    write_duration_model,
)
from .trainer import PretrainData, SpeechItem, char_sequences, finetune, pretrain, transcribe


class DataError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("."))


def _speech_items(manifest: Path, labels: Path | None = None, alignments: Path | None = None) -> list[SpeechItem]:
    labs = read_labels(labels) if labels else {}
    alis = read_alignments(alignments) if alignments else {}
    items = []
    for e in read_manifest(manifest):
        if labels and e.utt_id not in labs:
            raise DataError(f"no labels for {e.utt_id}")
        feats = e.load()
        if labels and labs[e.utt_id].size != feats.shape[0]:
            raise DataError(f"{e.utt_id}: {labs[e.utt_id].size} labels for {feats.shape[0]} frames")
        items.append(SpeechItem(e.utt_id, feats, labs.get(e.utt_id), alis.get(e.utt_id), e.transcript))
    return items


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg) -> None:
    spec = SyntheticSpec(n_train=args.utterances, n_heldout=args.heldout, n_text=args.text, noise=args.noise, seed=args.seed)
    out = write_corpus(make_corpus(spec), args.out_dir)
    print(f"wrote synthetic corpus to {out}")


def cmd_features(args, cfg) -> None:
    feats_dir = args.out_dir / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for line in args.wavs.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        cols = line.split("\t")
        wav = Path(cols[1]) if Path(cols[1]).is_absolute() else args.wavs.parent / cols[1]
        samples, rate = read_wav(wav)
        mfcc = compute_mfcc(samples, rate)
        path = feats_dir / f"{cols[0]}.feat"
        write_features(path, mfcc)
        entries.append(ManifestEntry(cols[0], path, mfcc.shape[0], cols[2] if len(cols) > 2 else None))
    write_manifest(args.out_dir / "manifest.tsv", entries)
    print(f"{len(entries)} utterances -> {args.out_dir / 'manifest.tsv'}")


def cmd_labels(args, cfg) -> None:
    feats = {e.utt_id: e.load() for e in read_manifest(args.manifest)}
    k = args.clusters or cfg.label.clusters_iter1
    book, labels = fit_labels(feats, k, np.random.default_rng(args.seed), cfg.label.kmeans_iters)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_labels(args.out_dir / "labels.txt", labels)
    write_codebook(args.out_dir / "codebook.feat", book)
    print(f"k={k} inertia {book.inertia_history[0]:.4g} -> {book.inertia_history[-1]:.4g}")


def cmd_relabel(args, cfg) -> None:
    model, _, _ = load_checkpoint(args.checkpoint)
    feats = {e.utt_id: e.load() for e in read_manifest(args.manifest)}
    layer = None if cfg.label.layer < 0 else cfg.label.layer
    k = args.clusters or cfg.label.clusters_iter2
    book, labels = relabel_from_hidden(model, feats, layer, k, np.random.default_rng(args.seed), cfg.label.kmeans_iters)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_labels(args.out_dir / "labels.txt", labels)
    write_codebook(args.out_dir / "codebook.feat", book)
    print(f"k={k} from layer {model.config.layers_speech if layer is None else layer}")


def cmd_duration_model(args, cfg) -> None:
    alignments = read_alignments(args.alignments)
    inventory = read_lexicon(args.lexicon).inventory if args.lexicon else ()
    model = estimate_duration_model_from_runs([span_runs(a) for a in alignments.values()], cfg.text.cutoff, inventory)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_duration_model(model, args.out_dir / "durations.txt")
    report = duration_report(model, cfg.text.max_repeat_report)
    report["fallback"] = sorted(model.fallback)
    print(json.dumps(report, sort_keys=True))


def cmd_upsample(args, cfg) -> None:
    lexicon = read_lexicon(args.lexicon)
    durations = read_duration_model(args.durations)
    rng = np.random.default_rng(args.seed)
    lines = []
    for sentence in read_corpus(args.text):
        up = prepare_text(sentence, lexicon, durations, rng, cfg.text.sil_rate, cfg.text.oov)
        lines.append(" ".join(up.frames))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "upsampled.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{len(lines)} sentences -> {args.out_dir / 'upsampled.txt'}")


def cmd_pretrain(args, cfg) -> None:
    lexicon = read_lexicon(args.lexicon)
    speech = _speech_items(args.manifest, args.labels, args.alignments)
    paired = [i for i in speech if i.alignment is not None]
    if args.durations:
        durations = read_duration_model(args.durations)
    elif paired:
        durations = estimate_duration_model_from_runs([span_runs(i.alignment) for i in paired], cfg.text.cutoff, lexicon.inventory)
    else:
        raise DataError("need --durations or --alignments to up-sample text")
    data = PretrainData(speech, read_corpus(args.text) if args.text else [], lexicon, durations, paired)
    model = load_checkpoint(args.init)[0] if args.init else None
    if model is not None and model.config != cfg.model:
        cfg = cfg.with_overrides({f"model.{k}": v for k, v in vars(model.config).items()})
    args.out_dir.mkdir(parents=True, exist_ok=True)
    state = pretrain(data, cfg, model, dump_dir=args.out_dir)
    save_checkpoint(args.out_dir / "pretrained.ckpt", state.model, {"stage": "pretrain", "steps": state.step})
    (args.out_dir / "train.log").write_text("\n".join(state.log) + "\n", encoding="utf-8")
    (args.out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(f"{state.step} steps ({state.skipped} without a loss) -> {args.out_dir / 'pretrained.ckpt'}")


def cmd_finetune(args, cfg) -> None:
    model, _, _ = load_checkpoint(args.checkpoint)
    items = _speech_items(args.manifest)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    state = finetune(model, items, cfg.finetune, dump_dir=args.out_dir)
    meta = {"stage": "finetune", "use_char_layer": cfg.finetune.use_char_layer, "use_char_head": cfg.finetune.use_char_head}
    save_checkpoint(args.out_dir / "finetuned.ckpt", state.model, meta)
    (args.out_dir / "finetune.log").write_text("\n".join(state.log) + "\n", encoding="utf-8")
    print(f"{state.step} steps -> {args.out_dir / 'finetuned.ckpt'}")


def cmd_lm(args, cfg) -> None:
    lm = train_ngram(char_sequences(read_corpus(args.text)), cfg.decode.lm_order, eos=cfg.decode.lm_eos)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_arpa(lm, args.out_dir / "lm.arpa")
    print(f"order {lm.order} -> {args.out_dir / 'lm.arpa'}")


def cmd_decode(args, cfg) -> None:
    model, meta, _ = load_checkpoint(args.checkpoint)
    lm = read_arpa(args.lm) if args.lm else None
    use_char_layer = bool(meta.get("use_char_layer", cfg.finetune.use_char_layer))
    hyps = {}
    for e in read_manifest(args.manifest):
        hyps[e.utt_id] = transcribe(model, e.load(), use_char_layer, cfg.decode, lm)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_hypotheses(args.out_dir / "hyps.txt", hyps)
    print(f"{len(hyps)} hypotheses -> {args.out_dir / 'hyps.txt'}")


def cmd_score(args, cfg) -> None:
    hyps = read_hypotheses(args.hyps)
    pairs = []
    for e in read_manifest(args.manifest):
        if e.transcript is None:
            raise DataError(f"{e.utt_id} has no reference transcript")
        if e.utt_id not in hyps:
            raise DataError(f"no hypothesis for {e.utt_id}")
        pairs.append((hyps[e.utt_id], e.transcript))
    print(f"WER {100.0 * corpus_wer(pairs):.2f} over {len(pairs)} utterances")


def cmd_diagnose(args, cfg) -> None:
    model, _, _ = load_checkpoint(args.checkpoint) if args.checkpoint else (Model.init(cfg.model, np.random.default_rng(args.seed)), {}, {})
    lexicon = read_lexicon(args.lexicon)
    alignments = read_alignments(args.alignments)
    pairs = []
    for e in read_manifest(args.manifest):
        if e.utt_id in alignments:
            pairs.append((e.utt_id, e.load(), lexicon.ids(frame_phonemes(alignments[e.utt_id]))))
    if not pairs:
        raise DataError("no manifest utterance has an alignment")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    shape = (cfg.diag.out_rows, cfg.diag.out_cols)
    summary = {}
    for name, layer in diagnostic_layers(model.config).items():
        agg = aggregate_heatmaps(model_heatmaps(model, pairs, layer), shape)
        write_heatmap_csv(args.out_dir / f"heatmap_layer{layer}.csv", agg)
        write_pgm(args.out_dir / f"heatmap_layer{layer}.pgm", agg)
        coords, labels = model_projection(model, pairs, layer)
        write_projection_csv(args.out_dir / f"projection_layer{layer}.csv", coords, labels)
        summary[f"{name}(layer{layer})"] = round(diagonal_dominance(agg, cfg.diag.band), 6)
    print(json.dumps(summary, sort_keys=True))


def cmd_gradcheck(args, cfg) -> None:
    failed = False
    for name, report in gradient_checks(args.seed).items():
        status = "ok" if report.passed else "FAIL"
        failed |= not report.passed
        print(f"{name:20s} max rel error {report.worst():.3e}  {status}")
    if failed:
        raise DataError("gradient check failed")


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointspeech", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a seeded synthetic corpus")
    p.add_argument("--utterances", type=int, default=20)
    p.add_argument("--heldout", type=int, default=40)
    p.add_argument("--text", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.3)

    p = add("features", cmd_features, "MFCC features from a wav list (utt_id<TAB>wav[<TAB>transcript])")
    p.add_argument("--wavs", type=Path, required=True)

    p = add("labels", cmd_labels, "first-iteration k-means labels on MFCC features")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--clusters", type=int)

    p = add("relabel", cmd_relabel, "second-iteration labels from a speech-encoder layer")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--clusters", type=int)

    p = add("duration-model", cmd_duration_model, "phoneme duration statistics from alignments")
    p.add_argument("--alignments", type=Path, required=True)
    p.add_argument("--lexicon", type=Path)

    p = add("upsample", cmd_upsample, "phonemize and up-sample a text corpus")
    p.add_argument("--text", type=Path, required=True)
    p.add_argument("--lexicon", type=Path, required=True)
    p.add_argument("--durations", type=Path, required=True)

    p = add("pretrain", cmd_pretrain, "joint speech/text/paired pre-training")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--lexicon", type=Path, required=True)
    p.add_argument("--text", type=Path)
    p.add_argument("--alignments", type=Path)
    p.add_argument("--durations", type=Path)
    p.add_argument("--init", type=Path, help="continue from a checkpoint (second iteration)")

    p = add("finetune", cmd_finetune, "CTC fine-tuning on transcribed speech")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)

    p = add("lm", cmd_lm, "character n-gram LM in ARPA format")
    p.add_argument("--text", type=Path, required=True)

    p = add("decode", cmd_decode, "transcribe a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--lm", type=Path)

    p = add("score", cmd_score, "WER of hypotheses against manifest transcripts")
    p.add_argument("--hyps", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)

    p = add("diagnose", cmd_diagnose, "speech/text similarity heat maps and projections")
    p.add_argument("--checkpoint", type=Path, help="omit to diagnose an untrained model")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--alignments", type=Path, required=True)
    p.add_argument("--lexicon", type=Path, required=True)

    add("gradcheck", cmd_gradcheck, "finite-difference check of losses and encoder")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
