"""Serial ablation grid on the toy corpus; one JSON line per (setting, seed).

    python3 scripts/ablation.py --seeds 0 1 2 --out ablation.jsonl
"""

import argparse
import json
import time

import numpy as np

from jointspeech.experiment import alignment_score, finetune_wer, run_toy
from jointspeech.synthetic import SyntheticSpec, make_corpus

SETTINGS = {
    "full": [],
    "no_paired": ["train.paired_hours=0"],
    "half_paired": ["train.paired_hours=50"],
    "ce_loss": ["train.align_fn=ce_loss"],
    "no_mlm": ["train.use_mlm=false"],
    "no_text_ctc": ["train.use_ctc=false"],
    "masked_only_paired_loss": ["paired.swapped_loss=false"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--settings", nargs="+", default=list(SETTINGS), choices=list(SETTINGS))
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--finetune", action="store_true", help="also fine-tune and report held-out WER")
    ap.add_argument("--out", help="append JSON lines here as well as to stdout")
    args = ap.parse_args()

    corpus = make_corpus(SyntheticSpec(seed=args.corpus_seed))
    summary: dict[str, list[float]] = {}
    for name in args.settings:
        for seed in args.seeds:
            t0 = time.perf_counter()
            run = run_toy(seed, overrides=SETTINGS[name], corpus=corpus)
            row = {
                "setting": name,
                "seed": seed,
                "loss_ratio": run.loss_ratio(),
                "dominance_gain": alignment_score(run.model, corpus) - alignment_score(run.initial, corpus),
            }
            if args.finetune:
                row["heldout_wer"] = finetune_wer(run)[1]
            row["seconds"] = round(time.perf_counter() - t0, 1)
            line = json.dumps(row, sort_keys=True)
            print(line, flush=True)
            if args.out:
                with open(args.out, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            summary.setdefault(name, []).append(row["dominance_gain"])
    for name, gains in summary.items():
        print(f"# {name:24s} median dominance gain {np.median(gains):+.4f}")


if __name__ == "__main__":
    main()
