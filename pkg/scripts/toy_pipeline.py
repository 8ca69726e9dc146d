"""End-to-end toy run: pre-train, fine-tune with both head settings, report losses, WER and alignment."""

import argparse
import json

from jointspeech.experiment import alignment_score, finetune_wer, run_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    args = ap.parse_args()

    run = run_toy(args.seed, args.corpus_seed, args.set)
    result = {
        "loss_before": run.loss_before,
        "loss_after": run.loss_after,
        "loss_ratio": run.loss_ratio(),
        "dominance_before": alignment_score(run.initial, run.corpus),
        "dominance_after": alignment_score(run.model, run.corpus),
    }
    for name, head in (("pretrained_head", True), ("fresh_head", False)):
        train_wer, heldout_wer, _ = finetune_wer(run, use_char_head=head)
        result[name] = {"train_wer": train_wer, "heldout_wer": heldout_wer}

    if args.json:
        print(json.dumps(result, sort_keys=True))
        return
    for k in sorted(run.loss_before):
        print(f"{k:16s} {run.loss_before[k]:8.4f} -> {run.loss_after[k]:8.4f}")
    print(f"combined loss ratio {result['loss_ratio']:.3f}")
    print(f"diagonal dominance {result['dominance_before']:+.4f} -> {result['dominance_after']:+.4f}")
    for name in ("pretrained_head", "fresh_head"):
        r = result[name]
        print(f"{name:16s} train WER {r['train_wer']:.3f}  held-out WER {r['heldout_wer']:.3f}")


if __name__ == "__main__":
    main()
