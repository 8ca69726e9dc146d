"""Aggregated speech/text similarity maps before and after toy pre-training, as PGM + CSV."""

import argparse
from pathlib import Path

from jointspeech.diagnostics import aggregate_heatmaps, diagnostic_layers, diagonal_dominance, model_heatmaps, write_heatmap_csv, write_pgm
from jointspeech.experiment import heldout_pairs, run_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out-dir", type=Path, default=Path("alignment_maps"))
    args = ap.parse_args()

    run = run_toy(args.seed, overrides=args.set)
    pairs = heldout_pairs(run.corpus)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for tag, model in (("untrained", run.initial), ("trained", run.model)):
        for name, layer in diagnostic_layers(model.config).items():
            agg = aggregate_heatmaps(model_heatmaps(model, pairs, layer))
            stem = args.out_dir / f"{tag}_{name}_layer{layer}"
            write_heatmap_csv(stem.with_suffix(".csv"), agg)
            write_pgm(stem.with_suffix(".pgm"), agg)
            print(f"{tag:9s} {name:10s} layer {layer}: dominance {diagonal_dominance(agg):+.4f}")


if __name__ == "__main__":
    main()
