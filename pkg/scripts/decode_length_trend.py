"""Total generation time vs output length, vanilla against the full pipeline.

The interesting readout is the speedup column growing with length: prefill
savings dominate short outputs, cache savings dominate long ones.

Usage: python scripts/decode_length_trend.py [--n-image 2048] [--lengths 64,256,1024]
"""

import argparse
import statistics

from lightinfer import (
    CompressionConfig,
    MergeSchedule,
    ModelConfig,
    PipelineConfig,
    build_input,
    generate,
    init_model,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-image", type=int, default=1024)
    ap.add_argument("--n-layers", type=int, default=16)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--lengths", default="64,256,1024")
    ap.add_argument("--keep-ratio", type=float, default=0.35)
    ap.add_argument("--beta", type=float, default=0.08)
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args()

    model = init_model(ModelConfig(n_layers=args.n_layers, dim=args.dim, seed=0))
    seq = build_input(30, args.n_image, 50, redundancy=0.5, seed=0, dim=args.dim)
    vanilla = PipelineConfig(merging_enabled=False, compression_enabled=False)
    # the 5/9/13-of-28 stage placement, scaled to the model depth
    stages = tuple(sorted({max(1, round(f * args.n_layers)) for f in (5 / 28, 9 / 28, 13 / 28)}))
    full = PipelineConfig(
        merge_schedule=MergeSchedule(stages, args.keep_ratio),
        compression=CompressionConfig(args.beta, 0),
    )

    print("length vanilla_s full_s speedup")
    for length in (int(x) for x in args.lengths.split(",")):
        totals = {}
        for name, pipe in (("vanilla", vanilla), ("full", full)):
            runs = []
            for _ in range(args.reps):
                _, m = generate(model, seq, pipe, length)
                runs.append((m.prefill_ms + sum(m.decode_ms_per_token)) / 1e3)
            totals[name] = statistics.median(runs)
        print(f"{length} {totals['vanilla']:.2f} {totals['full']:.2f} "
              f"{totals['vanilla'] / totals['full']:.2f}x")


if __name__ == "__main__":
    main()
