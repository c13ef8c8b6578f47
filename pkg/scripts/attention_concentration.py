"""How many image tokens carry most of the attention mass, layer by layer.

Prefills once per redundancy level and prints, for each layer, the number
of image tokens needed to cover 90/95/99% of the head-averaged cumulative
attention over image tokens (the same signal the merge stages use).

Usage: python scripts/attention_concentration.py [--n-image 512]
"""

import argparse

from lightinfer import (
    ModelConfig,
    PipelineConfig,
    attention_mass_curve,
    build_input,
    init_model,
    prefill,
)

THRESHOLDS = (0.90, 0.95, 0.99)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-image", type=int, default=512)
    ap.add_argument("--n-layers", type=int, default=12)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--redundancy", type=float, nargs="*", default=[0.0, 0.9])
    args = ap.parse_args()

    model = init_model(ModelConfig(n_layers=args.n_layers, dim=args.dim, seed=0))
    disabled = PipelineConfig(merging_enabled=False, compression_enabled=False)

    for red in args.redundancy:
        seq = build_input(16, args.n_image, 24, redundancy=red, seed=0, dim=args.dim)
        pre = prefill(model, seq, disabled)
        print(f"redundancy={red}")
        print("layer " + " ".join(f"k@{int(t * 100)}%" for t in THRESHOLDS))
        for li, scores in enumerate(pre.image_importance_per_layer):
            ks = attention_mass_curve(scores, THRESHOLDS)
            cells = " ".join(f"{k}/{scores.size}" for k in ks)
            print(f"{li} {cells}")


if __name__ == "__main__":
    main()
