"""Print the middle-convolution comparison and the layer table for every variant.

    python3 scripts/audit_tables.py [--input-size 224] [--res-conv-kernel 2]
"""

import argparse

from opticnet.audit import count_parameters, estimate_flops, layer_table, middle_conv_report
from opticnet.model import VARIANT_REPEATS, ModelConfig, OpticNet


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--input-size", type=int, default=224)
    ap.add_argument("--res-conv-kernel", type=int, default=2)
    args = ap.parse_args()

    print(middle_conv_report())
    summary = []
    for variant in sorted(VARIANT_REPEATS):
        cfg = ModelConfig.from_variant(variant, input_size=args.input_size,
                                       res_conv_kernel=args.res_conv_kernel)
        model = OpticNet(cfg)
        print(f"\n== {variant} ==")
        print(layer_table(model))
        shape = (1, args.input_size, args.input_size, 3)
        summary.append((variant, count_parameters(model).weights, estimate_flops(model, shape)))

    print(f"\n{'variant':<12}{'weights':>14}{'GFLOPs':>10}")
    for v, w, fl in summary:
        print(f"{v:<12}{w:>14,d}{fl / 1e9:>10.2f}")


if __name__ == "__main__":
    main()
