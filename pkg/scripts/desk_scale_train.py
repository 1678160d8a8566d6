"""Train OpticNet-47 at 64x64 on the seeded synthetic 4-class set and report steps to 95% train accuracy.

    python3 scripts/desk_scale_train.py --seed 0 --steps 300 --out runs/desk
"""

import argparse
import logging

from opticnet.data import make_synthetic
from opticnet.model import ModelConfig, assemble_model
from opticnet.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = make_synthetic(4, 16, args.size, seed=args.seed)
    cfg = ModelConfig.from_variant("opticnet47", classes=4, input_size=args.size)
    model = assemble_model(cfg, seed=args.seed)
    tc = TrainConfig(seed=args.seed, max_steps=args.steps, epochs=10_000, stop_at_train_acc=args.target)
    res = train(model, ds, tc, run_dir=args.out)

    hit = next((r for r in res.rows if r["train_acc"] >= args.target), None)
    print(f"steps {res.steps}  epochs {len(res.rows)}  best train acc {res.best_train_acc:.3f}  "
          f"{res.seconds:.1f}s")
    if hit is None:
        print(f"target {args.target:.0%} NOT reached within {args.steps} steps")
        raise SystemExit(1)
    print(f"target {args.target:.0%} reached at epoch {hit['epoch']}")


if __name__ == "__main__":
    main()
