"""Ablation sweeps mirroring the study tables: prototype granularity,
blend coefficient, loss variant, mining mode, and CAM weighting.

Each sweep trains one run per (value, seed) through the library's ablate
helper and leaves a CSV table per parameter under the output directory.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from advcp.trainer import TrainConfig, ablate  # noqa: E402

SWEEPS = {
    "granularity": ["image", "batch", "frozen_global", "online_global"],
    "lambda": ["0.0", "0.25", "0.5", "0.75", "1.0"],
    "loss_variant": ["center_accumulated", "consistency", "contrastive"],
    "mask_mode": ["xor", "diff"],
    "cam_mode": ["weights", "gradients"],
    "alpha": ["0.0", "0.1", "0.5", "1.0", "2.0"],
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--sweep", choices=sorted(SWEEPS), action="append",
                        help="sweep to run (repeatable; default: all)")
    parser.add_argument("--seeds", default="1,2,3")
    parser.add_argument("--iters", type=int, default=1500)
    parser.add_argument("--lr", type=float, default=0.05)
    parser.add_argument("--widths", default="8,16,32")
    parser.add_argument("--eval-every", type=int, default=300)
    args = parser.parse_args(argv)

    widths = tuple(int(w) for w in args.widths.split(",") if w)
    config = TrainConfig(total_iters=args.iters, lr=args.lr, widths=widths,
                         eval_every=args.eval_every).validate()
    seeds = [int(s) for s in args.seeds.split(",") if s]
    for param in (args.sweep or sorted(SWEEPS)):
        out = args.out / param
        print(f"== sweep {param} -> {out}")
        rows = ablate(config, args.data, out, param, SWEEPS[param], seeds)
        for row in rows:
            if row["seed"] in ("mean", "std"):
                print(f"{param}={row['value']:>18} {row['seed']:>4} "
                      f"f1={row['f1'] * 100:6.2f}% iou={row['iou'] * 100:6.2f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
