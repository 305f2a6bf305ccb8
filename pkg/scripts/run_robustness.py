"""Missing-covariate sweep: median test MASE per missing share, over several seeds.

    python scripts/run_robustness.py --config configs/desk.json --out runs/robustness.json
"""

import argparse
import json
from pathlib import Path

from covmoe.config import load_config
from covmoe.experiment import central_data, load_frames, resolve, robustness_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--seeds", type=int, nargs="*")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = load_config(args.config)
    frames = load_frames(cfg)
    cfg = resolve(cfg, frames)
    seeds = args.seeds if args.seeds else cfg.eval.robustness_seeds
    res = robustness_study(cfg, central_data(cfg, frames), seeds)

    print(f"{'missing':>8} {'median MASE':>12} {'fallback':>9}")
    for level, med in res["median_mase"].items():
        fb = sum(res["fallback_fraction"][level]) / len(seeds)
        print(f"{float(level):>8.0%} {med:>12.4f} {fb:>9.2f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(res, indent=2) + "\n")


if __name__ == "__main__":
    main()
