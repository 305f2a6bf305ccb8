"""Print every ablation table for a config (same tables as ``covmoe ablate``)."""

import argparse

from covmoe.config import load_config
from covmoe.evalkit import ABLATION_AXES, run_ablation
from covmoe.experiment import central_data, load_frames, make_fit, resolve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--axis", choices=ABLATION_AXES, nargs="*")
    args = ap.parse_args()

    cfg = load_config(args.config)
    frames = load_frames(cfg)
    cfg = resolve(cfg, frames)
    fit = make_fit(cfg, central_data(cfg, frames))
    for axis in args.axis or ABLATION_AXES:
        table = run_ablation(axis, fit, seed=cfg.seed)
        print(f"# {axis}")
        print(table.to_csv())


if __name__ == "__main__":
    main()
