"""One-shot federation on a config, printing per-client MASE for each sharing strategy.

    python scripts/run_federation.py --config configs/desk.json
"""

import argparse

from covmoe.config import load_config
from covmoe.evalkit import evaluate
from covmoe.experiment import federation, load_frames, resolve
from covmoe.fedsim import cold_start_adapt, communication_report, personalized_routing, privacy_audit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--budget", type=int, help="cold-start windows (default: from config)")
    args = ap.parse_args()

    cfg = load_config(args.config)
    frames = load_frames(cfg)
    cfg = resolve(cfg, frames)
    fed = federation(cfg, frames)
    fed.train_clients()
    fed.upload()
    fed.build_pool()
    fed.train_gate()
    fed.deploy()
    deployed = fed.evaluate()
    budget = cfg.fed.cold_start_budget if args.budget is None else args.budget

    print(f"{'client':<10} {'local':>8} {'pool+gate':>10} {'cold-start':>11} {'personal':>9}")
    for c in fed.clients:
        local = evaluate(c.model, c.partition.test, c.scaler).mase
        cs = cold_start_adapt(fed, c, min(budget, len(c.partition.train)), cfg.fed.cold_start_rank)
        cold = (cs.post or cs.pre).mase
        pers = personalized_routing(fed, c).mase
        print(f"{c.client_id:<10} {local:>8.4f} {deployed[c.client_id].mase:>10.4f} {cold:>11.4f} {pers:>9.4f}")

    comm = communication_report(fed.ledger, fed.tokenizer, fed.backbone)
    audit = privacy_audit(fed.archive, {c.client_id: c.raw_grams for c in fed.clients})
    print(f"\nmessages {comm['messages']}, bytes {comm['moe_bytes']}, "
          f"full fine-tune {comm['full_finetune_bytes']}, reduction {comm['reduction_fraction']:.1%}")
    print(f"gate val loss {fed.server.val_trace[0]:.4f} -> {fed.server.val_trace[-1]:.4f}")
    print("privacy audit", "PASS" if audit.passed else "FAIL")


if __name__ == "__main__":
    main()
