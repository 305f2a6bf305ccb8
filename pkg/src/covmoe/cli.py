"""``covmoe train|fed-sim|ablate|eval --config <path> [--axis] [--checkpoint] [--out]``.

Exit codes: 0 ok, 2 config or input, 3 protocol, 4 checkpoint. Failures
print one JSON object ``{"error": kind, "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import experiment as ex
from .config import ExperimentConfig, load_config
from .datahub import ConfigError, IngestError
from .evalkit import ABLATION_AXES, HarnessError, evaluate, run_ablation
from .fedsim import ProtocolError, communication_report, cold_start_adapt, personalized_routing, privacy_audit
from .records import CheckpointError, SchemaError, write_archive, decode_message
from .trainer import TrainingError

log = logging.getLogger("covmoe")

EXIT_OK, EXIT_INPUT, EXIT_PROTOCOL, EXIT_CHECKPOINT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Run:
    """Output directory bookkeeping: every artifact goes through ``write``."""

    def __init__(self, out: Path, cfg: ExperimentConfig, command: str):
        self.out, self.cfg, self.command = out, cfg, command
        out.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}
        self.t0 = time.perf_counter()
        self.started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.write("resolved_config.json", cfg.to_json() + "\n")

    def write(self, name: str, data: str | bytes) -> None:
        raw = data.encode() if isinstance(data, str) else data
        (self.out / name).write_bytes(raw)
        self.files[name] = hashlib.sha256(raw).hexdigest()

    def finish(self, fingerprints: dict | None = None) -> None:
        inputs = {p: hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in self.cfg.data.csv_paths}
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "inputs": inputs,
            "fingerprints": fingerprints or {},
            "artifacts": dict(sorted(self.files.items())),
            "started": self.started,
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(_dump(manifest))


def _prepare(args) -> tuple[ExperimentConfig, list]:
    cfg = load_config(args.config)
    for item in args.set or ():
        key, _, val = item.partition("=")
        try:
            value = json.loads(val)
        except ValueError:
            value = val
        tree: dict = {}
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
        cfg = cfg.with_overrides(**tree)
    frames = ex.load_frames(cfg)
    return ex.resolve(cfg, frames), frames


def cmd_train(args) -> int:
    cfg, frames = _prepare(args)
    data = ex.central_data(cfg, frames)
    run = Run(Path(args.out), cfg, "train")
    model, report = ex.build_and_train(cfg, data)
    metrics = evaluate(model, data.test, data.scalers, cfg.eval.strategy, m=cfg.eval.m, seed=cfg.seed)
    run.write("train_report.json", report.to_json() + "\n")
    run.write("loss_trace.csv", report.loss_csv())
    run.write("metrics.json", metrics.to_json() + "\n")
    n = model.cfg.moe.M + model.cfg.moe.C
    labels = [f"routed{i}" for i in range(model.cfg.moe.M)] + [f"conditional{j}" for j in range(model.cfg.moe.C)]
    run.write("utilization.json", _dump(dict(zip(labels, report.utilization[:n]))))
    run.write("checkpoint.bin", ex.save_checkpoint(model, cfg))
    run.finish(model.fingerprints())
    print(json.dumps({"mase": metrics.mase, "wql": metrics.wql, "steps": report.steps}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    cfg, frames = _prepare(args)
    try:
        buf = Path(args.checkpoint).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    model = ex.load_checkpoint(buf, cfg)
    data = ex.central_data(cfg, frames)
    metrics = evaluate(model, data.test, data.scalers, cfg.eval.strategy, m=cfg.eval.m, seed=cfg.seed)
    run = Run(Path(args.out), cfg, "eval")
    run.write("metrics.json", metrics.to_json() + "\n")
    run.finish(model.fingerprints())
    print(json.dumps({"mase": metrics.mase, "wql": metrics.wql}))
    return EXIT_OK


def cmd_fed_sim(args) -> int:
    cfg, frames = _prepare(args)
    fed = ex.federation(cfg, frames)
    run = Run(Path(args.out), cfg, "fed-sim")
    fed.train_clients()
    fed.upload()
    fed.build_pool()
    gate_rep = fed.train_gate()
    fed.deploy()
    deployed = fed.evaluate()
    per_client = {}
    for c in fed.clients:
        row = {"deployed": deployed[c.client_id].summary(), "local_train_loss": c.report.train_loss}
        if cfg.fed.cold_start_budget:
            budget = min(cfg.fed.cold_start_budget, len(c.partition.train))
            res = cold_start_adapt(fed, c, budget, cfg.fed.cold_start_rank)
            row["cold_start"] = {"budget": budget, "before": res.pre.summary(),
                                 "after": res.post.summary() if res.post else None,
                                 "val_loss_before": res.pre_val_loss, "val_loss_after": res.post_val_loss}
        if cfg.fed.personalized:
            row["personalized"] = personalized_routing(fed, c).summary()
        per_client[c.client_id] = row
    audit = privacy_audit(fed.archive, {c.client_id: c.raw_grams for c in fed.clients})
    comm = communication_report(fed.ledger, fed.tokenizer, fed.backbone)
    run.write("ledger.csv", fed.ledger.to_csv())
    archive = run.out / "archive.bin"
    write_archive([decode_message(b) for b in fed.archive], archive)
    run.files["archive.bin"] = hashlib.sha256(archive.read_bytes()).hexdigest()
    run.write("comm_report.json", _dump(comm))
    run.write("privacy_audit.json", _dump({"verdict": "PASS" if audit.passed else "FAIL", "findings": audit.findings}))
    run.write("metrics.json", _dump(per_client))
    run.write("fed_report.json", _dump({"gate_val_loss": fed.server.val_trace, "gate_train_loss": gate_rep.train_loss,
                                        "pool_size": len(fed.server.pool), "messages": len(fed.ledger)}))
    run.finish({"tokenizer": fed.tokenizer.fingerprint(), "backbone": fed.backbone.fingerprint,
                **{f"pool:{e.expert_id}": e.fingerprint() for e in fed.server.pool}})
    print(json.dumps({"messages": len(fed.ledger), "bytes": comm["moe_bytes"],
                      "reduction": comm["reduction_fraction"], "audit": "PASS" if audit.passed else "FAIL"}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    axes = ABLATION_AXES if args.axis == "all" else (args.axis,)
    for a in axes:
        if a not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {a!r}; choose from {', '.join(ABLATION_AXES)} or all")
    cfg, frames = _prepare(args)
    data = ex.central_data(cfg, frames)
    run = Run(Path(args.out), cfg, "ablate")
    fit = ex.make_fit(cfg, data)
    for a in axes:
        table = run_ablation(a, fit, seed=cfg.seed)
        run.write(f"ablation_{a}.csv", table.to_csv())
        run.write(f"ablation_{a}.json", table.to_json() + "\n")
        print(table.to_csv(), end="")
    run.finish()
    return EXIT_OK


COMMANDS = {"train": cmd_train, "fed-sim": cmd_fed_sim, "ablate": cmd_ablate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covmoe", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--axis", default="all")
    ap.add_argument("--checkpoint")
    ap.add_argument("--out", default="runs/latest")
    ap.add_argument("--set", action="append", metavar="KEY=JSON", help="override a config key, e.g. fed.concurrent=true")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, IngestError):
        return CliError("ingest", str(exc), EXIT_INPUT)
    if isinstance(exc, ConfigError):
        return CliError("config", str(exc), EXIT_INPUT)
    if isinstance(exc, ProtocolError):
        return CliError("protocol", str(exc), EXIT_PROTOCOL)
    if isinstance(exc, CheckpointError):
        return CliError("checkpoint", str(exc), EXIT_CHECKPOINT)
    if isinstance(exc, SchemaError):
        return CliError("schema", str(exc), EXIT_PROTOCOL)
    if isinstance(exc, TrainingError):
        return CliError("training", str(exc), EXIT_INPUT)
    if isinstance(exc, HarnessError):
        return CliError("harness", str(exc), EXIT_INPUT)
    if isinstance(exc, OSError):
        return CliError("io", str(exc), EXIT_INPUT)
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        err = _classify(exc)
        sys.stderr.write(json.dumps({"error": err.kind, "message": str(err)}) + "\n")
        return err.code


if __name__ == "__main__":
    sys.exit(main())
