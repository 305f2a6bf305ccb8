"""End-to-end pipelines shared by the CLI, the scripts and the tests."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Sequence

from .config import ExperimentConfig
from .cov_smoe import CovSelectorRule, ExpertParams, GateParams, MoELayer
from .datahub import (
    ConfigError, CsvSchema, Scaler, SeriesFrame, Window, derive_calendar_covariates, load_csv, normalize,
    split_frames, synthetic_frames,
)
from .evalkit import PerturbSpec, evaluate, perturb
from .fedsim import Federation, setup_clients
from .model import CovMoEModel
from .backbone import BackboneParams, build_frozen_backbone
from .numkit import derive_seed
from .records import (
    CheckpointError, decode_checkpoint, encode_backbone, encode_checkpoint, encode_expert, encode_gate,
    encode_tokenizer,
)
from .tokenizer import TokenizerParams
from .trainer import TrainReport, train_local


def load_frames(cfg: ExperimentConfig) -> list[SeriesFrame]:
    d = cfg.data
    if d.source == "synthetic":
        return synthetic_frames(d.n_regions, d.n_days, seed=cfg.seed, noise=d.noise)
    schema = CsvSchema(target=d.target, channels=d.channels, covariates=d.covariates)
    return [derive_calendar_covariates(load_csv(p, schema)) for p in d.csv_paths]


def resolve(cfg: ExperimentConfig, frames: Sequence[SeriesFrame]) -> ExperimentConfig:
    """Fill the model's input widths from the data and check they agree across frames."""
    d = {f.values.shape[1] for f in frames}
    p = {f.covariates.shape[1] for f in frames}
    if len(d) != 1 or len(p) != 1:
        raise ConfigError("all frames must have the same channels and covariates")
    return replace(cfg, model=replace(cfg.model, d=d.pop(), p=p.pop()))


@dataclass
class CentralData:
    train: list[Window]
    val: list[Window]
    test: list[Window]
    scalers: dict[int, Scaler]
    cov_names: tuple[str, ...]


def central_data(cfg: ExperimentConfig, frames: Sequence[SeriesFrame]) -> CentralData:
    """Per-region chronological splits, each normalised with its own train-fit scaler, then pooled."""
    parts = split_frames(frames, T_c=cfg.model.T_c, H=cfg.model.H, stride=cfg.data.stride, split=cfg.data.split)
    cov_names = frames[0].covariate_names
    train, val, test, scalers = [], [], [], {}
    for part in parts:
        if not part.train or not part.test:
            raise ConfigError(f"{part.client_id}: series too short for T_c={cfg.model.T_c}, H={cfg.model.H}")
        npart, sc = normalize(part, cov_names)
        train += npart.train + npart.public
        val += npart.val
        test += npart.test
        scalers[part.region_code] = sc
    return CentralData(train, val, test, scalers, cov_names)


def build_and_train(cfg: ExperimentConfig, data: CentralData, n_experts: int | None = None,
                    gating_strategy: str | None = None, seed: int | None = None
                    ) -> tuple[CovMoEModel, TrainReport]:
    seed = cfg.seed if seed is None else seed
    moe = cfg.model.moe
    if n_experts is not None:
        moe = replace(moe, M=n_experts, k=min(moe.k, n_experts))
    mcfg = replace(cfg.model, moe=moe, seed=derive_seed(seed, "model"))
    tcfg = replace(cfg.train, seed=derive_seed(seed, "train"),
                   gating_strategy=gating_strategy or cfg.train.gating_strategy)
    model = CovMoEModel.build(mcfg)
    report = train_local(model, data.train, tcfg, data.val)
    return model, report


def make_fit(cfg: ExperimentConfig, data: CentralData):
    """``fit`` callable for ``run_ablation``: donors for the region swap are the test windows themselves."""
    regions = sorted(data.scalers)
    swap = {r: regions[(i + 1) % len(regions)] for i, r in enumerate(regions)}

    def fit(n_experts: int | None = None, gating_strategy: str | None = None):
        model, _ = build_and_train(cfg, data, n_experts, gating_strategy)
        strategy = gating_strategy or cfg.eval.strategy
        return model, data.test, data.scalers, strategy, data.test, swap

    return fit


MISSING_LEVELS = (0.0, 0.2, 0.5, 1.0)


def robustness_study(cfg: ExperimentConfig, data: CentralData, seeds: Sequence[int],
                     levels: Sequence[float] = MISSING_LEVELS) -> dict:
    """Per seed: train, then score the test set with a growing share of covariate columns missing."""
    table = {f"{lv:g}": [] for lv in levels}
    fallback = {f"{lv:g}": [] for lv in levels}
    for s in seeds:
        model, _ = build_and_train(cfg, data, seed=s)
        for lv in levels:
            ws = data.test if lv == 0 else perturb(data.test, PerturbSpec("missing", fraction=lv, seed=s))
            rep = evaluate(model, ws, data.scalers, cfg.eval.strategy, m=cfg.eval.m, seed=s)
            table[f"{lv:g}"].append(rep.mase)
            fallback[f"{lv:g}"].append(rep.fallback_fraction)
    medians = {k: statistics.median(v) for k, v in table.items()}
    return {"seeds": list(seeds), "mase": table, "median_mase": medians, "fallback_fraction": fallback}


def federation(cfg: ExperimentConfig, frames: Sequence[SeriesFrame]) -> Federation:
    f = cfg.fed
    clients, server = setup_clients(frames, f.K, f.scheme, T_c=cfg.model.T_c, H=cfg.model.H,
                                    stride=cfg.data.stride, alpha=f.alpha, split=cfg.data.split,
                                    seed=cfg.seed)
    return Federation(clients, server, replace(f, seed=cfg.seed), cfg.model)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CovMoEModel, cfg: ExperimentConfig) -> bytes:
    layer = model.layer
    records = [encode_tokenizer(model.tokenizer), encode_backbone(model.backbone), encode_gate(layer.gate)]
    records += [encode_expert(e) for e in layer.experts()]
    rule = None if layer.rule is None else {"mode": layer.rule.mode, "table": [list(p) for p in layer.rule.table],
                                            "bucket_hours": layer.rule.bucket_hours}
    manifest = {"config_hash": cfg.hash(), "model_seed": model.cfg.seed, "moe_M": model.cfg.moe.M,
                "layer_seed": layer.seed,
                "rule": rule, "fingerprints": model.fingerprints()}
    return encode_checkpoint(manifest, records)


def load_checkpoint(buf: bytes, cfg: ExperimentConfig) -> CovMoEModel:
    """Rebuild a model; any config or fingerprint mismatch raises ``CheckpointError``."""
    man, recs = decode_checkpoint(buf)
    if man.get("config_hash") != cfg.hash():
        raise CheckpointError("checkpoint was written under a different config")
    try:
        tok, bb, gate, *experts = recs
    except ValueError as e:
        raise CheckpointError("checkpoint is missing records") from e
    if not (isinstance(tok, TokenizerParams) and isinstance(bb, BackboneParams) and isinstance(gate, GateParams)
            and all(isinstance(e, ExpertParams) for e in experts)):
        raise CheckpointError("checkpoint records are out of order")
    mcfg = replace(cfg.model, moe=replace(cfg.model.moe, M=int(man["moe_M"]), k=min(cfg.model.moe.k, int(man["moe_M"]))),
                   seed=int(man["model_seed"]))
    ref = build_frozen_backbone(mcfg.backbone_seed, mcfg.moe.h, mcfg.H, mcfg.levels)
    if bb.fingerprint != ref.fingerprint:
        raise CheckpointError("backbone fingerprint does not match the configured frozen backbone")
    r = man.get("rule")
    rule = None if r is None else CovSelectorRule(r["mode"], tuple(tuple(p) for p in r["table"]), r["bucket_hours"])
    by_cls = {c: [e for e in experts if e.cls == c] for c in ("shared", "conditional", "routed")}
    layer = MoELayer(mcfg.moe, by_cls["shared"], by_cls["conditional"], by_cls["routed"], gate, rule,
                     seed=int(man["layer_seed"]))
    model = CovMoEModel(mcfg, tok, layer, ref)
    if model.fingerprints() != man.get("fingerprints"):
        raise CheckpointError("restored weights do not match the recorded fingerprints")
    return model


__all__ = [
    "CentralData", "MISSING_LEVELS", "build_and_train", "central_data", "federation", "load_checkpoint",
    "load_frames", "make_fit", "resolve", "robustness_study", "save_checkpoint",
]
