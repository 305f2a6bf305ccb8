"""Tokenizer -> covariate-aware MoE -> frozen backbone, as one bundle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import DEFAULT_LEVELS, BackboneParams, backbone_forward, build_frozen_backbone
from .cov_smoe import CovSelectorRule, MoEConfig, MoELayer, RouteInputs, Routing, moe_param_count
from .datahub import Window
from .numkit import GradTape, Rng, Tensor
from .tokenizer import TokenizerParams, embed_covariates, tokenize


@dataclass(frozen=True)
class ModelConfig:
    d: int = 2
    p: int = 11
    T_c: int = 48
    H: int = 4
    levels: tuple[float, ...] = DEFAULT_LEVELS
    moe: MoEConfig = field(default_factory=MoEConfig)
    selector_mode: str = "region"
    bucket_hours: int = 6
    seed: int = 0
    backbone_seed: int = 42

    def n_params(self, scope: str = "moe-only") -> int:
        return count_params(self, scope)


def count_params(cfg: ModelConfig, scope: str = "moe-only") -> int:
    """Exact parameter count. ``moe-only``: gate, priors, experts (with any
    low-rank factors). ``full-model`` adds tokenizer and backbone."""
    m = cfg.moe
    moe = moe_param_count(m)
    if scope == "moe-only":
        return moe
    if scope != "full-model":
        raise ValueError(f"unknown scope {scope!r}")
    tok = cfg.d * m.h + m.h + cfg.p * m.h_z + m.h_z
    nq = len(cfg.levels)
    bb = m.h * m.h + m.h * cfg.H * nq + cfg.H * nq
    return moe + tok + bb


def default_rule(cfg: ModelConfig) -> CovSelectorRule | None:
    m = cfg.moe
    if not m.has_conditional:
        return None
    n = m.M if m.conditional_from_routed else m.C
    if cfg.selector_mode == "hour-bucket":
        buckets = -(-24 // cfg.bucket_hours)
        return CovSelectorRule("hour-bucket", tuple((b, b % n) for b in range(buckets)), cfg.bucket_hours)
    return CovSelectorRule.identity(n, "region")


@dataclass(eq=False)
class CovMoEModel:
    cfg: ModelConfig
    tokenizer: TokenizerParams
    layer: MoELayer
    backbone: BackboneParams

    @classmethod
    def build(cls, cfg: ModelConfig, rule: CovSelectorRule | None = None,
              tokenizer: TokenizerParams | None = None,
              backbone: BackboneParams | None = None) -> "CovMoEModel":
        rng = Rng(cfg.seed, "model")
        tok = tokenizer or TokenizerParams.init(cfg.d, cfg.p, cfg.moe.h, cfg.moe.h_z, rng.child("tokenizer"))
        layer = MoELayer.init(cfg.moe, rng.child("moe"), rule or default_rule(cfg))
        bb = backbone or build_frozen_backbone(cfg.backbone_seed, cfg.moe.h, cfg.H, cfg.levels)
        return cls(cfg, tok, layer, bb)

    @property
    def levels(self) -> np.ndarray:
        return np.asarray(self.backbone.levels)

    def fingerprints(self) -> dict[str, str]:
        out = {"tokenizer": self.tokenizer.fingerprint(), "backbone": self.backbone.compute_fingerprint(),
               "gate": self.layer.gate.fingerprint()}
        out.update({f"expert:{k}": v for k, v in self.layer.expert_fingerprints().items()})
        return out

    def route_inputs(self, windows: Sequence[Window], tape: GradTape) -> tuple[np.ndarray, RouteInputs]:
        ctx = np.concatenate([w.context for w in windows], axis=0)
        cov = np.concatenate([w.context_cov for w in windows], axis=0)
        cov = np.where(np.isfinite(cov), cov, 0.0)
        L = windows[0].context.shape[0]
        usable = np.repeat([w.covariates_usable() for w in windows], L)
        region = np.repeat([w.static_region for w in windows], L).astype(np.int64)
        hour = np.concatenate([
            w.context_hours if len(w.context_hours) == L else np.zeros(L, dtype=np.int64) for w in windows
        ]).astype(np.int64)
        hours_since_epoch = np.array([w.origin.astype("datetime64[h]").astype(np.int64) for w in windows], dtype=np.int64)
        keys = (np.repeat(np.array([w.region_code for w in windows], dtype=np.uint64) << np.uint64(48), L)
                ^ (np.repeat(hours_since_epoch.astype(np.uint64), L) << np.uint64(10))
                ^ np.tile(np.arange(L, dtype=np.uint64), len(windows)))
        emb = embed_covariates(self.tokenizer, cov, tape)
        return ctx, RouteInputs(emb, region, hour, usable, keys)

    def forward(self, windows: Sequence[Window], tape: GradTape, strategy: str = "softmax-topk",
                forced: Routing | None = None, seed: int = 0) -> tuple[Tensor, Routing]:
        ctx, inp = self.route_inputs(windows, tape)
        tokens = tokenize(self.tokenizer, ctx, tape)
        mixed, routing = self.layer.forward(tokens, inp, tape, strategy, forced, seed)
        cube = backbone_forward(self.backbone, mixed, len(windows), tape)
        return cube, routing

    def predict(self, windows: Sequence[Window], strategy: str = "softmax-topk", seed: int = 0,
                batch_size: int = 64) -> tuple[np.ndarray, list[Routing]]:
        tape = GradTape(enabled=False)
        cubes, routings = [], []
        for i in range(0, len(windows), batch_size):
            cube, routing = self.forward(windows[i:i + batch_size], tape, strategy, seed=seed)
            cubes.append(cube.value)
            routings.append(routing)
        return np.concatenate(cubes, axis=0), routings
