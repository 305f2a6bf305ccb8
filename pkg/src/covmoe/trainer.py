"""Pinball loss, optimisers and the local training loop."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backbone import QuantileForecast
from .datahub import Window
from .model import CovMoEModel
from .numkit import GradTape, NumericError, Rng, Tensor

SCOPES = ("moe-only", "moe+tokenizer", "gate-only", "lowrank+gate")


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 5
    max_steps: int | None = None
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    trainable_scope: str = "moe-only"
    gating_strategy: str = "softmax-topk"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.trainable_scope not in SCOPES:
            raise ValueError(f"unknown trainable scope {self.trainable_scope!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)  # per epoch
    val_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    utilization: list[int] = field(default_factory=list)
    steps: int = 0
    wall_clock: float = 0.0
    metrics: dict = field(default_factory=dict)

    def to_json(self, include_timing: bool = False) -> str:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return json.dumps(d, indent=2, sort_keys=True)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss"])
        for i, v in enumerate(self.train_loss):
            w.writerow([i, "train", repr(v)])
        for i, v in enumerate(self.val_loss):
            w.writerow([i, "val", repr(v)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# losses


def pinball_loss(forecast: QuantileForecast, target) -> float:
    """Mean over (step, level) of the quantile (pinball) loss."""
    y = np.asarray(target, dtype=np.float64)
    q = np.asarray(forecast.levels, dtype=np.float64)
    v = np.asarray(forecast.values, dtype=np.float64)
    if v.shape != (len(y), len(q)):
        raise ValueError(f"forecast {v.shape} vs target {y.shape} and {len(q)} levels")
    if np.isnan(y).any() or np.isnan(v).any():
        raise NumericError("NaN in pinball loss input")
    diff = y[:, None] - v
    return float(np.mean(np.maximum(q * diff, (q - 1.0) * diff)))


def batch_loss(model: CovMoEModel, windows: Sequence[Window], tape: GradTape, strategy: str,
               forced=None, seed: int = 0):
    cube, routing = model.forward(windows, tape, strategy, forced, seed)
    target = np.stack([w.target_future for w in windows])
    return tape.pinball(cube, target, model.levels), routing


def eval_loss(model: CovMoEModel, windows: Sequence[Window], strategy: str = "softmax-topk",
              seed: int = 0, batch_size: int = 64) -> float:
    if not windows:
        return float("nan")
    tape = GradTape(enabled=False)
    total = 0.0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        loss, _ = batch_loss(model, chunk, tape, strategy, seed=seed)
        total += float(loss.value) * len(chunk)
    return total / len(windows)


# ---------------------------------------------------------------------------
# parameters and optimisers


def set_scope(model: CovMoEModel, scope: str) -> list[Tensor]:
    """Mark tensors trainable per ``scope`` and return them (stable order)."""
    layer = model.layer
    for t in model.tokenizer.tensors():
        t.requires_grad = scope == "moe+tokenizer"
    for t in model.backbone.tensors():
        t.requires_grad = False
    layer.gate.set_trainable(True)
    for e in layer.experts():
        for t in e.tensors():
            if scope == "gate-only":
                t.requires_grad = False
            elif scope == "lowrank+gate":
                t.requires_grad = e.lowrank is not None and t in e.factors()
            else:
                # with low-rank factors attached only the factors train
                t.requires_grad = e.lowrank is None or t in e.factors()
    params = model.layer.tensors() + model.tokenizer.tensors()
    return [t for t in params if t.requires_grad]


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params, self.lr = list(params), lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            p.value = p.value - self.lr * p.grad


class Adam:
    """Adam with per-tensor step counts; a tensor without a gradient is left alone."""

    def __init__(self, params: Sequence[Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = list(params), lr, b1, b2, eps
        self.state: dict[int, list] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            st = self.state.setdefault(id(p), [0, np.zeros_like(p.value), np.zeros_like(p.value)])
            st[0] += 1
            t, m, v = st
            m[...] = self.b1 * m + (1 - self.b1) * p.grad
            v[...] = self.b2 * v + (1 - self.b2) * p.grad * p.grad
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# loop


def train_local(model: CovMoEModel, windows: Sequence[Window], cfg: TrainConfig,
                val_windows: Sequence[Window] = ()) -> TrainReport:
    """Minibatch training of the tensors in ``cfg.trainable_scope``.

    Each step only the gate and the experts actually selected in that batch
    receive gradients, so untouched experts keep their exact parameters.
    """
    if not windows:
        raise ValueError("no training windows")
    windows = list(windows)
    params = set_scope(model, cfg.trainable_scope)
    opt = make_optimizer(params, cfg)
    rng = Rng(cfg.seed, "batches")
    n_experts = model.cfg.moe.M + model.cfg.moe.C
    util = np.zeros(n_experts, dtype=np.int64)
    rep = TrainReport()
    fp_backbone = model.backbone.fingerprint
    t0 = time.perf_counter()
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        losses, sizes = [], []
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = [windows[i] for i in order[s:s + cfg.batch_size]]
            for p in params:
                p.zero_grad()
            tape = GradTape()
            loss, routing = batch_loss(model, batch, tape, cfg.gating_strategy, seed=cfg.seed)
            lv = float(loss.value)
            if not math.isfinite(lv) or lv > 1e6:
                raise TrainingError(f"diverged (loss={lv})", epoch)
            if cfg.lr > 0 and params:
                tape.backward(loss)
                opt.step()
            util += routing.utilization(n_experts)
            losses.append(lv)
            sizes.append(len(batch))
            rep.step_loss.append(lv)
            steps += 1
        if not losses:
            break
        rep.train_loss.append(float(np.dot(losses, sizes) / np.sum(sizes)))
        if val_windows:
            rep.val_loss.append(eval_loss(model, val_windows, cfg.gating_strategy, cfg.seed))
    if model.backbone.compute_fingerprint() != fp_backbone:
        raise TrainingError("backbone weights changed during training", cfg.epochs)
    rep.steps = steps
    rep.utilization = [int(u) for u in util]
    rep.wall_clock = time.perf_counter() - t0
    return rep


def gating_strategy_forward(model: CovMoEModel, windows: Sequence[Window], strategy: str, seed: int = 0):
    """Routing decisions for ``windows`` under one gating strategy (no training)."""
    _, routing = model.forward(windows, GradTape(enabled=False), strategy, seed=seed)
    return routing
