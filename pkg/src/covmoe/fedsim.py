"""In-process one-shot federation: clients train experts locally and upload
them, the server pools them, trains a global gate on public validation data
with every expert frozen, then deploys pool + gate back to the clients.

Only ``FedMessage`` bytes cross the client/server boundary and each one is
logged in a ``CommLedger``.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import BackboneParams, build_frozen_backbone
from .cov_smoe import ROUTED, CovSelectorRule, ExpertParams, GateParams, MoELayer
from .datahub import ClientPartition, Scaler, SeriesFrame, Window, normalize, partition_clients
from .evalkit import MetricReport, evaluate
from .model import CovMoEModel, ModelConfig
from .numkit import Rng, derive_seed
from .records import (
    FedMessage, SchemaError, decode_message, encode_expert, encode_gate, float_payloads,
)
from .tokenizer import TokenizerParams
from .trainer import TrainConfig, TrainReport, eval_loss, train_local

log = logging.getLogger(__name__)

PHASES = ("init", "local-trained", "uploaded", "pool-built", "gate-trained", "deployed")
SERVER = "server"


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FedConfig:
    K: int = 3
    scheme: str = "by-region"  # or "dirichlet"
    alpha: float = 1.0
    experts_per_client: int = 1
    conditional_per_client: int = 0
    local: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-2, epochs=3, batch_size=16))
    gate: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-2, epochs=5, batch_size=16,
                                                                    trainable_scope="gate-only"))
    gate_k: int = 2
    gate_input_mode: str = "covariate-plus-token"
    deploy: str = "replace"  # or "keep-local"
    concurrent: bool = False
    cold_start_budget: int = 16
    cold_start_rank: int = 2
    personalized: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("federation needs K >= 2 clients")
        if self.deploy not in ("replace", "keep-local"):
            raise ValueError(f"unknown deploy mode {self.deploy!r}")
        if self.experts_per_client < 1:
            raise ValueError("each client trains at least one expert")


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    kind: str
    sender: str
    receiver: str
    byte_len: int


class CommLedger:
    """Append-only log of every message that crossed the boundary."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []

    def append(self, msg: FedMessage) -> None:
        self._entries.append(LedgerEntry(msg.round, msg.kind, msg.sender, msg.receiver, msg.byte_len))

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def total_bytes(self) -> int:
        return sum(e.byte_len for e in self._entries)

    def count(self, kind: str) -> int:
        return sum(e.kind == kind for e in self._entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "kind", "sender", "receiver", "bytes"])
        for e in self._entries:
            w.writerow([e.round, e.kind, e.sender, e.receiver, e.byte_len])
        return buf.getvalue()


@dataclass(eq=False)
class ClientState:
    client_id: str
    partition: ClientPartition  # normalised
    scaler: Scaler
    raw_grams: frozenset = frozenset()  # 8-grams of raw target values, for the privacy audit
    rule: CovSelectorRule | None = None
    model: CovMoEModel | None = None
    report: TrainReport | None = None
    deployed: CovMoEModel | None = None
    train_steps: int = 0

    @property
    def region_code(self) -> int:
        return self.partition.region_code


@dataclass(eq=False)
class ServerState:
    d_val: tuple[Window, ...]
    pool: list[ExpertParams] = field(default_factory=list)
    gate_model: CovMoEModel | None = None
    inbox: list[FedMessage] = field(default_factory=list)
    round: int = 0
    val_trace: list[float] = field(default_factory=list)


@dataclass(eq=False)
class Bundle:
    """What a client holds after deployment: the expert pool and the global gate."""

    experts: list[ExpertParams]
    gate: GateParams
    k: int

    def model(self, base: ModelConfig, tokenizer: TokenizerParams, backbone: BackboneParams,
              rule: CovSelectorRule | None = None, conditional: bool = False, k: int | None = None) -> CovMoEModel:
        P = len(self.experts)
        kk = self.k if k is None else k
        mcfg = replace(base.moe, S=0, C=0, M=P, k=kk, r=0, input_mode=self.gate.input_mode,
                       conditional_from_routed=conditional)
        layer = MoELayer(mcfg, [], [], self.experts, self.gate, rule)
        return CovMoEModel(replace(base, moe=mcfg), tokenizer, layer, backbone)


def raw_eight_grams(windows: Sequence[Window]) -> frozenset:
    grams = set()
    for w in windows:
        seq = np.ascontiguousarray(np.concatenate([w.history, w.target_future]), dtype="<f8")
        for i in range(len(seq) - 7):
            grams.add(seq[i:i + 8].tobytes())
    return frozenset(grams)


def setup_clients(frames: Sequence[SeriesFrame], K: int, scheme: str, *, T_c: int, H: int, stride: int,
                  alpha: float = 1.0, split=(0.6, 0.1, 0.1, 0.2), seed: int = 0
                  ) -> tuple[list[ClientState], ServerState]:
    """Partition, normalise per client, and pool every client's public slice at the server."""
    parts = partition_clients(frames, K, scheme, T_c=T_c, H=H, stride=stride, alpha=alpha, split=split, seed=seed)
    cov_names = frames[0].covariate_names
    clients, d_val = [], []
    for part in parts:
        grams = raw_eight_grams(part.all_windows())
        npart, scaler = normalize(part, cov_names)
        clients.append(ClientState(part.client_id, npart, scaler, grams))
        d_val += npart.public
    server = ServerState(tuple(d_val))
    train_keys = {w.key for c in clients for w in c.partition.train}
    if any(w.key in train_keys for w in server.d_val):
        raise ProtocolError("server validation windows overlap client training windows")
    if not server.d_val:
        raise ProtocolError("server validation set is empty")
    return clients, server


class Federation:
    """Phase-ordered protocol driver. Calling a phase out of order raises ``ProtocolError``."""

    def __init__(self, clients: Sequence[ClientState], server: ServerState, cfg: FedConfig,
                 model_cfg: ModelConfig):
        if len(clients) < 2:
            raise ProtocolError("federation needs at least two clients")
        if not server.d_val:
            raise ProtocolError("server validation set is empty")
        self.clients = list(clients)
        self.server = server
        self.cfg = cfg
        self.model_cfg = model_cfg
        rng = Rng(cfg.seed, "federation")
        self.tokenizer = TokenizerParams.init(model_cfg.d, model_cfg.p, model_cfg.moe.h, model_cfg.moe.h_z,
                                              rng.child("tokenizer"))
        self.tokenizer.set_trainable(False)
        self.backbone = build_frozen_backbone(model_cfg.backbone_seed, model_cfg.moe.h, model_cfg.H,
                                              model_cfg.levels)
        self._frozen = (self.tokenizer.fingerprint(), self.backbone.fingerprint)
        self.ledger = CommLedger()
        self.archive: list[bytes] = []
        self.phase = "init"
        self.bundle: Bundle | None = None

    # -- plumbing --------------------------------------------------------

    def _require(self, phase: str) -> None:
        if self.phase != phase:
            raise ProtocolError(f"expected phase {phase!r}, protocol is in {self.phase!r}")

    def _send(self, msg: FedMessage) -> FedMessage:
        raw = msg.to_bytes()
        self.ledger.append(msg)
        self.archive.append(raw)
        return decode_message(raw)  # the receiver only ever sees bytes

    def _check_frozen(self) -> None:
        if (self.tokenizer.fingerprint(), self.backbone.compute_fingerprint()) != self._frozen:
            raise ProtocolError("frozen tokenizer/backbone weights drifted")
        for c in self.clients:
            for m in (c.model, c.deployed):
                if m is not None and m.backbone.compute_fingerprint() != self._frozen[1]:
                    raise ProtocolError(f"{c.client_id}: backbone fingerprint mismatch")

    def local_model_config(self) -> ModelConfig:
        m = self.model_cfg.moe
        E, C = self.cfg.experts_per_client, self.cfg.conditional_per_client
        moe = replace(m, S=0, C=C, M=E, k=min(m.k, E), r=0, conditional_from_routed=False)
        return replace(self.model_cfg, moe=moe)

    # -- phases ----------------------------------------------------------

    def _train_client(self, c: ClientState) -> ClientState:
        mcfg = replace(self.local_model_config(), seed=derive_seed(self.cfg.seed, f"client/{c.client_id}"))
        rule = CovSelectorRule("region", ((c.region_code, 0),)) if mcfg.moe.C else None
        model = CovMoEModel.build(mcfg, rule=rule, tokenizer=self.tokenizer, backbone=self.backbone)
        for e in model.layer.experts():
            e.origin_client = c.client_id
        tcfg = replace(self.cfg.local, trainable_scope="moe-only")
        c.model = model
        c.report = train_local(model, c.partition.train, tcfg, c.partition.val)
        c.train_steps += c.report.steps
        c.rule = CovSelectorRule("region", ((c.region_code, 0),))
        return c

    def train_clients(self, order: Sequence[int] | None = None) -> None:
        self._require("init")
        idx = list(range(len(self.clients))) if order is None else list(order)
        if self.cfg.concurrent:
            with ThreadPoolExecutor(max_workers=len(idx)) as ex:
                list(ex.map(lambda i: self._train_client(self.clients[i]), idx))
        else:
            for i in idx:
                self._train_client(self.clients[i])
        self._check_frozen()
        self.phase = "local-trained"

    def upload(self) -> None:
        self._require("local-trained")
        for c in self.clients:
            experts = c.model.layer.conditional + c.model.layer.routed
            msg = FedMessage.build("ExpertUpload", c.client_id, SERVER, self.server.round,
                                   [encode_expert(e) for e in experts])
            self.server.inbox.append(self._send(msg))
        self.phase = "uploaded"

    def build_pool(self) -> None:
        self._require("uploaded")
        pool = []
        for msg in self.server.inbox:
            for rec in msg.records():
                if not isinstance(rec, ExpertParams):
                    raise ProtocolError(f"upload from {msg.sender} carries a non-expert record")
                rec.expert_id = len(pool)
                rec.cls = ROUTED
                if not rec.origin_client:
                    rec.origin_client = msg.sender
                pool.append(rec)
        self.server.pool = pool
        self.phase = "pool-built"

    def train_gate(self) -> TrainReport:
        self._require("pool-built")
        pool = self.server.pool
        for e in pool:
            e.freeze()
        before = [e.fingerprint(base_only=False) for e in pool]
        P = len(pool)
        mcfg = replace(self.model_cfg.moe, S=0, C=0, M=P, k=min(self.cfg.gate_k, P), r=0,
                       input_mode=self.cfg.gate_input_mode, conditional_from_routed=False)
        gate = GateParams.init(mcfg, Rng(self.cfg.seed, "global-gate"))
        layer = MoELayer(mcfg, [], [], pool, gate, None)
        model = CovMoEModel(replace(self.model_cfg, moe=mcfg), self.tokenizer, layer, self.backbone)
        d_val = list(self.server.d_val)
        init = eval_loss(model, d_val)
        tcfg = replace(self.cfg.gate, trainable_scope="gate-only")
        rep = train_local(model, d_val, tcfg, d_val)
        self.server.val_trace = [init] + rep.val_loss
        after = [e.fingerprint(base_only=False) for e in pool]
        if before != after:
            raise ProtocolError("pool expert weights changed during gate training")
        self.server.gate_model = model
        self._check_frozen()
        self.phase = "gate-trained"
        return rep

    def deploy(self) -> None:
        self._require("gate-trained")
        gm = self.server.gate_model
        records = [encode_expert(e) for e in gm.layer.routed] + [encode_gate(gm.layer.gate)]
        for c in self.clients:
            msg = self._send(FedMessage.build("DeployBundle", SERVER, c.client_id, self.server.round, records))
            recs = msg.records()
            bundle = Bundle([r for r in recs if isinstance(r, ExpertParams)],
                            next(r for r in recs if isinstance(r, GateParams)), gm.cfg.moe.k)
            for e in bundle.experts:
                e.freeze()
            c.deployed = bundle.model(self.model_cfg, self.tokenizer, self.backbone) \
                if self.cfg.deploy == "replace" else c.model
            if self.bundle is None:
                self.bundle = bundle
        self.server.round += 1
        self._check_frozen()
        self.phase = "deployed"

    def evaluate(self) -> dict[str, MetricReport]:
        self._require("deployed")
        return {c.client_id: evaluate(c.deployed, c.partition.test, c.scaler) for c in self.clients}

    def client_bundle(self, client: ClientState) -> Bundle:
        """Re-decode the bundle this client received (fresh tensors, safe to adapt)."""
        self._require("deployed")
        raw = [b for b in self.archive if decode_message(b).receiver == client.client_id][-1]
        recs = decode_message(raw).records()
        return Bundle([r for r in recs if isinstance(r, ExpertParams)],
                      next(r for r in recs if isinstance(r, GateParams)), self.bundle.k)


def run_federation(clients: Sequence[ClientState], server: ServerState, cfg: FedConfig,
                   model_cfg: ModelConfig) -> tuple[Federation, CommLedger, dict[str, MetricReport]]:
    fed = Federation(clients, server, cfg, model_cfg)
    fed.train_clients()
    fed.upload()
    fed.build_pool()
    fed.train_gate()
    fed.deploy()
    return fed, fed.ledger, fed.evaluate()


# ---------------------------------------------------------------------------
# sharing strategies


@dataclass
class AdaptResult:
    model: CovMoEModel
    pre: MetricReport
    post: MetricReport | None
    pre_val_loss: float
    post_val_loss: float | None
    report: TrainReport | None = None


def cold_start_adapt(fed: Federation, client: ClientState, budget: int, r: int = 2,
                     cfg: TrainConfig | None = None) -> AdaptResult:
    """Fine-tune the gate and rank-r expert deltas on ``budget`` local training windows."""
    if budget > len(client.partition.train):
        raise ValueError(f"budget {budget} exceeds {len(client.partition.train)} training windows")
    bundle = fed.client_bundle(client)
    model = bundle.model(fed.model_cfg, fed.tokenizer, fed.backbone)
    val = list(client.partition.val)
    pre = evaluate(model, client.partition.test, client.scaler)
    pre_val = eval_loss(model, val)
    if budget == 0:
        return AdaptResult(model, pre, None, pre_val, None)
    base_fp = [e.fingerprint() for e in model.layer.routed]
    for e in model.layer.routed:
        e.add_lowrank(r, Rng(fed.cfg.seed, f"cold-start/{client.client_id}/{e.expert_id}"))
    tcfg = replace(cfg or replace(fed.cfg.local, epochs=5), trainable_scope="lowrank+gate")
    rep = train_local(model, client.partition.train[:budget], tcfg, val)
    client.train_steps += rep.steps
    if [e.fingerprint() for e in model.layer.routed] != base_fp:
        raise ProtocolError("pool base weights changed during cold-start adaptation")
    post = evaluate(model, client.partition.test, client.scaler)
    return AdaptResult(model, pre, post, pre_val, eval_loss(model, val), rep)


def personal_rule(bundle: Bundle, client: ClientState) -> CovSelectorRule:
    own = [i for i, e in enumerate(bundle.experts) if e.origin_client == client.client_id]
    if not own:
        raise ProtocolError(f"no pool expert originates from {client.client_id}")
    return CovSelectorRule("region", ((client.region_code, own[0]),))


def personalized_model(fed: Federation, client: ClientState) -> CovMoEModel:
    bundle = fed.client_bundle(client)
    k = min(bundle.k, len(bundle.experts) - 1)
    return bundle.model(fed.model_cfg, fed.tokenizer, fed.backbone, rule=personal_rule(bundle, client),
                        conditional=True, k=k)


def personalized_routing(fed: Federation, client: ClientState) -> MetricReport:
    """Evaluate with the static covariate rule over the pool; no training step is taken."""
    steps = client.train_steps
    model = personalized_model(fed, client)
    rep = evaluate(model, client.partition.test, client.scaler, strategy="covariate-fixed")
    if client.train_steps != steps:
        raise ProtocolError("personalized routing must not train")
    return rep


# ---------------------------------------------------------------------------
# accounting and audit


def communication_report(ledger: CommLedger, tokenizer: TokenizerParams, backbone: BackboneParams) -> dict:
    """Bytes actually sent versus sending the full model (tokenizer + backbone
    on top of the same MoE payload) in every one of those messages."""
    moe = ledger.total_bytes()
    extra = 8 * (tokenizer.n_params() + backbone.n_params())
    full = moe + len(ledger) * extra
    return {
        "moe_bytes": moe,
        "full_finetune_bytes": full,
        "messages": len(ledger),
        "reduction_fraction": round(1.0 - moe / full, 4) if full else 0.0,
    }


@dataclass
class AuditResult:
    passed: bool
    findings: list[str]


def privacy_audit(archive: Sequence[bytes], client_grams: dict[str, frozenset]) -> AuditResult:
    """Strict-schema parse of every message plus an exact scan of every aligned
    run of eight parameter floats against every length-8 run of each client's
    raw target series."""
    findings = []
    grams = frozenset().union(*client_grams.values()) if client_grams else frozenset()
    for i, raw in enumerate(archive):
        try:
            msg = decode_message(raw)
            recs = msg.records()
        except SchemaError as e:
            findings.append(f"message {i}: schema violation: {e}")
            continue
        for j, rec in enumerate(recs):
            stream = np.ascontiguousarray(np.concatenate([a.reshape(-1) for a in float_payloads(rec)]), dtype="<f8")
            if len(stream) < 8:
                continue
            buf = stream.tobytes()
            for off in range(0, len(buf) - 63, 8):
                if buf[off:off + 64] in grams:
                    owners = [cid for cid, g in client_grams.items() if buf[off:off + 64] in g]
                    findings.append(f"message {i} record {j}: raw target run from {owners} at float {off // 8}")
                    break
    return AuditResult(not findings, findings)
