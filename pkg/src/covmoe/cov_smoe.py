"""Covariate-aware sparse mixture-of-experts layer.

Three expert classes share one layer:

* shared experts run on every token and are averaged with weight 1/S;
* one conditional expert per token is picked deterministically from a
  static covariate (region code or hour bucket) by a ``CovSelectorRule``;
* ``k`` routed experts are picked per token by top-k over gate scores.

The conditional and routed outputs are mixed by a softmax restricted to the
selected set, and the layer output is ``h_t + shared + mixture``. Unselected
routed experts are never evaluated, so they receive no gradient.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numkit import GradTape, Rng, ShapeError, Tensor, const, fingerprint

SHARED, CONDITIONAL, ROUTED = "shared", "conditional", "routed"
EXPERT_CLASSES = (SHARED, CONDITIONAL, ROUTED)
STRATEGIES = ("softmax-topk", "covariate-fixed", "random")


class RoutingError(LookupError):
    pass


@dataclass(frozen=True)
class MoEConfig:
    h: int = 32
    h_z: int = 16
    h_ff: int = 32
    S: int = 1
    C: int = 3
    M: int = 4
    k: int = 2
    r: int = 0
    fallback: str = "uniform"  # or "learned-prior"
    input_mode: str = "covariate-only"  # or "covariate-plus-token"
    # conditional index points into the routed pool instead of a separate set
    conditional_from_routed: bool = False

    def __post_init__(self):
        if not 1 <= self.k <= self.M:
            raise ValueError(f"need 1 <= k <= M, got k={self.k}, M={self.M}")
        if self.conditional_from_routed and self.k >= self.M:
            raise ValueError("conditional_from_routed needs k < M")
        if self.fallback not in ("uniform", "learned-prior"):
            raise ValueError(f"unknown fallback {self.fallback!r}")
        if self.input_mode not in ("covariate-only", "covariate-plus-token"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if min(self.S, self.C, self.r) < 0:
            raise ValueError("expert counts and rank must be non-negative")

    @property
    def gate_in(self) -> int:
        return self.h_z + (self.h if self.input_mode == "covariate-plus-token" else 0)

    @property
    def has_conditional(self) -> bool:
        return self.C > 0 or self.conditional_from_routed


# ---------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class ExpertParams:
    expert_id: int
    cls: str
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    lowrank: dict[str, Tensor] | None = None  # A1 (h x r), B1 (r x h_ff), A2 (h_ff x r), B2 (r x h)
    origin_client: str = ""

    def __post_init__(self):
        if self.cls not in EXPERT_CLASSES:
            raise ValueError(f"unknown expert class {self.cls!r}")

    @classmethod
    def init(cls, expert_id: int, klass: str, h: int, h_ff: int, rng: Rng, origin_client: str = "") -> "ExpertParams":
        a1, a2 = 1.0 / np.sqrt(h), 1.0 / np.sqrt(h_ff)
        tag = f"{klass}{expert_id}"
        return cls(
            expert_id, klass,
            Tensor(rng.uniform(-a1, a1, (h, h_ff)), True, f"{tag}.W1"),
            Tensor(rng.uniform(-a1, a1, h_ff), True, f"{tag}.b1"),
            Tensor(rng.uniform(-a2, a2, (h_ff, h)), True, f"{tag}.W2"),
            Tensor(rng.uniform(-a2, a2, h), True, f"{tag}.b2"),
            origin_client=origin_client,
        )

    @property
    def h(self) -> int:
        return self.W1.shape[0]

    @property
    def h_ff(self) -> int:
        return self.W1.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.lowrank is None else self.lowrank["A1"].shape[1]

    def base(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def factors(self) -> list[Tensor]:
        if self.lowrank is None:
            return []
        return [self.lowrank[n] for n in ("A1", "B1", "A2", "B2")]

    def tensors(self) -> list[Tensor]:
        return self.base() + self.factors()

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors() if t.requires_grad]

    def add_lowrank(self, r: int, rng: Rng) -> None:
        """Attach rank-r deltas (B zero, so the effective weights are unchanged) and freeze the base."""
        h, h_ff = self.h, self.h_ff
        tag = f"{self.cls}{self.expert_id}"
        self.lowrank = {
            "A1": Tensor(rng.uniform(-1, 1, (h, r)) / np.sqrt(h), True, f"{tag}.A1"),
            "B1": Tensor(np.zeros((r, h_ff)), True, f"{tag}.B1"),
            "A2": Tensor(rng.uniform(-1, 1, (h_ff, r)) / np.sqrt(h_ff), True, f"{tag}.A2"),
            "B2": Tensor(np.zeros((r, h)), True, f"{tag}.B2"),
        }
        self.freeze_base()

    def freeze_base(self) -> None:
        for t in self.base():
            t.requires_grad = False

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False

    def fingerprint(self, base_only: bool = True) -> str:
        ts = self.base() if base_only else self.tensors()
        return fingerprint([t.value for t in ts])

    def n_params(self) -> int:
        return sum(t.value.size for t in self.tensors())

    def forward(self, x: Tensor, tape: GradTape) -> Tensor:
        pre = tape.matmul(x, self.W1)
        if self.lowrank is not None:
            pre = tape.add(pre, tape.matmul(tape.matmul(x, self.lowrank["A1"]), self.lowrank["B1"]))
        hidden = tape.tanh(tape.add(pre, self.b1))
        out = tape.matmul(hidden, self.W2)
        if self.lowrank is not None:
            out = tape.add(out, tape.matmul(tape.matmul(hidden, self.lowrank["A2"]), self.lowrank["B2"]))
        return tape.add(out, self.b2)


@dataclass(eq=False)
class GateParams:
    W_g: Tensor  # gate_in x M
    b_g: Tensor  # M
    input_mode: str = "covariate-only"
    cond_prior: Tensor = field(default_factory=lambda: Tensor(np.zeros(0), True, "gate.cond_prior"))
    fallback_prior: Tensor = field(default_factory=lambda: Tensor(np.zeros(0), True, "gate.fallback_prior"))

    @classmethod
    def init(cls, cfg: MoEConfig, rng: Rng) -> "GateParams":
        a = 1.0 / np.sqrt(cfg.gate_in)
        return cls(
            Tensor(rng.uniform(-a, a, (cfg.gate_in, cfg.M)), True, "gate.W_g"),
            Tensor(np.zeros(cfg.M), True, "gate.b_g"),
            cfg.input_mode,
            Tensor(np.zeros(cfg.C), True, "gate.cond_prior"),
            Tensor(np.zeros(cfg.M), True, "gate.fallback_prior"),
        )

    @property
    def M(self) -> int:
        return self.W_g.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.W_g, self.b_g, self.cond_prior, self.fallback_prior]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def fingerprint(self) -> str:
        return fingerprint([t.value for t in self.tensors()])

    def n_params(self) -> int:
        return sum(t.value.size for t in self.tensors())


@dataclass(frozen=True)
class CovSelectorRule:
    """Maps a static covariate to a conditional-expert index.

    ``region`` mode looks the region code up in ``table``; ``hour-bucket``
    mode maps ``hour // bucket_hours`` through ``table``.
    """

    mode: str = "region"
    table: tuple[tuple[int, int], ...] = ()
    bucket_hours: int = 6

    @classmethod
    def identity(cls, n: int, mode: str = "region", bucket_hours: int = 6) -> "CovSelectorRule":
        return cls(mode, tuple((i, i) for i in range(n)), bucket_hours)

    def key(self, region, hour):
        if self.mode == "region":
            return np.asarray(region, dtype=np.int64)
        if self.mode == "hour-bucket":
            return np.asarray(hour, dtype=np.int64) // self.bucket_hours
        raise RoutingError(f"unknown selector mode {self.mode!r}")

    def lookup(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``cov_select``: returns (indices, ok-mask); unmapped keys give ok=False."""
        table = dict(self.table)
        keys = np.asarray(keys)
        out = np.zeros(keys.shape, dtype=np.int64)
        ok = np.zeros(keys.shape, dtype=bool)
        for i, kk in enumerate(keys.reshape(-1)):
            v = table.get(int(kk))
            if v is not None:
                out.reshape(-1)[i] = v
                ok.reshape(-1)[i] = True
        return out, ok


def cov_select(rule: CovSelectorRule, static_cov) -> int:
    if rule.mode == "region":
        key = int(static_cov)
    elif rule.mode == "hour-bucket":
        key = int(static_cov) // rule.bucket_hours
    else:
        raise RoutingError(f"unknown selector mode {rule.mode!r}")
    table = dict(rule.table)
    if key not in table:
        raise RoutingError(f"no conditional expert mapped for {rule.mode} value {static_cov!r}")
    return table[key]


# ---------------------------------------------------------------------------
# routing primitives


def gate_scores(gate: GateParams, cov_embed: Tensor, token: Tensor | None, tape: GradTape) -> Tensor:
    if gate.input_mode == "covariate-plus-token":
        if token is None:
            raise ShapeError("covariate-plus-token gate needs token input")
        x = tape.concat_cols([cov_embed, token])
    else:
        x = cov_embed
    if x.shape[-1] != gate.W_g.shape[0]:
        raise ShapeError(f"gate input width {x.shape[-1]} != {gate.W_g.shape[0]}")
    return tape.add(tape.matmul(x, gate.W_g), gate.b_g)


def select_topk(s, k: int, exclude=None) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lowest index; sorted ascending.

    ``s`` may be a vector or a matrix (row-wise). ``exclude`` (per row) is
    removed from the candidate set first.
    """
    s = np.asarray(s, dtype=np.float64)
    one = s.ndim == 1
    s2 = np.atleast_2d(s).copy()
    if not 1 <= k <= s2.shape[1]:
        raise ValueError(f"k={k} outside [1, {s2.shape[1]}]")
    keep = np.ones(s2.shape, dtype=bool)
    if exclude is not None:
        ex = np.atleast_1d(np.asarray(exclude, dtype=np.int64))
        keep[np.arange(s2.shape[0]), ex] = False
    # rank key: excluded last, then by descending score, then by index
    order = np.lexsort((np.broadcast_to(np.arange(s2.shape[1]), s2.shape), -s2, ~keep), axis=1)
    top = np.sort(order[:, :k], axis=1)
    return top[0] if one else top


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser on uint64 arrays."""
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_pick(keys: np.ndarray, M: int, k: int, salt: int, exclude=None) -> np.ndarray:
    """Deterministic pseudo-random k-subset of range(M) per key (sorted ascending)."""
    keys = np.asarray(keys).astype(np.uint64)
    with np.errstate(over="ignore"):
        base = _mix64(keys ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
        ranks = _mix64(base[:, None] ^ (np.arange(M, dtype=np.uint64)[None, :] * np.uint64(0xD6E8FEB86659FD93)))
    score = -(ranks >> np.uint64(11)).astype(np.float64)  # 53-bit exact
    return select_topk(score, k, exclude)


def label_salt(label: str, seed: int = 0) -> int:
    return int.from_bytes(hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# routing record


@dataclass(frozen=True)
class RoutingDecision:
    token_idx: int
    conditional_idx: int | None
    routed_set: tuple[int, ...]
    weights: tuple[float, ...]  # conditional first (when present), then routed_set order
    fallback_used: bool


@dataclass(eq=False)
class Routing:
    """Array form of the per-token decisions of one forward call.

    ``sel`` is N x m with expert ids in a unified space (routed i -> i,
    conditional j -> M + j) and -1 padding; column 0 is the conditional
    expert whenever one is present.
    """

    sel: np.ndarray
    weights: np.ndarray
    cond: np.ndarray  # N, -1 when absent
    routed: np.ndarray  # N x k
    fallback: np.ndarray  # N bool
    M: int
    n_evals: np.ndarray  # experts evaluated per token

    def __len__(self) -> int:
        return len(self.fallback)

    def decision(self, t: int) -> RoutingDecision:
        c = int(self.cond[t])
        if c < 0:
            cidx = None
        else:
            cidx = c - self.M if c >= self.M else c
        w = self.weights[t][self.sel[t] >= 0]
        return RoutingDecision(t, cidx, tuple(int(i) for i in self.routed[t]), tuple(float(x) for x in w),
                               bool(self.fallback[t]))

    def decisions(self) -> Iterator[RoutingDecision]:
        for t in range(len(self)):
            yield self.decision(t)

    def utilization(self, n_experts: int) -> np.ndarray:
        ids = self.sel[self.sel >= 0]
        return np.bincount(ids, minlength=n_experts)


@dataclass(frozen=True, eq=False)
class RouteInputs:
    cov_embed: Tensor  # N x h_z
    region: np.ndarray  # N
    hour: np.ndarray  # N
    usable: np.ndarray  # N bool
    token_keys: np.ndarray | None = None  # N uint64, for the random strategy


# ---------------------------------------------------------------------------
# layer


@dataclass(eq=False)
class MoELayer:
    cfg: MoEConfig
    shared: list[ExpertParams]
    conditional: list[ExpertParams]
    routed: list[ExpertParams]
    gate: GateParams
    rule: CovSelectorRule | None = None
    seed: int = 0

    @classmethod
    def init(cls, cfg: MoEConfig, rng: Rng, rule: CovSelectorRule | None = None) -> "MoELayer":
        mk = lambda klass, n: [ExpertParams.init(i, klass, cfg.h, cfg.h_ff, rng.child(f"{klass}{i}")) for i in range(n)]
        layer = cls(cfg, mk(SHARED, cfg.S), mk(CONDITIONAL, cfg.C), mk(ROUTED, cfg.M),
                    GateParams.init(cfg, rng.child("gate")), rule, seed=rng.seed)
        if layer.rule is None and cfg.has_conditional:
            layer.rule = CovSelectorRule.identity(cfg.M if cfg.conditional_from_routed else cfg.C)
        if cfg.r > 0:
            for e in layer.experts():
                e.add_lowrank(cfg.r, rng.child(f"lora/{e.cls}{e.expert_id}"))
        return layer

    def experts(self) -> list[ExpertParams]:
        return self.shared + self.conditional + self.routed

    def unified(self) -> list[ExpertParams]:
        """Experts indexed by unified id: routed first, then conditional."""
        return self.routed + self.conditional

    def tensors(self) -> list[Tensor]:
        out = self.gate.tensors()
        for e in self.experts():
            out += e.tensors()
        return out

    def n_params(self) -> int:
        return self.gate.n_params() + sum(e.n_params() for e in self.experts())

    def expert_fingerprints(self) -> dict[str, str]:
        return {f"{e.cls}{e.expert_id}": e.fingerprint() for e in self.experts()}

    # -- selection -------------------------------------------------------

    def _conditional(self, inp: RouteInputs) -> tuple[np.ndarray, np.ndarray]:
        n = len(inp.usable)
        if not self.cfg.has_conditional:
            return np.full(n, -1), np.ones(n, dtype=bool)
        if self.rule is None:
            return np.full(n, -1), np.zeros(n, dtype=bool)
        try:
            keys = self.rule.key(inp.region, inp.hour)
        except RoutingError:
            return np.full(n, -1), np.zeros(n, dtype=bool)
        idx, ok = self.rule.lookup(keys)
        bound = self.cfg.M if self.cfg.conditional_from_routed else self.cfg.C
        ok &= (idx >= 0) & (idx < bound)
        idx = np.where(ok, idx, -1)
        return idx, ok

    def plan(self, inp: RouteInputs, scores: np.ndarray | None, strategy: str,
             seed: int = 0) -> Routing:
        """Decide which experts each token uses (values only; no tape)."""
        cfg = self.cfg
        n = len(inp.usable)
        k, M = cfg.k, cfg.M
        cond_local, ok = self._conditional(inp)
        fb = ~(np.asarray(inp.usable, dtype=bool) & ok)
        has_c = cfg.has_conditional
        m = k + (1 if has_c else 0)
        sel = np.full((n, m), -1, dtype=np.int64)
        routed = np.zeros((n, k), dtype=np.int64)
        cond = np.full(n, -1, dtype=np.int64)
        if has_c:
            cond_u = cond_local if cfg.conditional_from_routed else cond_local + M
            cond = np.where(fb, -1, cond_u)
        good = ~fb
        excl = cond_local[good] if (has_c and cfg.conditional_from_routed) else None
        if good.any():
            if strategy == "softmax-topk":
                routed[good] = select_topk(scores[good], k, excl)
            elif strategy == "covariate-fixed":
                keys = self.rule.key(inp.region, inp.hour)[good] if self.rule is not None else np.zeros(good.sum())
                routed[good] = hash_pick(keys, M, k, label_salt("covariate-fixed"), excl)
            elif strategy == "random":
                if inp.token_keys is None:
                    raise ValueError("random strategy needs token keys")
                routed[good] = hash_pick(inp.token_keys[good], M, k, label_salt("random", seed), excl)
            else:
                raise ValueError(f"unknown gating strategy {strategy!r}")
        if fb.any():
            if cfg.fallback == "uniform":
                routed[fb] = np.arange(k)
            else:
                prior = self.gate.fallback_prior.value
                routed[fb] = select_topk(prior, k)
        if has_c:
            sel[:, 0] = cond
            sel[:, 1:] = routed
        else:
            sel[:] = routed
        sel[fb, :] = -1
        sel[fb, :k] = routed[fb]
        n_evals = cfg.S + (sel >= 0).sum(axis=1)
        return Routing(sel, np.zeros((n, m)), cond, routed, fb, M, n_evals)

    def mixing_weights(self, routing: Routing, scores: Tensor | None, good_rows: np.ndarray,
                       strategy: str, tape: GradTape) -> Tensor:
        """N x m mixing weights on the tape (restricted softmax or constants)."""
        cfg = self.cfg
        n, m = routing.sel.shape
        k = cfg.k
        fb = routing.fallback
        parts = []
        good = ~fb
        if good.any():
            if strategy == "softmax-topk":
                # scores is defined on good rows only
                cols = [tape.reshape(tape.take(scores, np.arange(len(good_rows)), routing.routed[good][:, j]), (-1, 1))
                        for j in range(k)]
                if cfg.has_conditional:
                    c = routing.cond[good]
                    if cfg.conditional_from_routed:
                        cs = tape.take(scores, np.arange(len(good_rows)), c)
                    else:
                        cs = tape.take(self.gate.cond_prior, None, c - cfg.M)
                    cols = [tape.reshape(cs, (-1, 1))] + cols
                w = tape.softmax_rows(tape.concat_cols(cols))
            else:
                w = const(np.full((int(good.sum()), m), 1.0 / m))
            parts.append(tape.scatter_rows(w, np.where(good)[0], n))
        if fb.any():
            nf = int(fb.sum())
            if cfg.fallback == "uniform":
                wf = const(np.full((nf, k), 1.0 / k))
            else:
                pri = tape.take(self.gate.fallback_prior, None, routing.routed[fb].reshape(-1))
                wf = tape.softmax_rows(tape.reshape(pri, (nf, k)))
            if m > k:
                wf = tape.concat_cols([wf, const(np.zeros((nf, m - k)))])
            parts.append(tape.scatter_rows(wf, np.where(fb)[0], n))
        total = parts[0]
        for p in parts[1:]:
            total = tape.add(total, p)
        return total

    # -- forward ---------------------------------------------------------

    def forward(self, tokens: Tensor, inp: RouteInputs, tape: GradTape, strategy: str = "softmax-topk",
                forced: Routing | None = None, seed: int = 0) -> tuple[Tensor, Routing]:
        """Route and aggregate. ``forced`` freezes the selection (weights still recomputed)."""
        cfg = self.cfg
        n = tokens.shape[0]
        if tokens.shape[1] != cfg.h:
            raise ShapeError(f"tokens width {tokens.shape[1]} != h={cfg.h}")
        usable = np.asarray(inp.usable, dtype=bool)
        if forced is not None:
            good_rows = np.where(~forced.fallback)[0]
        else:
            _, ok = self._conditional(inp)
            good_rows = np.where(usable & ok)[0]
        scores = None
        if strategy == "softmax-topk" and len(good_rows):
            emb = tape.gather_rows(inp.cov_embed, good_rows)
            tok = tape.gather_rows(tokens, good_rows) if self.gate.input_mode == "covariate-plus-token" else None
            scores = gate_scores(self.gate, emb, tok, tape)
        if forced is None:
            full = None
            if scores is not None:
                full = np.zeros((n, cfg.M))
                full[good_rows] = scores.value
            routing = self.plan(inp, full, strategy, seed)
        else:
            routing = forced
        w = self.mixing_weights(routing, scores, good_rows, strategy, tape)
        routing = Routing(routing.sel, w.value.copy(), routing.cond, routing.routed, routing.fallback,
                          routing.M, routing.n_evals)

        acc = None
        if self.shared:
            for e in self.shared:
                y = e.forward(tokens, tape)
                acc = y if acc is None else tape.add(acc, y)
            if len(self.shared) > 1:
                acc = tape.scale(acc, 1.0 / len(self.shared))
        for uid, e in enumerate(self.unified()):
            rows, cols = np.nonzero(routing.sel == uid)
            if len(rows) == 0:
                continue
            x = tape.gather_rows(tokens, rows)
            y = tape.mul_rows(e.forward(x, tape), tape.take(w, rows, cols))
            y = tape.scatter_rows(y, rows, n)
            acc = y if acc is None else tape.add(acc, y)
        out = tokens if acc is None else tape.add(tokens, acc)
        return out, routing


def route_and_aggregate(layer: MoELayer, tokens: Tensor, inp: RouteInputs, tape: GradTape,
                        strategy: str = "softmax-topk", forced: Routing | None = None):
    return layer.forward(tokens, inp, tape, strategy, forced)


def fallback_route(layer: MoELayer, tokens: Tensor, tape: GradTape):
    """Route every token through the fallback path (covariates treated as absent)."""
    n = tokens.shape[0]
    inp = RouteInputs(const(np.zeros((n, layer.cfg.h_z))), np.zeros(n, dtype=np.int64),
                      np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
    return layer.forward(tokens, inp, tape)


def dense_forward(layer: MoELayer, tokens: np.ndarray, routing: Routing) -> np.ndarray:
    """Oracle: evaluate every expert on every token and mask by the routing weights."""
    tape = GradTape(enabled=False)
    x = const(tokens)
    n = tokens.shape[0]
    acc = np.zeros_like(tokens)
    if layer.shared:
        sh = sum(e.forward(x, tape).value for e in layer.shared)
        acc = acc + sh / len(layer.shared)
    dense_w = np.zeros((n, layer.cfg.M + layer.cfg.C))
    for t in range(n):
        for j, uid in enumerate(routing.sel[t]):
            if uid >= 0:
                dense_w[t, uid] += routing.weights[t, j]
    for uid, e in enumerate(layer.unified()):
        acc = acc + dense_w[:, uid:uid + 1] * e.forward(x, tape).value
    return tokens + acc


def moe_backward(layer: MoELayer, tape: GradTape, output: Tensor, grad: np.ndarray) -> dict[str, np.ndarray]:
    """Backprop ``grad`` from ``output``; returns gradients for every layer tensor (zeros when untouched)."""
    for t in layer.tensors():
        t.zero_grad()
    tape.backward(output, grad)
    return {t.name: (t.grad if t.grad is not None else np.zeros_like(t.value)) for t in layer.tensors()}


# ---------------------------------------------------------------------------
# parameter counting


def expert_param_count(h: int, h_ff: int, r: int = 0) -> tuple[int, int]:
    """(trainable, frozen) parameter counts of one expert."""
    base = h * h_ff + h_ff + h_ff * h + h
    if r == 0:
        return base, 0
    return h * r + r * h_ff + h_ff * r + r * h, base


def moe_param_count(cfg: MoEConfig) -> int:
    n_exp = cfg.S + cfg.C + cfg.M
    tr, fr = expert_param_count(cfg.h, cfg.h_ff, cfg.r)
    gate = cfg.gate_in * cfg.M + cfg.M + cfg.C + cfg.M
    return n_exp * (tr + fr) + gate
