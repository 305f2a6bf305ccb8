"""MASE / WQL metrics, covariate perturbations and the ablation tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .backbone import QuantileForecast
from .datahub import Scaler, Window
from .model import CovMoEModel
from .numkit import Rng

PERTURB_KINDS = ("missing", "noise", "adversarial-shift")


class HarnessError(RuntimeError):
    pass


def mase(point, target, insample, m: int = 24) -> float:
    """Mean absolute error over the horizon scaled by the in-sample
    seasonal-naive error. Returns ``inf`` when that scale is zero."""
    point = np.asarray(point, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    insample = np.asarray(insample, dtype=np.float64)
    if len(insample) <= m:
        raise ValueError(f"in-sample length {len(insample)} must exceed seasonality {m}")
    scale = np.mean(np.abs(insample[m:] - insample[:-m]))
    if scale == 0:
        return math.inf
    return float(np.mean(np.abs(target - point)) / scale)


def quantile_losses(values: np.ndarray, target: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Unaveraged pinball loss per (step, level)."""
    diff = target[:, None] - values
    return np.maximum(levels * diff, (levels - 1.0) * diff)


def wql(forecast: QuantileForecast, target) -> float:
    """``2 * sum_{t,q} QL_q(y_t, yhat_{t,q}) / sum_t |y_t|``; ``inf`` for an all-zero target."""
    y = np.asarray(target, dtype=np.float64)
    denom = np.abs(y).sum()
    if denom == 0:
        return math.inf
    ql = quantile_losses(np.asarray(forecast.values), y, np.asarray(forecast.levels))
    return float(2.0 * ql.sum() / denom)


@dataclass
class MetricReport:
    mase: float
    wql: float
    n_windows: int
    m: int = 24
    per_window: list[dict] = field(default_factory=list)
    n_excluded: int = 0
    fallback_fraction: float = 0.0

    def summary(self) -> dict:
        return {"mase": self.mase, "wql": self.wql, "n_windows": self.n_windows, "m": self.m,
                "n_excluded": self.n_excluded, "fallback_fraction": self.fallback_fraction}

    def to_json(self) -> str:
        d = self.summary()
        d["per_window"] = self.per_window
        return json.dumps(d, indent=2, sort_keys=True)


def evaluate(model: CovMoEModel, windows: Sequence[Window], scaler: Scaler | dict | None = None,
             strategy: str = "softmax-topk", m: int = 24, seed: int = 0) -> MetricReport:
    """Score ``model`` on (normalised) ``windows`` in the original units.

    MASE is averaged over windows with a finite value; WQL pools numerator
    and denominator over all windows. ``scaler`` may map region code to a
    per-region scaler.
    """
    if not windows:
        raise ValueError("no windows to evaluate")
    cube, routings = model.predict(windows, strategy, seed)
    levels = model.levels
    mases, rows = [], []
    num = den = 0.0
    for i, w in enumerate(windows):
        sc = scaler.get(w.region_code) if isinstance(scaler, dict) else scaler
        inv_t = sc.inverse_target if sc is not None else (lambda a: a)
        vals = inv_t(cube[i])
        y = inv_t(w.target_future)
        hist = inv_t(w.history)
        fc = QuantileForecast(levels, vals)
        mv = mase(fc.point, y, hist, m)
        ql = quantile_losses(vals, y, levels).sum()
        num += ql
        den += np.abs(y).sum()
        rows.append({"origin": str(w.origin), "region": int(w.region_code), "mase": mv,
                     "wql": wql(fc, y)})
        if math.isfinite(mv):
            mases.append(mv)
    fb = np.concatenate([r.fallback for r in routings])
    return MetricReport(
        mase=float(np.mean(mases)) if mases else math.inf,
        wql=float(2.0 * num / den) if den > 0 else math.inf,
        n_windows=len(windows),
        m=m,
        per_window=rows,
        n_excluded=len(windows) - len(mases),
        fallback_fraction=float(fb.mean()),
    )


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    fraction: float = 0.0
    sigma: float = 0.1
    swap_source: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.kind == "missing" and not 0.0 < self.fraction <= 1.0:
            raise ValueError("missing fraction must be in (0, 1]")
        if self.kind == "noise" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.kind == "adversarial-shift" and self.swap_source is None:
            raise ValueError("adversarial shift needs a swap_source region")

    @property
    def label(self) -> str:
        if self.kind == "missing":
            return f"missing-{round(self.fraction * 100)}%"
        if self.kind == "noise":
            return f"noise-sigma-{self.sigma:g}"
        return "region-swap"


def missing_columns(p: int, fraction: float, seed: int) -> np.ndarray:
    n = int(round(fraction * p))
    return np.sort(Rng(seed, "perturb/missing").permutation(p)[:n])


def perturb(windows: Sequence[Window], spec: PerturbSpec,
            source: Sequence[Window] = ()) -> list[Window]:
    """Degrade the covariates of ``windows``; targets and context values are untouched.

    ``source`` supplies the donor windows for an adversarial shift; every
    perturbed origin must be present in it.
    """
    if not windows:
        return []
    if spec.kind == "missing":
        p = windows[0].context_cov.shape[1]
        cols = missing_columns(p, spec.fraction, spec.seed)
        out = []
        for w in windows:
            present = np.ones(p, dtype=bool) if w.cov_present is None else w.cov_present.copy()
            present[cols] = False
            cov = w.context_cov.copy()
            cov[:, cols] = 0.0
            out.append(replace(w, context_cov=cov, cov_present=present))
        return out
    if spec.kind == "noise":
        rng = Rng(spec.seed, "perturb/noise")
        return [replace(w, context_cov=w.context_cov + rng.normal(0.0, spec.sigma, w.context_cov.shape))
                for w in windows]
    donors = {w.origin: w for w in source if w.region_code == spec.swap_source}
    out = []
    for w in windows:
        d = donors.get(w.origin)
        if d is None:
            raise HarnessError(f"region {spec.swap_source} has no window at {w.origin}")
        out.append(replace(w, context_cov=d.context_cov.copy(), covariate_region=d.region_code))
    return out


# ---------------------------------------------------------------------------
# ablation tables

ABLATION_AXES = ("expert-count", "gating-strategy", "perturbation-grid")
EXPERT_COUNTS = (4, 8, 16)
GATING_ROWS = ("covariate-fixed", "softmax-topk", "random")


@dataclass
class TableRow:
    setting: str
    mase: float
    wql: float
    n_windows: int
    flags: str = ""


@dataclass
class AblationTable:
    axis: str
    rows: list[TableRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "mase", "wql", "n_windows", "flags"])
        for r in self.rows:
            w.writerow([r.setting, repr(r.mase), repr(r.wql), r.n_windows, r.flags])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "rows": [vars(r) for r in self.rows]}, indent=2, sort_keys=True)


def perturbation_grid(seed: int, swap_source: int) -> list[tuple[str, PerturbSpec | None]]:
    specs = [
        PerturbSpec("missing", fraction=0.2, seed=seed),
        PerturbSpec("missing", fraction=0.5, seed=seed),
        PerturbSpec("missing", fraction=1.0, seed=seed),
        PerturbSpec("noise", sigma=0.1, seed=seed),
        PerturbSpec("adversarial-shift", swap_source=swap_source, seed=seed),
    ]
    return [("none", None)] + [(s.label, s) for s in specs]


def run_ablation(axis: str, fit: Callable[..., tuple], seed: int = 0) -> AblationTable:
    """Build one ablation table.

    ``fit(**overrides)`` trains a model under the base configuration with the
    given overrides and returns ``(model, test_windows, scaler, strategy,
    donor_windows, swap_map)``; ``swap_map`` maps a region to the region whose
    covariates replace it in the region-swap row.
    """
    rows = []
    if axis == "expert-count":
        for n in EXPERT_COUNTS:
            model, test, scaler, strategy, _, _ = fit(n_experts=n)
            rep = evaluate(model, test, scaler, strategy, seed=seed)
            rows.append(TableRow(f"N={n}", rep.mase, rep.wql, rep.n_windows))
    elif axis == "gating-strategy":
        for g in GATING_ROWS:
            model, test, scaler, strategy, _, _ = fit(gating_strategy=g)
            rep = evaluate(model, test, scaler, strategy, seed=seed)
            rows.append(TableRow(g, rep.mase, rep.wql, rep.n_windows))
    elif axis == "perturbation-grid":
        model, test, scaler, strategy, donors, swap_map = fit()
        for label, spec in perturbation_grid(seed, 0):
            if spec is None:
                pw = list(test)
            elif spec.kind == "adversarial-shift":
                pw = []
                for region in sorted({w.region_code for w in test}):
                    sub = [w for w in test if w.region_code == region]
                    pw += perturb(sub, replace(spec, swap_source=swap_map[region]), donors)
            else:
                pw = perturb(test, spec)
            rep = evaluate(model, pw, scaler, strategy, seed=seed)
            flag = "fallback" if rep.fallback_fraction == 1.0 else ""
            rows.append(TableRow(label, rep.mase, rep.wql, rep.n_windows, flag))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return AblationTable(axis, rows)
