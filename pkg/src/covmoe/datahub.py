"""CSV ingestion, calendar covariates, supervised windows, scaling and
client partitioning."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkit import Rng

log = logging.getLogger(__name__)

CALENDAR_NAMES = ("hour_sin", "hour_cos") + tuple(f"dow_{i}" for i in range(7)) + ("weekend",)


class IngestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    target: str
    timestamp: str = "timestamp"
    channels: tuple[str, ...] = ()
    covariates: tuple[str, ...] = ()
    freq_hours: int = 1
    max_gap_fraction: float = 0.10


@dataclass(frozen=True, eq=False)
class SeriesFrame:
    timestamps: np.ndarray  # datetime64[s], UTC
    values: np.ndarray  # T x d
    target_idx: int
    covariates: np.ndarray  # T x p
    covariate_names: tuple[str, ...] = ()
    channel_names: tuple[str, ...] = ()
    fill_count: int = 0
    name: str = ""

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def target(self) -> np.ndarray:
        return self.values[:, self.target_idx]

    def same_as(self, other: "SeriesFrame") -> bool:
        return (
            np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.covariates, other.covariates)
            and self.target_idx == other.target_idx
            and self.covariate_names == other.covariate_names
            and self.fill_count == other.fill_count
        )


@dataclass(frozen=True, eq=False)
class Window:
    context: np.ndarray  # T_c x d
    context_cov: np.ndarray  # T_c x p
    future_cov: np.ndarray  # H x p_cal
    target_future: np.ndarray  # H
    origin: np.datetime64  # first forecast timestamp
    target_idx: int = 0
    region_code: int = 0
    context_hours: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cov_present: np.ndarray | None = None  # p bools; None means all present
    covariate_region: int | None = None  # region whose covariates the window carries, if swapped

    @property
    def static_region(self) -> int:
        return self.region_code if self.covariate_region is None else self.covariate_region

    @property
    def key(self) -> tuple[int, np.datetime64]:
        return (self.region_code, self.origin)

    @property
    def history(self) -> np.ndarray:
        return self.context[:, self.target_idx]

    def covariates_usable(self) -> bool:
        if self.cov_present is not None and not np.any(self.cov_present):
            return False
        return bool(np.all(np.isfinite(self.context_cov)))


@dataclass(frozen=True, eq=False)
class ClientPartition:
    client_id: str
    train: tuple[Window, ...]
    val: tuple[Window, ...]
    test: tuple[Window, ...]
    region_code: int = 0
    public: tuple[Window, ...] = ()  # never trained on by the client; pooled at the server

    def all_windows(self) -> tuple[Window, ...]:
        return self.train + self.public + self.val + self.test


# ---------------------------------------------------------------------------
# ingestion


def _parse_ts(text: str, lineno: int) -> np.datetime64:
    try:
        dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError as e:
        raise IngestError(f"line {lineno}: unparseable timestamp {text!r}") from e
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt.replace(microsecond=0), "s")


def load_csv(path, schema: CsvSchema, name: str = "") -> SeriesFrame:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")
    channels = (schema.target,) + tuple(c for c in schema.channels if c != schema.target)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.timestamp,) + channels + tuple(schema.covariates):
            if col not in header:
                raise IngestError(f"{path.name}: missing column {col!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            ts = _parse_ts(row[schema.timestamp], lineno)
            try:
                vals = [float(row[c]) for c in channels]
                covs = [float(row[c]) for c in schema.covariates]
            except ValueError as e:
                raise IngestError(f"line {lineno}: non-numeric value") from e
            rows.append((ts, vals, covs))
    if not rows:
        raise IngestError(f"{path.name}: no data rows")
    rows.sort(key=lambda r: r[0])
    stamps = np.array([r[0] for r in rows], dtype="datetime64[s]")
    if np.any(stamps[1:] == stamps[:-1]):
        dup = stamps[1:][stamps[1:] == stamps[:-1]][0]
        raise IngestError(f"{path.name}: duplicate timestamp {dup}")
    step = np.timedelta64(schema.freq_hours * 3600, "s")
    offsets = (stamps - stamps[0]) // step
    if np.any((stamps - stamps[0]) % step != np.timedelta64(0, "s")):
        raise IngestError(f"{path.name}: timestamps off the {schema.freq_hours}h grid")
    T = int(offsets[-1]) + 1
    fill = T - len(rows)
    if fill > schema.max_gap_fraction * T:
        raise IngestError(f"{path.name}: {fill} of {T} steps missing (> {schema.max_gap_fraction:.0%})")
    values = np.full((T, len(channels)), np.nan)
    covs = np.full((T, len(schema.covariates)), np.nan)
    for off, (_, v, c) in zip(offsets, rows):
        values[off] = v
        covs[off] = c
    values = _ffill(values)
    covs = _ffill(covs)
    if fill:
        log.info("%s: forward-filled %d missing steps", path.name, fill)
    grid = stamps[0] + step * np.arange(T)
    return SeriesFrame(
        timestamps=grid,
        values=values,
        target_idx=0,
        covariates=covs,
        covariate_names=tuple(schema.covariates),
        channel_names=channels,
        fill_count=int(fill),
        name=name or path.stem,
    )


def _ffill(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    for t in range(1, len(a)):
        bad = np.isnan(a[t])
        a[t, bad] = a[t - 1, bad]
    return a


def derive_calendar_covariates(frame: SeriesFrame) -> SeriesFrame:
    hours = hours_of(frame.timestamps)
    days = (frame.timestamps.astype("datetime64[D]").astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
    ang = 2.0 * math.pi * hours / 24.0
    cal = np.zeros((frame.T, len(CALENDAR_NAMES)))
    cal[:, 0] = np.sin(ang)
    cal[:, 1] = np.cos(ang)
    cal[np.arange(frame.T), 2 + days] = 1.0
    cal[:, 9] = (days >= 5).astype(np.float64)
    return replace(
        frame,
        covariates=np.concatenate([frame.covariates, cal], axis=1),
        covariate_names=frame.covariate_names + CALENDAR_NAMES,
    )


def hours_of(stamps: np.ndarray) -> np.ndarray:
    secs = stamps.astype("datetime64[s]").astype(np.int64)
    return (secs // 3600) % 24


def calendar_columns(names: Sequence[str]) -> list[int]:
    return [i for i, n in enumerate(names) if n in CALENDAR_NAMES]


def make_windows(frame: SeriesFrame, T_c: int, H: int, stride: int = 1, region_code: int = 0) -> list[Window]:
    if stride < 1 or T_c < 1 or H < 1:
        raise ConfigError("T_c, H and stride must be positive")
    if T_c + H > frame.T:
        raise ConfigError(f"series of length {frame.T} too short for T_c={T_c}, H={H}")
    cal = calendar_columns(frame.covariate_names)
    hours = hours_of(frame.timestamps)
    n = (frame.T - T_c - H) // stride + 1
    out = []
    for i in range(n):
        s = i * stride
        out.append(
            Window(
                context=frame.values[s:s + T_c].copy(),
                context_cov=frame.covariates[s:s + T_c].copy(),
                future_cov=frame.covariates[s + T_c:s + T_c + H][:, cal].copy(),
                target_future=frame.values[s + T_c:s + T_c + H, frame.target_idx].copy(),
                origin=frame.timestamps[s + T_c],
                target_idx=frame.target_idx,
                region_code=region_code,
                context_hours=hours[s:s + T_c].copy(),
            )
        )
    return out


# ---------------------------------------------------------------------------
# partitioning


def _chrono_split(windows: Sequence[Window], fractions: Sequence[float]) -> list[tuple[Window, ...]]:
    n = len(windows)
    edges = np.floor(np.cumsum([0.0] + list(fractions)) * n + 1e-9).astype(int)
    edges[-1] = n
    return [tuple(windows[edges[i]:edges[i + 1]]) for i in range(len(fractions))]


def _split_client(cid, region, windows, split) -> ClientPartition:
    train, public, val, test = _chrono_split(windows, split)
    return ClientPartition(client_id=cid, train=train, public=public, val=val, test=test, region_code=region)


def partition_clients(
    frames: Sequence[SeriesFrame],
    K: int,
    scheme: str = "by-region",
    *,
    T_c: int,
    H: int,
    stride: int = 1,
    alpha: float = 1.0,
    split: Sequence[float] = (0.6, 0.1, 0.1, 0.2),
    seed: int = 0,
) -> list[ClientPartition]:
    """Split windows into K clients.

    ``split`` gives chronological (train, public, val, test) fractions inside
    each client. The public slice is what a server may pool as its
    validation set.
    """
    if K < 2:
        raise ConfigError("need at least two clients")
    if abs(sum(split) - 1.0) > 1e-9 or len(split) != 4:
        raise ConfigError("split must be four fractions summing to 1")
    if scheme == "by-region":
        if K > len(frames):
            raise ConfigError(f"by-region needs {K} frames, got {len(frames)}")
        return split_frames(frames[:K], T_c=T_c, H=H, stride=stride, split=split)
    if scheme == "dirichlet":
        windows = make_windows(frames[0], T_c, H, stride)
        sizes = dirichlet_sizes(len(windows), K, alpha, seed)
        parts, start = [], 0
        for k, size in enumerate(sizes):
            chunk = [replace(w, region_code=k) for w in windows[start:start + size]]
            parts.append(_split_client(f"client-{k}", k, chunk, split))
            start += size
        return parts
    raise ConfigError(f"unknown partition scheme {scheme!r}")


def split_frames(frames: Sequence[SeriesFrame], *, T_c: int, H: int, stride: int = 1,
                 split: Sequence[float] = (0.6, 0.1, 0.1, 0.2)) -> list[ClientPartition]:
    """One chronologically split partition per frame; frame k gets region code k."""
    return [
        _split_client(f"client-{k}", k, make_windows(f, T_c, H, stride, region_code=k), split)
        for k, f in enumerate(frames)
    ]


def dirichlet_sizes(n: int, K: int, alpha: float, seed: int) -> list[int]:
    """Integer client sizes from a seeded Dirichlet draw (largest remainder)."""
    props = Rng(seed, "dirichlet").dirichlet(np.full(K, float(alpha)))
    raw = props * n
    sizes = np.floor(raw).astype(int)
    short = n - sizes.sum()
    for i in np.argsort(-(raw - sizes), kind="stable")[:short]:
        sizes[i] += 1
    return [int(s) for s in sizes]


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class Scaler:
    """Per-channel affine map ``(x - offset) / scale``; value channels then covariates."""

    value_offset: np.ndarray
    value_scale: np.ndarray
    cov_offset: np.ndarray
    cov_scale: np.ndarray
    target_idx: int = 0
    warnings: tuple[str, ...] = ()

    @classmethod
    def fit(cls, windows: Sequence[Window], cov_names: Sequence[str] = ()) -> "Scaler":
        if not windows:
            raise ConfigError("cannot fit scaler on an empty train split")
        vals = np.concatenate([w.context for w in windows], axis=0)
        covs = np.concatenate([w.context_cov for w in windows], axis=0)
        warnings = []
        v_off, v_sc = vals.mean(axis=0), vals.std(axis=0)
        c_off, c_sc = covs.mean(axis=0), covs.std(axis=0)
        for i in np.where(v_sc == 0)[0]:
            warnings.append(f"value channel {i} has zero variance; scale set to 1")
        v_off = np.where(v_sc == 0, 0.0, v_off)
        v_sc = np.where(v_sc == 0, 1.0, v_sc)
        # calendar covariates are already bounded; leave them untouched
        cal = np.zeros(covs.shape[1], dtype=bool)
        cal[calendar_columns(cov_names)] = True
        for i in np.where((c_sc == 0) & ~cal)[0]:
            warnings.append(f"covariate {i} has zero variance; scale set to 1")
        keep = cal | (c_sc == 0)
        c_off = np.where(keep, 0.0, c_off)
        c_sc = np.where(keep, 1.0, c_sc)
        return cls(v_off, v_sc, c_off, c_sc, windows[0].target_idx, tuple(warnings))

    def transform_values(self, x):
        return (x - self.value_offset) / self.value_scale

    def inverse_values(self, x):
        return x * self.value_scale + self.value_offset

    def transform_target(self, y):
        return (y - self.value_offset[self.target_idx]) / self.value_scale[self.target_idx]

    def inverse_target(self, y):
        return y * self.value_scale[self.target_idx] + self.value_offset[self.target_idx]

    def transform_window(self, w: Window) -> Window:
        return replace(
            w,
            context=self.transform_values(w.context),
            context_cov=(w.context_cov - self.cov_offset) / self.cov_scale,
            target_future=self.transform_target(w.target_future),
        )

    def to_records(self) -> list[dict]:
        recs = [
            {"channel": f"value:{i}", "offset": float(o), "scale": float(s)}
            for i, (o, s) in enumerate(zip(self.value_offset, self.value_scale))
        ]
        recs += [
            {"channel": f"cov:{i}", "offset": float(o), "scale": float(s)}
            for i, (o, s) in enumerate(zip(self.cov_offset, self.cov_scale))
        ]
        return recs

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_records(), indent=2))

    @classmethod
    def from_records(cls, recs: list[dict], target_idx: int = 0) -> "Scaler":
        v = [r for r in recs if r["channel"].startswith("value:")]
        c = [r for r in recs if r["channel"].startswith("cov:")]
        return cls(
            np.array([r["offset"] for r in v]), np.array([r["scale"] for r in v]),
            np.array([r["offset"] for r in c]), np.array([r["scale"] for r in c]),
            target_idx,
        )


def normalize(part: ClientPartition, cov_names: Sequence[str] = ()) -> tuple[ClientPartition, Scaler]:
    scaler = Scaler.fit(part.train, cov_names)
    for msg in scaler.warnings:
        log.warning("%s: %s", part.client_id, msg)
    t = scaler.transform_window
    return (
        replace(
            part,
            train=tuple(map(t, part.train)),
            public=tuple(map(t, part.public)),
            val=tuple(map(t, part.val)),
            test=tuple(map(t, part.test)),
        ),
        scaler,
    )


# ---------------------------------------------------------------------------
# synthetic regions


def synthetic_frames(n_regions: int = 3, n_days: int = 240, seed: int = 0, noise: float = 0.05,
                     start: str = "2021-01-04T00:00:00") -> list[SeriesFrame]:
    """Hourly price-like series per region: a mixture of daily/weekly sinusoids
    whose amplitude follows an exogenous 'temperature' covariate, plus a
    'load' channel correlated with the target. Calendar covariates attached."""
    T = 24 * n_days
    stamps = np.datetime64(start, "s") + np.timedelta64(3600, "s") * np.arange(T)
    hours = hours_of(stamps).astype(float)
    days = ((stamps.astype("datetime64[D]").astype(np.int64) + 3) % 7).astype(float)
    t = np.arange(T, dtype=float)
    frames = []
    for r in range(n_regions):
        rng = Rng(seed, f"synthetic/{r}")
        phase = 2 * math.pi * r / max(n_regions, 1)
        amp1 = 1.0 + 0.5 * r
        temp = np.sin(2 * math.pi * t / (24 * 30) + phase) + 0.3 * rng.normal(size=T).cumsum() / math.sqrt(T)
        daily = amp1 * (1.0 + 0.5 * temp) * np.sin(2 * math.pi * hours / 24 + phase)
        second = 0.5 * np.sin(4 * math.pi * hours / 24 + 0.5 * r)
        weekly = np.where(days >= 5, -0.8 - 0.2 * r, 0.2)
        price = 5.0 + r + daily + second + weekly + noise * rng.normal(size=T)
        load = 0.6 * price + 0.4 * rng.normal(size=T)
        frame = SeriesFrame(
            timestamps=stamps,
            values=np.stack([price, load], axis=1),
            target_idx=0,
            covariates=temp[:, None],
            covariate_names=("temperature",),
            channel_names=("price", "load"),
            name=f"region-{r}",
        )
        frames.append(derive_calendar_covariates(frame))
    return frames


def write_csv(frame: SeriesFrame, path) -> None:
    """Write a frame's raw (non-calendar) columns in the ingestible CSV layout."""
    raw = [i for i, n in enumerate(frame.covariate_names) if n not in CALENDAR_NAMES]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *frame.channel_names, *(frame.covariate_names[i] for i in raw)])
        for t in range(frame.T):
            ts = str(frame.timestamps[t]) + "Z"
            w.writerow([ts, *(repr(float(v)) for v in frame.values[t]),
                        *(repr(float(frame.covariates[t, i])) for i in raw)])
