"""Frozen stand-in for a pretrained forecaster: mean-pool the tokens, one
tanh layer, then a linear multi-quantile head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import GradTape, Rng, ShapeError, Tensor, fingerprint

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(eq=False)
class BackboneParams:
    W_pool: Tensor  # h x h
    W_out: Tensor  # h x (H*|Q|)
    b_out: Tensor  # H*|Q|
    H: int
    levels: tuple[float, ...]
    fingerprint: str = ""

    def tensors(self) -> list[Tensor]:
        return [self.W_pool, self.W_out, self.b_out]

    def compute_fingerprint(self) -> str:
        return fingerprint([t.value for t in self.tensors()])

    def verify(self) -> bool:
        return self.compute_fingerprint() == self.fingerprint

    def n_params(self) -> int:
        return sum(t.value.size for t in self.tensors())

    @property
    def h(self) -> int:
        return self.W_pool.shape[0]


@dataclass(frozen=True, eq=False)
class QuantileForecast:
    levels: np.ndarray
    values: np.ndarray  # H x |Q|

    @property
    def point(self) -> np.ndarray:
        return self.values[:, int(np.argmin(np.abs(self.levels - 0.5)))]


def build_frozen_backbone(seed: int, h: int, H: int, levels=DEFAULT_LEVELS) -> BackboneParams:
    levels = tuple(float(q) for q in levels)
    if any(not 0.0 < q < 1.0 for q in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("quantile levels must be strictly increasing in (0, 1)")
    rng = Rng(seed, "backbone")
    nq = len(levels)
    a = 1.0 / np.sqrt(h)
    W_pool = rng.uniform(-a, a, (h, h)) * np.sqrt(3.0)
    W_out = rng.uniform(-a, a, (h, H * nq)) * np.sqrt(3.0)
    b_out = np.tile(np.array(levels) - 0.5, H) * 0.5
    params = BackboneParams(
        Tensor(W_pool, name="bb.W_pool"), Tensor(W_out, name="bb.W_out"), Tensor(b_out, name="bb.b_out"),
        H=H, levels=levels,
    )
    for t in params.tensors():
        t.value.setflags(write=False)
    params.fingerprint = params.compute_fingerprint()
    return params


def backbone_forward(params: BackboneParams, moe_tokens: Tensor, n_windows: int, tape: GradTape) -> Tensor:
    """Tokens ``(n_windows*L) x h`` -> monotone quantiles ``n_windows x H x |Q|``."""
    v = moe_tokens.value
    if v.ndim != 2 or v.shape[1] != params.h or v.shape[0] % n_windows:
        raise ShapeError(f"tokens {v.shape} incompatible with backbone width {params.h}")
    L = v.shape[0] // n_windows
    pooled = tape.segment_mean(moe_tokens, n_windows, L)
    hidden = tape.tanh(tape.matmul(pooled, params.W_pool))
    flat = tape.add(tape.matmul(hidden, params.W_out), params.b_out)
    cube = tape.reshape(flat, (n_windows, params.H, len(params.levels)))
    return tape.sort_last(cube)


def to_forecasts(cube: np.ndarray, levels) -> list[QuantileForecast]:
    lv = np.asarray(levels, dtype=np.float64)
    return [QuantileForecast(lv, cube[i]) for i in range(cube.shape[0])]
