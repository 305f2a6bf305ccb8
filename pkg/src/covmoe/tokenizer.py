"""Per-timestep projection of the observed channels into tokens, plus the
separate covariate embedding that feeds the gates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import GradTape, Rng, ShapeError, Tensor, const, fingerprint


@dataclass(eq=False)
class TokenizerParams:
    W_in: Tensor  # d x h
    b_in: Tensor  # h
    W_cov: Tensor  # p x h_z
    b_cov: Tensor  # h_z

    @classmethod
    def init(cls, d: int, p: int, h: int, h_z: int, rng: Rng) -> "TokenizerParams":
        a_in = 1.0 / np.sqrt(max(d, 1))
        a_cov = 1.0 / np.sqrt(max(p, 1))
        return cls(
            Tensor(rng.uniform(-a_in, a_in, (d, h)), name="tok.W_in"),
            Tensor(np.zeros(h), name="tok.b_in"),
            Tensor(rng.uniform(-a_cov, a_cov, (p, h_z)), name="tok.W_cov"),
            Tensor(np.zeros(h_z), name="tok.b_cov"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.W_in, self.b_in, self.W_cov, self.b_cov]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def fingerprint(self) -> str:
        return fingerprint([t.value for t in self.tensors()])

    def n_params(self) -> int:
        return sum(t.value.size for t in self.tensors())


def tokenize(params: TokenizerParams, context: np.ndarray, tape: GradTape) -> Tensor:
    """One token per row of ``context``: ``tanh(x_t W_in + b_in)``."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 2 or context.shape[1] != params.W_in.shape[0]:
        raise ShapeError(f"context {context.shape} does not match W_in {params.W_in.shape}")
    return tape.tanh(tape.add(tape.matmul(const(context), params.W_in), params.b_in))


def embed_covariates(params: TokenizerParams, cov_rows: np.ndarray, tape: GradTape) -> Tensor:
    cov_rows = np.asarray(cov_rows, dtype=np.float64)
    if cov_rows.ndim != 2 or cov_rows.shape[1] != params.W_cov.shape[0]:
        raise ShapeError(f"covariates {cov_rows.shape} do not match W_cov {params.W_cov.shape}")
    return tape.tanh(tape.add(tape.matmul(const(cov_rows), params.W_cov), params.b_cov))
