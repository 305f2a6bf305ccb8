"""Small dense numeric kernel: deterministic matmul, softmax, a reverse-mode
tape over a handful of primitives, a finite-difference checker and a
counter-based seeded RNG.

Everything is float64. Matrix products accumulate in a fixed left-to-right
order so that results are reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# plain kernels


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with fixed accumulation order over the inner dimension.

    ``out[i, j] = (((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)`` which is the
    same sequence of IEEE operations as a naive triple loop.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    if _matmul_jit is not None:
        return _matmul_jit(a, b)
    return _matmul_np(a, b)


def _matmul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def _matmul_loops(a, b):
    n, K = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for k in range(K):
            aik = a[i, k]
            for j in range(m):
                out[i, j] += aik * b[k, j]
    return out


# no fastmath: keeps every multiply and add a separately rounded IEEE op
_matmul_jit = numba.njit(cache=True)(_matmul_loops) if numba is not None else None


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("softmax of empty vector")
    if np.isnan(v).any():
        raise NumericError("softmax input contains NaN")
    return softmax_rows(v.reshape(1, -1)).reshape(v.shape)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# tape


class Tensor:
    """A value plus (for leaves) an accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor({self.name or '?'}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def const(value) -> Tensor:
    return Tensor(value, requires_grad=False)


class GradTape:
    """Records primitive ops; ``backward`` replays them in reverse.

    With ``enabled=False`` ops still compute values but nothing is recorded,
    which is the inference path.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def _emit(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
        needs = self.enabled and any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self.records.append((kind, tuple(inputs), out, vjp))
        return out

    def backward(self, output: Tensor, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        produced = {id(rec[2]) for rec in self.records}
        for kind, inputs, out, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value

        def vjp(g):
            ga = matmul(g, bv.T) if a.requires_grad else None
            gb = matmul(av.T, g) if b.requires_grad else None
            return ga, gb

        return self._emit("matmul", (a, b), matmul(av, bv), vjp)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise add; ``b`` may be a row vector broadcast over rows."""
        av, bv = a.value, b.value
        if bv.shape != av.shape and not (bv.ndim == 1 and av.ndim == 2 and bv.shape[0] == av.shape[1]):
            raise ShapeError(f"add shapes {av.shape} + {bv.shape}")

        def vjp(g):
            gb = g if bv.shape == av.shape else g.sum(axis=0)
            return g, gb

        return self._emit("add", (a, b), av + bv, vjp)

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.value)
        return self._emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", (a,), a.value * c, lambda g: (g * c,))

    def mul_rows(self, x: Tensor, w: Tensor) -> Tensor:
        """Scale row i of ``x`` by ``w[i]``."""
        xv, wv = x.value, w.value

        def vjp(g):
            return g * wv[:, None], (g * xv).sum(axis=1)

        return self._emit("mul_rows", (x, w), xv * wv[:, None], vjp)

    def gather_rows(self, x: Tensor, idx: np.ndarray) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        n = x.value.shape[0]

        def vjp(g):
            out = np.zeros((n,) + g.shape[1:])
            np.add.at(out, idx, g)
            return (out,)

        return self._emit("gather_rows", (x,), x.value[idx], vjp)

    def scatter_rows(self, x: Tensor, idx: np.ndarray, n: int) -> Tensor:
        """Place rows of ``x`` at ``idx`` in an ``n``-row zero matrix (summing repeats)."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.zeros((n,) + x.value.shape[1:])
        np.add.at(out, idx, x.value)
        return self._emit("scatter_rows", (x,), out, lambda g: (g[idx],))

    def take(self, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """Fancy-index ``x[rows, cols]`` (1-D ``x`` when ``rows`` is None)."""
        if rows is None:
            cols = np.asarray(cols, dtype=np.int64)

            def vjp1(g):
                out = np.zeros_like(x.value)
                np.add.at(out, cols, g)
                return (out,)

            return self._emit("take", (x,), x.value[cols], vjp1)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(x.value)
            np.add.at(out, (rows, cols), g)
            return (out,)

        return self._emit("take", (x,), x.value[rows, cols], vjp)

    def concat_cols(self, parts: Sequence[Tensor]) -> Tensor:
        widths = [p.value.shape[1] for p in parts]
        edges = np.cumsum([0] + widths)

        def vjp(g):
            return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

        return self._emit("concat_cols", tuple(parts), np.concatenate([p.value for p in parts], axis=1), vjp)

    def softmax_rows(self, x: Tensor) -> Tensor:
        y = softmax_rows(x.value)

        def vjp(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        return self._emit("softmax_rows", (x,), y, vjp)

    def segment_mean(self, x: Tensor, n_segments: int, seg_len: int) -> Tensor:
        """Mean over consecutive blocks of ``seg_len`` rows."""
        v = x.value.reshape(n_segments, seg_len, -1)

        def vjp(g):
            return (np.repeat(g / seg_len, seg_len, axis=0),)

        return self._emit("segment_mean", (x,), v.sum(axis=1) / seg_len, vjp)

    def reshape(self, x: Tensor, shape) -> Tensor:
        old = x.value.shape
        return self._emit("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))

    def sort_last(self, x: Tensor) -> Tensor:
        """Sort along the last axis; gradient follows the permutation."""
        order = np.argsort(x.value, axis=-1, kind="stable")
        y = np.take_along_axis(x.value, order, axis=-1)

        def vjp(g):
            out = np.zeros_like(g)
            np.put_along_axis(out, order, g, axis=-1)
            return (out,)

        return self._emit("sort", (x,), y, vjp)

    def pinball(self, pred: Tensor, target: np.ndarray, levels: np.ndarray) -> Tensor:
        """Mean pinball loss of ``pred`` (..., |Q|) against ``target`` (...)."""
        diff = target[..., None] - pred.value
        loss = np.where(diff >= 0, levels * diff, (levels - 1.0) * diff)
        n = loss.size
        # right-derivative w.r.t. pred at diff == 0 (i.e. moving pred upward)
        dpred = np.where(diff > 0, -levels, 1.0 - levels) / n
        return self._emit("pinball", (pred,), np.array(loss.sum() / n), lambda g: (g * dpred,))


# ---------------------------------------------------------------------------
# checks


def mlp_forward(params: dict, x: Tensor, tape: GradTape) -> Tensor:
    """``tanh(x W1 + b1) W2 + b2`` with params given as Tensors."""
    hidden = tape.tanh(tape.add(tape.matmul(x, params["W1"]), params["b1"]))
    return tape.add(tape.matmul(hidden, params["W2"]), params["b2"])


def central_difference(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(theta)
        flat[i] = old - eps
        fm = f(theta)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(theta.shape)


def grad_check(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5,
               analytic: np.ndarray | None = None,
               grad_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Max over coordinates of |analytic - central diff| / max(1, |analytic|).

    Supply either the analytic gradient directly or ``grad_fn``.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    theta = np.asarray(theta, dtype=np.float64)
    if analytic is None:
        if grad_fn is None:
            raise ValueError("need analytic gradient or grad_fn")
        analytic = grad_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    numeric = central_difference(f, theta, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# randomness


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{int(seed)}/{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Philox-backed generator; ``child(label)`` gives an independent stream."""

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        key = derive_seed(self.seed, label)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.label}/{label}")

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self.gen.choice(n, size=size, replace=replace)

    def dirichlet(self, alpha):
        return self.gen.dirichlet(alpha)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)


def fingerprint(arrays: Sequence[np.ndarray]) -> str:
    """64-bit hex digest over the raw bytes of ``arrays`` (shape-aware)."""
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
