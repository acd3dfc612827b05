"""Dense float64 tensors with recorded-computation differentiation.

A `Tensor` wraps a numpy float64 array. Operations record their parents and
a backward rule on the result node; `GradTape` replays the recording in
reverse topological order to accumulate adjoints. Only the primitives the
model needs are provided; there is no broadcasting beyond what those
primitives use internally.

The correctness contract for every differentiable primitive is agreement
with central finite differences (`finite_diff_grad` / `check_gradients`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, NumericError

NORM_EPS = 1e-12


class Tensor:
    """One node of a recorded computation holding a float64 array.

    Leaves are built directly (`Tensor(data, requires_grad=...)`); interior
    nodes are built by the operations below via `node()`. `grad` is filled
    by `GradTape.backward` for every node reachable from the loss.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an interior node. `backward(out_grad)` must push into parents
    via `accumulate`."""
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add `g` to the adjoint buffer of `t` (no-op for constant leaves)."""
    if t._backward is None and not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class GradTape:
    """Reverse walk over the computation that produced one scalar node.

    The recording is the parent structure of the graph itself; the tape
    linearizes it so backward visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        if root.data.shape != ():
            raise ValueError("backward root must be a scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self._order = order  # leaves first

    def backward(self) -> None:
        for t in self._order:
            t.grad = None
        self.root.grad = np.ones((), dtype=np.float64)
        for t in reversed(self._order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def backward(root: Tensor) -> None:
    GradTape(root).backward()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return node(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; operands may broadcast against each other."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        accumulate(a, g * c)

    return node(a.data * c, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        accumulate(a, g)

    return node(a.data + float(c), (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        accumulate(a, g * out_data)

    return node(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    """max(0, x) elementwise; subgradient 0 at the kink."""
    a = as_tensor(a)
    mask = a.data > 0.0

    def bw(g):
        accumulate(a, g * mask)

    return node(np.where(mask, a.data, 0.0), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics for operands of ndim >= 2; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2; use matvec/dot")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        accumulate(a, _unbroadcast(ga, a.data.shape))
        accumulate(b, _unbroadcast(gb, b.data.shape))

    return node(np.matmul(a.data, b.data), (a, b), bw)


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """(r, c) @ (c,) -> (r,)."""
    m, v = as_tensor(m), as_tensor(v)

    def bw(g):
        accumulate(m, np.outer(g, v.data))
        accumulate(v, m.data.T @ g)

    return node(m.data @ v.data, (m, v), bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return node(np.dot(a.data, b.data), (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def bw(g):
        accumulate(a, np.swapaxes(g, -1, -2))

    return node(np.swapaxes(a.data, -1, -2), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return node(np.sum(a.data), (a,), bw)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""
    a = as_tensor(a)

    def bw(g):
        accumulate(a, np.broadcast_to(g[..., None], a.data.shape).copy())

    return node(np.sum(a.data, axis=-1), (a,), bw)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-d tensor: (n, d) -> (d,)."""
    a = as_tensor(a)
    n = a.data.shape[0]

    def bw(g):
        accumulate(a, np.broadcast_to(g / n, a.data.shape).copy())

    return node(np.mean(a.data, axis=0), (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along axis 0."""
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, sz in zip(parts, sizes):
            accumulate(p, g[off:off + sz])
            off += sz

    return node(np.concatenate([p.data for p in parts], axis=0), parts, bw)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors into a matrix, one per row."""
    parts = [as_tensor(p) for p in parts]

    def bw(g):
        for i, p in enumerate(parts):
            accumulate(p, g[i])

    return node(np.stack([p.data for p in parts], axis=0), parts, bw)


def softmax_rows(m: Tensor, temperature: float) -> Tensor:
    """Row softmax of m / temperature over the last axis.

    Subtracts the row max before exponentiating; at temperature 0.02 the raw
    exponentials overflow for inputs of ordinary size.
    """
    m = as_tensor(m)
    tau = float(temperature)
    if not tau > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = m.data / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        # d softmax(x/tau): (g - <g, y>) * y / tau rowwise
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        accumulate(m, (g - inner) * out_data / tau)

    return node(out_data, (m,), bw)


def l2_normalize(v: Tensor) -> Tensor:
    """Normalize along the last axis to unit Euclidean norm.

    Raises DegenerateInputError when any slice has norm <= 1e-12.
    """
    v = as_tensor(v)
    norms = np.linalg.norm(v.data, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateInputError("cannot normalize: norm below 1e-12")
    out_data = v.data / norms

    def bw(g):
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        accumulate(v, (g - inner * out_data) / norms)

    return node(out_data, (v,), bw)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` after a broadcasting forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar `f` at `x`, coordinate by
    coordinate: (f(x + h e_k) - f(x - h e_k)) / (2h)."""
    x = np.array(x, dtype=np.float64, order="C")  # private copy, perturbed in place
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + h
        fp = float(f(x))
        xf[k] = orig - h
        fm = float(f(x))
        xf[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {k}")
        flat[k] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    max_abs_error: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max_rel={self.max_rel_error:.3e} "
                f"max_abs={self.max_abs_error:.3e} worst_index={self.worst_index}")


def check_gradients(analytic: np.ndarray, numeric: np.ndarray,
                    rtol: float = 1e-4, atol: float = 1e-7) -> GradCheckReport:
    """Compare gradients elementwise: pass iff
    |a_k - n_k| <= atol + rtol * max(|a_k|, |n_k|) for every k."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {n.shape}")
    diff = np.abs(a - n)
    bound = atol + rtol * np.maximum(np.abs(a), np.abs(n))
    # violation ratio picks the worst coordinate; rel error is reported raw
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, diff / bound, np.where(diff > 0, np.inf, 0.0))
        denom = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(denom > 0, diff / denom, 0.0)
    worst = int(np.argmax(ratio)) if ratio.size else 0
    return GradCheckReport(
        passed=bool(np.all(diff <= bound)),
        max_rel_error=float(np.max(rel)) if rel.size else 0.0,
        worst_index=worst,
        max_abs_error=float(np.max(diff)) if diff.size else 0.0,
    )
