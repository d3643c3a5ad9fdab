"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy buffers (float32 for training throughput, float64 for
oracle-grade checks). Differentiable ops record onto the active Tape in
execution order; Tape.backward replays that record in reverse, which is a
valid reverse-topological order, accumulating exact chain-rule gradients
into the leaves.

Broadcasting is deliberately restricted: binary ops accept equal shapes or a
right operand matching the left operand's trailing axes (bias-style), and
matmul accepts a stacked left operand against a 2-D right operand or two
stacks with identical leading axes. Everything else raises ShapeError.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Dense numeric array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: _Node) -> None:
        self._nodes.append(node)
        for t in node.inputs + (node.out,):
            self._tensors.setdefault(id(t), t)

    def backward(self, loss: Tensor) -> None:
        """Populate leaf grads with d(loss)/d(leaf); repeat calls accumulate."""
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._tensors:
            raise ContractError("loss was not produced through this tape")
        # Traversal-local gradients keep intermediate state out of the leaves,
        # so repeated backward calls accumulate cleanly.
        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g_out = local.get(id(node.out))
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None:
                    continue
                prev = local.get(id(inp))
                local[id(inp)] = g if prev is None else prev + g
        for t in self._tensors.values():
            if not t.requires_grad:
                continue
            g = local.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g

    def clear(self) -> None:
        """Drop the recorded ops and reset grads of every tensor they touched."""
        for t in self._tensors.values():
            t.grad = None
        self._nodes.clear()
        self._tensors.clear()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Backward through the tape that recorded ``loss``."""
    if loss._tape is None:
        raise ContractError("loss has no recording tape; run the forward pass inside a Tape")
    loss._tape.backward(loss)


def _finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output of {op}")


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _finite(data, op)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape._record(_Node(out, inputs, backward_fn))
    return out


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


def _trailing_match(a: Tensor, b: Tensor) -> bool:
    return b.data.ndim <= a.data.ndim and a.shape[a.data.ndim - b.data.ndim :] == b.shape


def _sum_to_trailing(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.data.ndim == 2:
        data = a.data @ b.data

        def bwd(g):
            da = g @ b.data.T
            db = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return da, db

        return _make("matmul", data, (a, b), bwd)
    if a.data.ndim == b.data.ndim and a.shape[:-2] == b.shape[:-2]:
        data = a.data @ b.data

        def bwd(g):
            return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

        return _make("matmul", data, (a, b), bwd)
    raise ShapeError(f"unsupported matmul operand ranks: {a.shape} @ {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g))
    if _trailing_match(a, b):
        return _make(
            "add", a.data + b.data, (a, b), lambda g: (g, _sum_to_trailing(g, b.shape))
        )
    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    if a.shape == b.shape:
        return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if _trailing_match(a, b):
        return _make(
            "mul",
            a.data * b.data,
            (a, b),
            lambda g: (g * b.data, _sum_to_trailing(g * a.data, b.shape)),
        )
    raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        "transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (g.transpose(inv),),
    )


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    _check_dtypes("concat", *parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", data, parts, bwd)


def broadcast_batch(a: Tensor, n: int) -> Tensor:
    """Stack ``a`` n times along a new leading axis."""
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make("broadcast_batch", data, (a,), lambda g: (g.sum(axis=0),))


def take(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Select one index along ``axis``, dropping that axis."""
    data = np.ascontiguousarray(np.take(a.data, index, axis=axis))

    def bwd(g):
        full = np.zeros_like(a.data)
        sel = [slice(None)] * a.data.ndim
        sel[axis] = index
        full[tuple(sel)] = g
        return (full,)

    return _make("take", data, (a,), bwd)


def layernorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make("layernorm", y, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax", y, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation, with its exact derivative."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _make("gelu", y, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    return _make(
        "sum_all", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),),
    )


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of row logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels outside [0, {k})")
    if not 0.0 <= label_smoothing < 1.0:
        raise ContractError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    target = np.full((n, k), label_smoothing / k, dtype=logits.data.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    loss = np.asarray(-(target * logp).sum() / n, dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logp)
        return ((p - target) * (g / n),)

    return _make("cross_entropy", loss, (logits,), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (batch, heads, tokens, width) stacks."""
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 4:
        raise ShapeError(f"attention expects matching 4-D stacks, got {q.shape}/{k.shape}/{v.shape}")
    width = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(width))
    return matmul(softmax(scores), v)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Per-parameter comparison of backward grads against central differences."""

    def __init__(self, tol: float):
        self.tol = tol
        self.entries: dict[str, float] = {}

    def record(self, name: str, max_rel_err: float) -> None:
        self.entries[name] = max_rel_err

    @property
    def max_rel_err(self) -> float:
        return max(self.entries.values()) if self.entries else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def failures(self) -> list[str]:
        return [n for n, e in self.entries.items() if e > self.tol]

    def __repr__(self) -> str:
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, passed={self.passed})"


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare backward gradients of ``fn()`` against central finite differences.

    ``fn`` must rebuild the scalar loss from ``params`` on every call; the
    finite-difference evaluations run outside any tape.
    """
    with Tape() as tape:
        loss = fn()
        if loss.data.size != 1:
            raise ContractError("grad_check requires a scalar-valued fn")
        tape.backward(loss)
        analytic = {
            name: np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True)
            for name, p in params.items()
        }
        tape.clear()

    report = GradCheckReport(tol)
    for name, p in params.items():
        # .flat writes through non-contiguous views (sliced parameters)
        flat = p.data.flat
        fd = np.zeros(p.data.size, dtype=p.data.dtype)
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.abs(a), np.abs(fd))
        err = np.abs(a - fd)
        rel = np.where(denom < 1e-8, err, err / np.maximum(denom, 1e-300))
        report.record(name, float(rel.max()) if rel.size else 0.0)
    return report
