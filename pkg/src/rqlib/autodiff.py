"""Dense f64 tensors with tape-based reverse-mode differentiation.

Only first-order gradients are supported. Operations record a backward
closure on the active tape; ``Tape.backward`` replays the closures in
reverse recording order, accumulating gradients additively into each
tensor's ``grad`` buffer. All arithmetic is 64-bit floating point.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    DivergenceError,
    EvaluationError,
    InvalidMaskError,
    ValidationError,
)

__all__ = [
    "Tensor",
    "Tape",
    "recording",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "embedding",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "cross_entropy_soft",
    "dropout",
    "sum_all",
    "mean_all",
    "AdamW",
    "grad_check",
]


class Tensor:
    """Immutable-by-convention dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != value shape {self.data.shape}")
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations for reverse traversal."""

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._nodes.append(backward_fn)

    def backward(self, root: Tensor) -> None:
        """Seed the root gradient with ones and replay nodes in reverse."""
        if root.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {root.shape}")
        root.accumulate_grad(np.ones_like(root.data))
        for node in reversed(self._nodes):
            node()

    def clear(self) -> None:
        self._nodes.clear()


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active tape for ops executed inside the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    """Register a node that forwards out.grad to the closure when set."""
    if _ACTIVE_TAPE is None or not out.requires_grad:
        return

    def node():
        if out.grad is not None:
            backward_fn(out.grad)

    _ACTIVE_TAPE.record(node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    _record(out, backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)

    def backward(g):
        a.accumulate_grad(g * s)

    _record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(ga if ga.shape == a.shape else _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                # stacked rows against a shared weight: one flat gemm instead
                # of a batch of thin ones
                k, n = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                b.accumulate_grad(gb)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b.accumulate_grad(gb if gb.shape == b.shape else _unbroadcast(gb, b.shape))

    _record(out, backward)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    _record(out, backward)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes), requires_grad=a.requires_grad)

    def backward(g):
        a.accumulate_grad(np.transpose(g, inv))

    _record(out, backward)
    return out


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        requires_grad=any(p.requires_grad for p in parts),
    )
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(sl)])

    _record(out, backward)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl], requires_grad=a.requires_grad)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a.accumulate_grad(full)

    _record(out, backward)
    return out


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather from a 2-d table; backward scatter-adds."""
    idx = np.asarray(indices)
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table.accumulate_grad(gt)

    _record(out, backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad)

    def backward(g):
        a.accumulate_grad(np.full_like(a.data, float(g)))

    _record(out, backward)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean(), requires_grad=a.requires_grad)

    def backward(g):
        a.accumulate_grad(np.full_like(a.data, float(g) / n))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False become exact 0.

    ``mask`` is a boolean array broadcastable to ``x.shape`` with True marking
    valid entries. Computed with max-subtraction for stability. A row with no
    valid entry raises ``InvalidMaskError``.
    """
    if mask is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not valid.any(axis=-1).all():
        raise InvalidMaskError("softmax row with every entry masked")
    shifted = np.where(valid, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(shifted), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, requires_grad=x.requires_grad)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        x.accumulate_grad(p * (g - dot))

    _record(out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data,
                 requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad)

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dvar = (gx * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
            dmu = -(gx.sum(axis=-1, keepdims=True)) * inv + dvar * (-2.0 / n) * xc.sum(
                axis=-1, keepdims=True
            )
            x.accumulate_grad(gx * inv + dvar * 2.0 * xc / n + dmu / n)

    _record(out, backward)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    sq = x.data * x.data
    u = _GELU_C * (x.data + _GELU_A * sq * x.data)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t), requires_grad=x.requires_grad)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        x.accumulate_grad(g * d)

    _record(out, backward)
    return out


def cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Mean over rows of -sum_k target_k * log softmax(logits)_k.

    ``target`` is a probability array (same shape as logits); each row must be
    non-negative and sum to 1 within 1e-9. Targets are treated as constants.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} != logits shape {logits.shape}")
    if (t < 0).any():
        raise ValidationError("target distribution has negative entries")
    sums = t.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-9):
        raise ValidationError("target distribution rows must sum to 1 within 1e-9")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = max(1, logits.size // logits.shape[-1])
    out = Tensor((-(t * logp).sum(axis=-1)).sum() / rows, requires_grad=logits.requires_grad)

    def backward(g):
        p = np.exp(logp)
        logits.accumulate_grad((p - t) * (float(g) / rows))

    _record(out, backward)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, constant(keep))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled multiplicative weight decay and bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the accumulated ``grad`` buffers."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter '{name}'")
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|,
    |numeric|). ``f`` must be deterministic and produce a finite scalar.
    """
    if h <= 0:
        raise ValidationError("step size h must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    tape = Tape()
    with recording(tape):
        y = f(leaf)
    if y.size != 1:
        raise DimensionError(f"grad_check target must be scalar, got {y.shape}")
    if not np.isfinite(y.data).all():
        raise EvaluationError("function value is not finite")
    tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.copy().reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise EvaluationError("function value is not finite at perturbed point")
        num_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
