"""Dense tensors with reverse-mode autodiff on an explicit tape.

Deliberately small: only the operations the encoder and its heads need,
each with a hand-written backward rule. Dropout is the one nonstandard
piece. Its forward always applies the sampled mask; its backward either
applies the same mask (STANDARD) or passes the upstream gradient through
untouched (STRAIGHT_THROUGH). Everything else is textbook.

Arrays are float32 by default; float64 is supported end to end so that
finite-difference checks run at full precision. Every operation verifies
its output is finite and names itself in the error if not.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .seeds import derive_seed

__all__ = [
    "DropoutMode",
    "GradCheckError",
    "GradCheckReport",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "TapeError",
    "Tensor",
    "add",
    "add_bias",
    "backward",
    "bmm",
    "cross_entropy_mean",
    "dropout",
    "dropout_backward",
    "gather_rows",
    "gelu",
    "grad_check",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "permute",
    "reshape",
    "scale",
    "softmax_rows",
    "sum_all",
    "transpose",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# Test hook: a nonzero value skews the matmul backward rule by that relative
# amount, so a finite-difference check must report it. Never set in real runs.
_BACKWARD_FAULT = 0.0


class ShapeError(ValueError):
    """Operands have incompatible shapes or dtypes."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """The tape is being used in a way its invariants forbid."""


class GradCheckError(RuntimeError):
    """The finite-difference oracle cannot be trusted (or was misused)."""


class DropoutMode:
    """How dropout treats gradients on the way back.

    STANDARD applies the saved mask, scaled by 1/(1-p), in the backward
    pass. STRAIGHT_THROUGH ignores the mask and hands the upstream
    gradient to the input unchanged; the forward pass is identical in
    both modes.
    """

    STANDARD = "standard"
    STRAIGHT_THROUGH = "straight-through"

    ALL = (STANDARD, STRAIGHT_THROUGH)


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape construction inside the block (evaluation mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """A dense array plus the bookkeeping backward() needs."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _node(op, data, parents, backward_fn) -> Tensor:
    _check_finite(op, data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, tuple(parents), backward_fn)
    return Tensor(data, False, op)


def _same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


class Parameter:
    """A named trainable leaf."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value: np.ndarray):
        arr = np.asarray(value)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"parameter {name}: dtype {arr.dtype} is not a float type")
        self.name = name
        self.tensor = Tensor(arr, requires_grad=True, op=f"param:{name}")

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        # Unreached parameters read as zero gradient.
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def clear_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _same_dtype("add", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape}")
    return _node("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-c bias vector to every row of a [..., c] tensor."""
    _same_dtype("add_bias", x, b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape}")

    def backward_fn(g):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes)

    return _node("add_bias", x.data + b.data, (x, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _same_dtype("mul", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape}")
    return _node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = x.data.dtype.type(s)
    return _node("scale", x.data * s, (x,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] @ [k,n] -> [m,n]."""
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape}")

    def backward_fn(g):
        da = g @ b.data.T
        if _BACKWARD_FAULT:
            da = da * (1.0 + _BACKWARD_FAULT)
        return da, a.data.T @ g

    return _node("matmul", a.data @ b.data, (a, b), backward_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [n,r,k] @ [n,k,c] -> [n,r,c]."""
    _same_dtype("bmm", a, b)
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise ShapeError(f"bmm: shapes {a.data.shape} and {b.data.shape}")

    def backward_fn(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _node("bmm", a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    """2-d transpose."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: shape {x.data.shape}")
    return _node("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Reorder axes."""
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: axes {axes} for shape {x.data.shape}")
    inverse = tuple(np.argsort(axes))
    return _node(
        "permute",
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Row-major reshape (element count preserved)."""
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: {x.data.shape} -> {shape}")
    return _node("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; order preserved, duplicates allowed."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for {x.data.shape[0]} rows "
            f"(min {idx.min()}, max {idx.max()})"
        )

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)  # duplicate indices accumulate
        return (dx,)

    return _node("gather_rows", x.data[idx], (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    return _node(
        "sum_all",
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.data.shape).copy(),),
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node("softmax_rows", out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation of a [r,c] tensor with affine gain/bias."""
    _same_dtype("layer_norm", x, gain, bias)
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != gain.data.shape:
        raise ShapeError(
            f"layer_norm: shapes {x.data.shape}, {gain.data.shape}, {bias.data.shape}"
        )
    dtype = x.data.dtype
    eps = dtype.type(eps)
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node("layer_norm", out, (x, gain, bias), backward_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data.astype(np.float64, copy=False)
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = (d * cdf).astype(x.data.dtype)

    def backward_fn(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT2PI
        return ((cdf + d * pdf).astype(x.data.dtype) * g,)

    return _node("gelu", out, (x,), backward_fn)


def dropout(
    x: Tensor,
    p: float,
    rng: np.random.Generator | None,
    training: bool,
    mode: str = DropoutMode.STANDARD,
) -> Tensor:
    """Zero each element with probability p; survivors scaled by 1/(1-p).

    Returns x itself when not training or p == 0, so inactive dropout
    leaves the tape untouched. The sampled mask is saved on the node;
    `mode` decides what the backward rule does with it.
    """
    if mode not in DropoutMode.ALL:
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p={p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: active dropout needs an rng")
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    out = x.data * (mask / x.data.dtype.type(1.0 - p))

    def backward_fn(g):
        return (dropout_backward(g, mask, p, mode),)

    return _node("dropout", out, (x,), backward_fn)


def dropout_backward(upstream: np.ndarray, mask: np.ndarray, p: float, mode: str) -> np.ndarray:
    """Route an upstream gradient back through a dropout site.

    STANDARD applies the saved mask with the 1/(1-p) rescale; the result
    is exactly `upstream * (mask / (1-p))`. STRAIGHT_THROUGH returns the
    upstream gradient unchanged.
    """
    if mode == DropoutMode.STRAIGHT_THROUGH:
        return upstream
    if mode != DropoutMode.STANDARD:
        raise ValueError(f"dropout_backward: unknown mode {mode!r}")
    if mask.shape != upstream.shape:
        raise TapeError(
            f"dropout_backward: mask shape {mask.shape} does not match upstream {upstream.shape}"
        )
    return upstream * (mask / upstream.dtype.type(1.0 - p))


def cross_entropy_mean(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy of [n,c] logits against integer targets.

    Rows whose target equals ignore_index contribute nothing; if every
    row is ignored (or n == 0) the result is a constant zero with no
    gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean: logits shape {logits.data.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy_mean: targets shape {t.shape} for logits {logits.data.shape}"
        )
    n, c = logits.data.shape
    valid = t != ignore_index
    if valid.any():
        bad = t[valid]
        if bad.min() < 0 or bad.max() >= c:
            raise IndexError(
                f"cross_entropy_mean: target out of range [0,{c}) (min {bad.min()}, max {bad.max()})"
            )
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.asarray(0.0, dtype=logits.data.dtype), op="cross_entropy_mean:empty")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    log_z = np.log(z) + m
    rows = np.arange(n)
    per_row = log_z[:, 0] - x[rows, t.clip(min=0)]
    loss = np.asarray(per_row[valid].sum() / n_valid, dtype=x.dtype)

    def backward_fn(g):
        probs = e / z
        d = probs
        d[rows[valid], t[valid]] -= 1.0
        d[~valid] = 0.0
        return (d * (g / x.dtype.type(n_valid)),)

    return _node("cross_entropy_mean", loss, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every reachable leaf."""
    if root.data.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return  # constant graph: nothing reachable, all grads stay zero

    # Iterative post-order: recursion would overflow on long tapes.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        if node.grad is None:
            raise TapeError(f"backward: node {node.op} has no accumulated gradient")
        grads = node.backward_fn(node.grad)
        if len(grads) != len(node.parents):
            raise TapeError(f"backward: {node.op} returned {len(grads)} gradients")
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise TapeError(
                    f"backward: {node.op} gradient shape {g.shape} "
                    f"does not match parent {parent.data.shape}"
                )
            # First contribution may alias the upstream array; later ones
            # must allocate so we never mutate a gradient another node owns.
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst-case relative error between analytic and numeric gradients."""

    max_rel_error: float
    worst_param: str
    worst_coord: int
    per_param: dict[str, float] = field(default_factory=dict)
    audited: int = 0
    below_resolution: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int = 64,
) -> GradCheckReport:
    """Compare backward() against central finite differences.

    loss_fn must rebuild the forward graph from the current parameter
    values on every call and must be deterministic: it is invoked twice
    up front and a bitwise mismatch raises GradCheckError. Relative
    error uses max(|analytic|, |numeric|, 1e-8) as the denominator.

    The difference (f(θ+eps)−f(θ−eps))/(2·eps) carries rounding noise of
    about spacing(|f|)/eps in gradient units, so a coordinate whose true
    gradient sits below spacing(|f|)/(eps·tol) cannot be resolved by
    this oracle at all: noise alone breaches tol against the 1e-8
    denominator floor. Such coordinates (both |analytic| and |numeric|
    under the bound) are counted but excluded from the error maximum.
    Candidates are the max_coords_per_param largest-|analytic|
    coordinates of each parameter, which concentrates the audit on the
    gradient mass; a wrongly-zero analytic gradient still surfaces
    through a large numeric value at whatever coordinates are checked.
    """
    with no_grad():
        f_a = np.asarray(loss_fn().data).copy()
        f_b = np.asarray(loss_fn().data).copy()
    if f_a.tobytes() != f_b.tobytes():
        raise GradCheckError(
            "loss_fn is not deterministic under a fixed seed; finite differences are invalid"
        )
    resolution = float(np.spacing(max(1.0, abs(float(f_a)))) / (eps * tol))

    for p in params:
        p.clear_grad()
    root = loss_fn()
    backward(root)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    worst_param = ""
    worst_coord = -1
    audited = 0
    below_resolution = 0
    per_param: dict[str, float] = {}
    for p in params:
        size = p.value.size
        if size == 0:
            per_param[p.name] = 0.0
            continue
        a_flat = analytic[p.name].reshape(-1)
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            ranked = np.argsort(-np.abs(a_flat), kind="stable")
            coords = ranked[:max_coords_per_param]
        flat = p.value.reshape(-1)
        p_worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[i])
            if max(abs(a), abs(numeric)) < resolution:
                below_resolution += 1
                continue
            audited += 1
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > p_worst:
                p_worst = rel
            if rel > worst:
                worst, worst_param, worst_coord = rel, p.name, int(i)
        per_param[p.name] = p_worst
    return GradCheckReport(worst, worst_param, worst_coord, per_param, audited, below_resolution)


def hash_name(name: str) -> int:
    """Stable small integer for keying a stream off a parameter name."""
    return derive_seed(0, name) % (2**31)
