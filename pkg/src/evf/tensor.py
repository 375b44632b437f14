"""Dense float64 tensors with reverse-mode differentiation.

Deliberately small: row-major numpy storage, explicit shape checks, no
implicit broadcasting. Each differentiable operation records its inputs and
one vector-Jacobian closure per input; :func:`backward` walks the recording
once in reverse topological order and accumulates gradients into leaves.

Gradient flow can be cut per leaf (``requires_grad=False``), which is how
frozen parameters are excluded from both the walk and the update step.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray

# Fixed tanh-approximation constants for GELU:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _as_float64(values) -> Array:
    return np.ascontiguousarray(values, dtype=np.float64)


class Tensor:
    """A value node in the compute graph.

    ``data`` is always float64 and C-contiguous. Tensors built by library
    operations keep references to their inputs; leaves keep none. Leaf
    construction rejects non-finite values so NaN/Inf cannot enter a graph
    through inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, values, requires_grad: bool = False):
        data = _as_float64(values)
        if not np.all(np.isfinite(data)):
            raise NumericError("leaf tensor contains non-finite values")
        self.data = data
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()

    @classmethod
    def _from_op(
        cls,
        data: Array,
        parents: tuple["Tensor", ...],
        vjps: tuple[Callable[[Array], Array], ...],
    ) -> "Tensor":
        out = object.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjps = vjps
        else:
            out._parents = ()
            out._vjps = ()
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A leaf tensor with persistent gradient storage and a freeze flag.

    Frozen parameters (``trainable=False``) are skipped by backward and by
    the optimizer, so their bytes never change during training.
    """

    __slots__ = ("trainable",)

    def __init__(self, values, trainable: bool = True):
        super().__init__(values, requires_grad=bool(trainable))
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = self.trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values) -> None:
        """Replace the stored value; shape must be preserved."""
        arr = _as_float64(values)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: shapes {arr.shape} and {self.data.shape} differ")
        if not np.all(np.isfinite(arr)):
            raise NumericError("assign: non-finite parameter value")
        self.data = arr


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _check_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"{op}: expected a 2-d tensor, got shape {t.data.shape}")


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), (lambda g: -g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_shape("mul", a, b)
    return Tensor._from_op(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scale: non-finite scalar")
    return Tensor._from_op(a.data * c, (a,), (lambda g: g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("add_scalar: non-finite scalar")
    return Tensor._from_op(a.data + c, (a,), (lambda g: g,))


def add_constant(a: Tensor, const: Array) -> Tensor:
    """Add a non-differentiable constant array (e.g. an attention mask)."""
    const = np.asarray(const, dtype=np.float64)
    if const.shape != a.data.shape:
        raise ShapeError(f"add_constant: shapes {a.data.shape} and {const.shape} differ")
    return Tensor._from_op(a.data + const, (a,), (lambda g: g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.data.shape} @ {b.data.shape}")
    return Tensor._from_op(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return Tensor._from_op(np.ascontiguousarray(a.data.T), (a,), (lambda g: g.T,))


def sum_all(a: Tensor) -> Tensor:
    return Tensor._from_op(
        np.asarray(a.data.sum()),
        (a,),
        (lambda g: np.full(a.data.shape, float(g)),),
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ContractError("mean_all: empty tensor")
    return Tensor._from_op(
        np.asarray(a.data.mean()),
        (a,),
        (lambda g: np.full(a.data.shape, float(g) / n),),
    )


def col_mean(a: Tensor) -> Tensor:
    """Column means of a 2-d tensor; returns a 1-d tensor of length k."""
    _check_2d("col_mean", a)
    n = a.data.shape[0]
    if n == 0:
        raise ContractError("col_mean: empty tensor")
    return Tensor._from_op(
        a.data.mean(axis=0),
        (a,),
        (lambda g: np.tile(g / n, (n, 1)),),
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-d bias vector to every row of a 2-d tensor."""
    _check_2d("add_bias", x)
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"add_bias: bias shape {b.data.shape} does not match rows of {x.data.shape}")
    return Tensor._from_op(x.data + b.data, (x, b), (lambda g: g, lambda g: g.sum(axis=0)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by scalar s[i]; s has shape (n, 1)."""
    _check_2d("scale_rows", x, s)
    if s.data.shape != (x.data.shape[0], 1):
        raise ShapeError(f"scale_rows: scale shape {s.data.shape} does not match rows of {x.data.shape}")
    return Tensor._from_op(
        x.data * s.data,
        (x, s),
        (lambda g: g * s.data, lambda g: (g * x.data).sum(axis=1, keepdims=True)),
    )


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_cols", x)
    d = x.data.shape[1]
    if not (0 <= start < stop <= d):
        raise ContractError(f"slice_cols: bounds [{start}, {stop}) invalid for width {d}")

    def vjp(g: Array) -> Array:
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return out

    return Tensor._from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), (vjp,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_cols: no tensors given")
    _check_2d("concat_cols", *parts)
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ ({p.data.shape} vs {parts[0].data.shape})")
    data = np.concatenate([p.data for p in parts], axis=1)
    vjps = []
    start = 0
    for p in parts:
        stop = start + p.data.shape[1]
        vjps.append(lambda g, a=start, b=stop: g[:, a:b])
        start = stop
    return Tensor._from_op(data, tuple(parts), tuple(vjps))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows: no tensors given")
    _check_2d("concat_rows", *parts)
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts differ ({p.data.shape} vs {parts[0].data.shape})")
    data = np.concatenate([p.data for p in parts], axis=0)
    vjps = []
    start = 0
    for p in parts:
        stop = start + p.data.shape[0]
        vjps.append(lambda g, a=start, b=stop: g[a:b])
        start = stop
    return Tensor._from_op(data, tuple(parts), tuple(vjps))


def _check_row_index(op: str, idx, n: int) -> Array:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError(f"{op}: index must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"{op}: index out of range [0, {n})")
    return idx


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-d tensor; repeats allowed (gradients accumulate)."""
    _check_2d("take_rows", x)
    idx = _check_row_index("take_rows", idx, x.data.shape[0])

    def vjp(g: Array) -> Array:
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return out

    return Tensor._from_op(x.data[idx], (x,), (vjp,))


def scatter_rows(x: Tensor, idx, n_rows: int) -> Tensor:
    """Place rows of x at positions idx of an otherwise-zero (n_rows, d) tensor."""
    _check_2d("scatter_rows", x)
    idx = _check_row_index("scatter_rows", idx, n_rows)
    if idx.size != x.data.shape[0]:
        raise ContractError(f"scatter_rows: {idx.size} indices for {x.data.shape[0]} rows")
    if np.unique(idx).size != idx.size:
        raise ContractError("scatter_rows: duplicate row indices")
    data = np.zeros((n_rows, x.data.shape[1]), dtype=np.float64)
    data[idx] = x.data
    return Tensor._from_op(data, (x,), (lambda g: g[idx],))


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def vjp(g: Array) -> Array:
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du)

    return Tensor._from_op(data, (x,), (vjp,))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    _check_2d("softmax_rows", x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g: Array) -> Array:
        inner = (g * p).sum(axis=1, keepdims=True)
        return p * (g - inner)

    return Tensor._from_op(p, (x,), (vjp,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by an affine map.

    gain and bias are 1-d vectors of the row width. The backward pass uses
    the closed-form row formulas rather than composing primitive ops.
    """
    _check_2d("layer_norm", x)
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def vjp_x(g: Array) -> Array:
        gx = g * gain.data
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        return inv * (gx - m1 - xhat * m2)

    return Tensor._from_op(
        data,
        (x, gain, bias),
        (vjp_x, lambda g: (g * xhat).sum(axis=0), lambda g: g.sum(axis=0)),
    )


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    _check_2d("cross_entropy", logits)
    n, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ContractError(f"cross_entropy: targets shape {targets.shape} does not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"cross_entropy: target id out of range [0, {v})")
    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(n)
    data = np.asarray(-logp[rows, targets].mean())
    p = e / denom

    def vjp(g: Array) -> Array:
        out = p.copy()
        out[rows, targets] -= 1.0
        return out * (float(g) / n)

    return Tensor._from_op(data, (logits,), (vjp,))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    The loss must hold exactly one element. Each recorded node is visited
    once, in reverse topological order; branches that do not require
    gradients are never entered.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                acc = grads.get(id(parent))
                if acc is None:
                    # Copy: vjp outputs may alias g or views of it.
                    grads[id(parent)] = np.array(contrib, dtype=np.float64)
                else:
                    acc += contrib
        else:
            if isinstance(node, Parameter):
                if node.trainable:
                    node.grad = node.grad + g
            else:
                node.grad = np.array(g) if node.grad is None else node.grad + g
