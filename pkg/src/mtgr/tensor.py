"""Minimal dense tensors with reverse-mode gradients.

Every value is an ``np.ndarray`` wrapped in :class:`Tensor`. Ops record their
parents and a backward closure; :func:`grad` walks the recorded graph once in
reverse topological order. Only the primitives the encoder needs exist here.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradContractError(ValueError):
    """grad() called on a non-scalar output or on a non-leaf parameter."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Toggle the eager per-op NaN/Inf check (on by default)."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        _op: str = "leaf",
    ) -> None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float64, np.float32):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = _op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other) -> bool:  # identity semantics, tensors are dict keys
        return self is other

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _make(out: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NumericError(f"{op} produced non-finite values from finite inputs")
        raise NumericError(f"non-finite input reached {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out, _op=op)
    return Tensor(out, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product. A plain ndarray or scalar operand is a constant."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        out = a.data * c

        def backward_const(g):
            return (_unbroadcast(g * c, a.shape),)

        return _make(out, (a,), backward_const, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _make(out, (x,), backward, "silu")


# ----------------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``x`` along axis 0; repeated indices accumulate on backward."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (gx,)

    return _make(out, (x,), backward, "take")


def scatter_rows(n_rows: int, parts: Sequence[Tuple[Tensor, np.ndarray]]) -> Tensor:
    """Place the rows of each source tensor at the given row positions of a zero matrix.

    Row positions across all parts must be distinct.
    """
    if not parts:
        raise DimensionError("scatter_rows needs at least one part")
    width = parts[0][0].shape[1:]
    out = np.zeros((n_rows,) + width, dtype=parts[0][0].data.dtype)
    idxs = []
    for src, idx in parts:
        idx = np.asarray(idx, dtype=np.int64)
        if src.shape[1:] != width or src.shape[0] != idx.shape[0]:
            raise DimensionError(f"scatter_rows part shape {src.shape} vs {len(idx)} rows of width {width}")
        out[idx] = src.data
        idxs.append(idx)

    def backward(g):
        return tuple(g[idx] for idx in idxs)

    return _make(out, tuple(p[0] for p in parts), backward, "scatter_rows")


# ----------------------------------------------------------------------------
# reductions, normalization, losses
# ----------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


def normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize over the last axis: (x - mean) / sqrt(var + eps), biased variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n) * inv
        return (gx,)

    return _make(xhat, (x,), backward, "normalize")


def layer_norm(x: Tensor, gamma, beta, eps: float = 1e-6) -> Tensor:
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise DimensionError(f"layer_norm affine width {gamma.shape}/{beta.shape} vs input {x.shape}")
    return add(mul(normalize(x, eps), gamma), beta)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy, computed stably from logits."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (_sigmoid(z) - y),)

    return _make(out, (logits,), backward, "bce")


# ----------------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------------


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, params: Iterable[Tensor]) -> Dict[Tensor, np.ndarray]:
    """Exact reverse-mode gradients of a scalar ``output`` w.r.t. leaf ``params``.

    Parameters the output does not depend on receive zero gradients.
    """
    params = list(params)
    if output.data.size != 1:
        raise GradContractError(f"grad() needs a scalar output, got shape {output.shape}")
    for p in params:
        if not p.is_leaf:
            raise GradContractError("grad() parameters must be leaf tensors")
    grads: Dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topological(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            if node._parents:
                del grads[id(node)]
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


@dataclass
class GradCheckReport:
    """Per-parameter normwise relative error between analytic and numeric gradients."""

    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __len__(self) -> int:
        return len(self.errors)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Mapping[str, Tensor]],
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare :func:`grad` against central differences, coordinate by coordinate.

    ``f`` rebuilds the graph from the current values of ``params`` on every call;
    the check perturbs ``param.data`` in place and restores it.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = dict(params) if isinstance(params, Mapping) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)
    }
    report = GradCheckReport()
    if not named:
        return report
    analytic = grad(f(), named.values())
    with finite_checks(False):
        for name, p in named.items():
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * step)
            report.errors[name] = relative_error(analytic[p], numeric)
    return report
