"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation records its parents and a vector-Jacobian product (VJP) on
the output tensor. The VJPs are themselves written with differentiable
tensor operations, so a gradient computed with ``create_graph=True`` can be
differentiated once more; the training regularizers use this to push the
parameter gradient through an input gradient.

Two numeric precisions exist: ``"high"`` (float64), used by every oracle and
gradient check, and ``"standard"`` (float32).
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError, OracleError

PRECISIONS = {"high": np.float64, "standard": np.float32}

_dtype = np.float64
_grad_enabled = True


def set_precision(mode: str) -> None:
    global _dtype
    try:
        _dtype = PRECISIONS[mode]
    except KeyError:
        raise ConfigError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}") from None


def get_dtype():
    return _dtype


def precision_name(dtype) -> str:
    return "high" if np.dtype(dtype) == np.float64 else "standard"


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the dtype new tensors are created with."""
    global _dtype
    saved = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        _dtype = saved


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = saved


def no_grad():
    return _grad_mode(False)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    want = np.dtype(dtype or _dtype)
    if arr.dtype != want:
        arr = arr.astype(want)
    return arr


class Tensor:
    """A dense array with an optional gradient slot and a link into the tape.

    ``grad`` is accumulated by :meth:`backward` (it is never reset
    implicitly); use :func:`grad` for a functional, non-accumulating form.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple = ()
        self._vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- reductions and shape ------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def logsumexp(self, axis=-1, keepdims=False):
        return logsumexp(self, axis, keepdims)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def backward(self, grad_output=None, create_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if grad_output is None and self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor with no recorded operations")
        order = _topo_order([self])
        leaves = [n for n in order if n._vjp is None and n.requires_grad]
        grads = _run_backward([self], [grad_output], order, create_graph)
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            if not create_graph:
                g = g.detach()
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _result(data, parents: tuple, vjp, op: str) -> Tensor:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(g, sb) if needs[1] else None)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(neg(g), sb) if needs[1] else None)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(g * b, sa) if needs[0] else None,
            sum_to(g * a, sb) if needs[1] else None,
        )

    return _result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(g / b, sa) if needs[0] else None,
            sum_to(neg(g * a / (b * b)), sb) if needs[1] else None,
        )

    return _result(a.data / b.data, (a, b), vjp, "div")


def power(a, k) -> Tensor:
    """Elementwise ``a ** k`` for a constant exponent."""
    a = _lift(a)
    k = float(k)

    def vjp(g, needs):
        if k == 2.0:
            return (g * a * 2.0,)
        return (g * power(a, k - 1.0) * k,)

    return _result(a.data ** k, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _result(data, (a,), None, "exp")
    if out.requires_grad:
        out._vjp = lambda g, needs: (g * out,)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _result(data, (a,), lambda g, needs: (g / a,), "log")


def relu(a) -> Tensor:
    """Rectifier; the derivative at exactly 0 is taken to be 0."""
    a = _lift(a)
    mask = (a.data > 0).astype(a.data.dtype)

    def vjp(g, needs):
        return (g * Tensor(mask, dtype=mask.dtype),)

    return _result(a.data * mask, (a,), vjp, "relu")


# -- linear algebra and shape -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _result(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g, needs: (transpose(g, inverse),), "transpose")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _result(data, (a,), lambda g, needs: (sum_to(g, src),), "broadcast")


def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape``; the adjoint of broadcasting."""
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and src[lead + i] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    data = data.reshape(shape)
    return _result(data, (a,), lambda g, needs: (broadcast_to(g, src),), "sum_to")


def gather(a, index) -> Tensor:
    """Pick elements of the flattened ``a`` at integer positions ``index``."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.intp)
    src = a.shape
    return _result(
        a.data.reshape(-1)[index], (a,), lambda g, needs: (scatter_add(g, index, src),), "gather"
    )


def scatter_add(a, index, shape) -> Tensor:
    """Adjoint of :func:`gather`: sum entries of ``a`` into a zero array of ``shape``."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.intp)
    size = int(np.prod(shape))
    data = np.bincount(index.reshape(-1), weights=a.data.reshape(-1), minlength=size)
    data = data.astype(a.data.dtype).reshape(shape)
    return _result(data, (a,), lambda g, needs: (gather(g, index),), "scatter_add")


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer, type(None), type(Ellipsis))) for k in keys)


def getitem(a, key) -> Tensor:
    a = _lift(a)
    src = a.shape
    return _result(a.data[key], (a,), lambda g, needs: (embed(g, key, src),), "getitem")


def embed(a, key, shape) -> Tensor:
    """Place ``a`` at ``key`` inside zeros of ``shape``; adjoint of indexing."""
    a = _lift(a)
    data = np.zeros(shape, dtype=a.data.dtype)
    if _is_basic(key):
        data[key] += a.data
    else:
        np.add.at(data, key, a.data)
    return _result(data, (a,), lambda g, needs: (getitem(g, key),), "embed")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    n = len(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            key = (slice(None),) * ax + (i,)
            out.append(getitem(g, key) if need else None)
        return tuple(out)

    assert n > 0
    return _result(data, tuple(tensors), vjp, "stack")


# -- composites -----------------------------------------------------------

def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with the running max subtracted first."""
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    m = Tensor(a.data.max(axis=axes, keepdims=True), dtype=a.data.dtype)
    out = log(tsum(exp(a - m), axes, keepdims=True)) + m
    if not keepdims:
        out = reshape(out, tuple(n for i, n in enumerate(a.shape) if i not in axes))
    return out


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    return exp(a - logsumexp(a, axis, keepdims=True))


def log_softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    return a - logsumexp(a, axis, keepdims=True)


def pad2d(x, padding: int) -> Tensor:
    """Zero-pad the last two axes of ``x`` by ``padding`` on each side."""
    x = _lift(x)
    if padding == 0:
        return x
    *lead, h, w = x.shape
    key = (Ellipsis, slice(padding, padding + h), slice(padding, padding + w))
    return embed(x, key, (*lead, h + 2 * padding, w + 2 * padding))


@lru_cache(maxsize=128)
def _window_index(c: int, h: int, w: int, kh: int, kw: int, stride: int):
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    ci, ki, kj = (m.reshape(-1) for m in np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij"))
    oi, oj = (m.reshape(-1) for m in np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij"))
    rows = oi[:, None] * stride + ki[None, :]
    cols = oj[:, None] * stride + kj[None, :]
    index = ci[None, :] * (h * w) + rows * w + cols
    index.setflags(write=False)
    return index, oh, ow


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B x C x H x W, or C x H x W) with ``weight``.

    Implemented as a gather of input windows followed by a matrix product, so
    its adjoint (and the adjoint of that) come from the primitive ops.
    """
    x, weight = _lift(x), _lift(weight)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernels expect {cin}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d needs stride >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    x = pad2d(x, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    index, oh, ow = _window_index(c, hp, wp, kh, kw, stride)
    index = np.arange(b)[:, None, None] * (c * hp * wp) + index[None]
    cols = gather(x, index)
    out = matmul(reshape(cols, (b * oh * ow, c * kh * kw)), transpose(reshape(weight, (cout, c * kh * kw))))
    out = transpose(reshape(out, (b, oh, ow, cout)), (0, 3, 1, 2))
    if bias is not None:
        out = out + reshape(_lift(bias), (1, cout, 1, 1))
    if single:
        out = reshape(out, out.shape[1:])
    return out


def max_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = _lift(x)
    stride = stride or kernel
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"pool window {kernel} larger than input {h}x{w}")
    index, oh, ow = _window_index(1, h, w, kernel, kernel, stride)
    planes = np.arange(b * c).reshape(b, c, 1, 1) * (h * w)
    full = planes + index[None, None]
    vals = x.data.reshape(-1)[full]
    pick = vals.argmax(axis=-1)
    chosen = np.take_along_axis(full, pick[..., None], axis=-1)[..., 0]
    out = reshape(gather(x, chosen), (b, c, oh, ow))
    if single:
        out = reshape(out, out.shape[1:])
    return out


# -- the backward pass --------------------------------------------------------

def _topo_order(roots: Iterable[Tensor]) -> list:
    """Nodes reachable from ``roots`` through grad-requiring edges, parents first."""
    order, seen = [], set()
    stack = [(r, False) for r in roots if r.requires_grad]
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


def _run_backward(outputs, grad_outputs, order, create_graph) -> dict:
    grads: dict[int, Tensor] = {}
    for out, g in zip(outputs, grad_outputs):
        if g is None:
            if out.size != 1:
                raise ContractError(f"a grad_output is required for non-scalar output of shape {out.shape}")
            g = Tensor(np.ones(out.shape, dtype=out.data.dtype), dtype=out.data.dtype)
        else:
            g = _lift(g, out)
            if g.shape != out.shape:
                raise DimensionError(f"grad_output shape {g.shape} != output shape {out.shape}")
        grads[id(out)] = grads[id(out)] + g if id(out) in grads else g
    with _grad_mode(create_graph):
        for node in reversed(order):
            if node._vjp is None:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in node._parents)
            for parent, pg in zip(node._parents, node._vjp(g, needs)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    return grads


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list:
    """Gradients of ``outputs`` with respect to ``inputs`` without touching ``.grad``.

    ``grad_outputs`` may themselves be recorded tensors; with
    ``create_graph=True`` the returned gradients stay on the tape, so they can
    be used inside a loss and differentiated again.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_outputs is None or isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs] * len(outputs)
    order = _topo_order(outputs)
    grads = _run_backward(outputs, grad_outputs, order, create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros(x.shape, dtype=x.data.dtype), dtype=x.data.dtype)
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    eps_floor: float = 1e-6,
) -> float:
    """Largest relative gap between the tape gradient of ``f`` and central differences.

    Runs in high precision. The per-coordinate error is
    ``|analytic - numeric| / (|analytic| + |numeric| + eps_floor)``.
    """
    with precision("high"):
        base = np.array(x, dtype=np.float64)
        xt = Tensor(base.copy(), requires_grad=True)
        try:
            y = f(xt)
            if y.size != 1:
                raise ContractError("finite_diff_check needs a scalar-valued function")
            analytic = grad(y, xt)[0].data if y.requires_grad else np.zeros_like(base)
            numeric = np.empty_like(base)
            # grad mode stays on: f may take input gradients internally
            for i in range(base.size):
                xp, xm = base.copy(), base.copy()
                xp.flat[i] += h
                xm.flat[i] -= h
                numeric.flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * h)
        except NumericError as exc:
            raise OracleError(f"function not finite near the check point: {exc}") from exc
        if not np.all(np.isfinite(numeric)):
            raise OracleError("finite differences produced non-finite values")
        err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + eps_floor)
        return float(err.max()) if err.size else 0.0
