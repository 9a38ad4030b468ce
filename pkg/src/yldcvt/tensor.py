"""Dense n-d arrays with reverse-mode autodiff.

Each op computes its forward result with numpy and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
``backward`` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


class NonFiniteError(ValueError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _vjp=None, op: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op or 'constructor'}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, op=op)
    return Tensor(data, op=op)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str = "custom") -> Tensor:
    """Wrap a forward result with a user-supplied vector-Jacobian product.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent.
    """
    return _result(np.asarray(data), parents, vjp, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ------------------------------------------------------
class Graph:
    """Topologically ordered view of the ops reachable from an output."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self, grad: np.ndarray | None = None) -> None:
        out = self.output
        if grad is None:
            if out.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(output: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not output.requires_grad:
        raise GraphError("output is detached: no input requires grad")
    Graph(output).backward(grad)


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), vjp, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    d = x.data
    inner = c * (d + 0.044715 * d * d * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _result(out, (x,), vjp, "gelu")


# -- reductions and shape ops ---------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = g.reshape((1,) * a.ndim)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), vjp, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, vjp, "concat")


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; only leading batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape[-1]} (a) vs {b.shape[-2]} (b)")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), vjp, "matmul")


def _require_no_grad(op: str) -> None:
    if _GRAD_ENABLED:
        raise GraphError(f"{op}: per-sample parameters are only supported under no_grad()")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped [in, out].

    A 3-d ``weight`` [N, in, out] (bias [N, out]) holds one weight per sample
    along x's leading axis; forward only.
    """
    if x.shape[-1] != weight.shape[-2]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[-2]}")
    if weight.ndim == 3 or (bias is not None and bias.ndim == 2):
        _require_no_grad("linear")
        n = x.shape[0]
        out = x.data.reshape(n, -1, x.shape[-1]) @ weight.data
        if bias is not None:
            out = out + (bias.data[:, None, :] if bias.ndim == 2 else bias.data)
        return Tensor(out.reshape(x.shape[:-1] + (weight.shape[-1],)), op="linear")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, vjp, "linear")


# -- normalization and attention helpers ----------------------------------
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), vjp, "softmax")


def normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], eps: float = 1e-5) -> Tensor:
    """Standardize over ``axes`` then apply a per-last-axis affine map.

    ``axes=(-1,)`` is layer normalization; reducing over every axis except the
    last is batch normalization with batch statistics.
    """
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if gamma.ndim == 2 or beta.ndim == 2:
        _require_no_grad("normalize")
        lead_shape = (d.shape[0],) + (1,) * (d.ndim - 2) + (d.shape[-1],)

        def expand(p: Tensor) -> np.ndarray:
            return p.data.reshape(lead_shape) if p.ndim == 2 else p.data

        return Tensor(xhat * expand(gamma) + expand(beta), op="normalize")
    out = xhat * gamma.data + beta.data
    lead = tuple(range(d.ndim - 1))

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), vjp, "normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    dim = x.shape[-1]
    if gamma.shape[-1:] != (dim,) or beta.shape[-1:] != (dim,):
        raise ShapeError(f"layer_norm: last axis is {dim} but gamma/beta are {gamma.shape}/{beta.shape}")
    return normalize(x, gamma, beta, (-1,), eps)


# -- convolution ----------------------------------------------------------
def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if not (ph or pw):
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding (NCHW layout).

    A 5-d ``weight`` [N, C_out, C_in/groups, kH, kW] (bias [N, C_out]) applies
    one kernel per sample; forward only.
    """
    per_sample = weight.ndim == 5
    if bias is not None and bias.ndim == 2 and not per_sample:
        # shared kernel, per-sample bias
        _require_no_grad("conv2d")
        out = conv2d(x, weight, None, stride, padding, groups)
        return Tensor(out.data + bias.data[:, :, None, None], op="conv2d")
    if x.ndim != 4 or weight.ndim - per_sample != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape[-4:]
    if groups < 1 or c_in % groups:
        raise ShapeError(f"conv2d: input channels {c_in} not divisible by groups={groups}")
    if c_out % groups:
        raise ShapeError(f"conv2d: output channels {c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise ShapeError(f"conv2d: weight expects {cg} channels per group, input provides {c_in // groups}")
    if h + 2 * ph < kh:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * pw}")
    if bias is not None and bias.shape[-1:] != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not end in {c_out}")

    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    xp = _pad2d(x.data, ph, pw)
    wd = weight.data
    rows = slice(None), slice(None)

    def tap(i, j):
        return rows + (slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))

    if per_sample:
        _require_no_grad("conv2d")
        if groups == 1:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c_in * kh * kw)
            out = (cols @ wd.reshape(n, c_out, -1).transpose(0, 2, 1)).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
        elif groups == c_in and c_out == c_in:
            out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(xp, wd))
            for i in range(kh):
                for j in range(kw):
                    out += xp[tap(i, j)] * wd[:, :, 0, i, j][:, :, None, None]
        else:
            raise ShapeError("conv2d: per-sample weights support groups=1 or depth-wise only")
        if bias is not None:
            out = out + (bias.data[:, :, None, None] if bias.ndim == 2 else bias.data[None, :, None, None])
        return Tensor(np.ascontiguousarray(out), op="conv2d")

    if groups == 1:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
        wmat = wd.reshape(c_out, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    elif groups == c_in and c_out == c_in:
        cols = None
        out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(xp, wd))
        for i in range(kh):
            for j in range(kw):
                out += xp[tap(i, j)] * wd[:, 0, i, j][None, :, None, None]
    else:
        og = c_out // groups
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        cols = win.reshape(n, groups, cg, ho, wo, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", cols, wd.reshape(groups, og, cg, kh, kw), optimize=True)
        out = out.reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gxp = np.zeros_like(xp)
        if groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
            gw = (g2.T @ cols).reshape(wd.shape)
            gcols = (g2 @ wmat).reshape(n, ho, wo, c_in, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        elif cols is None:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * xp[tap(i, j)]).sum(axis=(0, 2, 3))
                    gxp[tap(i, j)] += g * wd[:, 0, i, j][None, :, None, None]
        else:
            og = c_out // groups
            gg = g.reshape(n, groups, og, ho, wo)
            wt = wd.reshape(groups, og, cg, kh, kw)
            gw = np.einsum("ngohw,ngchwij->gocij", gg, cols, optimize=True).reshape(wd.shape)
            gcols = np.einsum("ngohw,gocij->ngchwij", gg, wt, optimize=True).reshape(n, c_in, ho, wo, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += gcols[..., i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, vjp, "conv2d")


# -- gradient checking ----------------------------------------------------
def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, eps: float) -> np.ndarray:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    target = inputs[index].data
    flat = target.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = fn(*inputs).item()
            flat[k] = orig - eps
            lo = fn(*inputs).item()
            flat[k] = orig
            grad[k] = (hi - lo) / (2.0 * eps)
    return grad.reshape(target.shape)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-4,
) -> float:
    """Max relative error between backprop and central-difference gradients.

    Every input with ``requires_grad`` is checked. Errors above ``tolerance``
    are logged, not raised.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.grad = None
    out = fn(*inputs)
    backward(out)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = relative_error(analytic, numeric_gradient(fn, inputs, i, eps))
        worst = max(worst, float(err.max(initial=0.0)))
    if worst > tolerance:
        logger.warning("gradient check failed: max relative error %.3e > %.1e", worst, tolerance)
    return worst
