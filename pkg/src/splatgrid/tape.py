"""Minimal dense reverse-mode differentiation over numpy arrays.

Every op checks shapes strictly. The only implicit broadcasting is between a
tensor and a Python scalar; anything else goes through an explicit
:func:`broadcast_to`.  External code (the rasterizer) plugs in through
:func:`custom`, supplying its own vector-Jacobian product.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_recording = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    """A node on the tape: a numpy array plus how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add")
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    a = as_tensor(a)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def clamp_st(a: Tensor, lo, hi) -> Tensor:
    """Clamp values; the gradient passes straight through."""
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g,), "clamp_st")


# reductions and shape ---------------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = tuple(np.atleast_1d(axis) % a.ndim)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), vjp, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(np.atleast_1d(shape))) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the only non-scalar broadcast on the tape."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    src = a.shape
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _make(out, (a,), vjp, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *[x.shape for x in tensors])
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), vjp, "slice")


def _fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal batch extent."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), vjp, "matmul")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*9) patches of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero 'same' padding.

    x: (N, C_in, H, W); weight: (C_out, C_in, 3, 3); bias: (C_out,).
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d", x.shape, weight.shape, bias.shape)
    n, c, h, w = x.shape
    co = weight.shape[0]
    cols = _im2col(x.data)
    wmat = weight.data.reshape(co, c * 9)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, co)
        gw = (gm.T @ cols).reshape(weight.shape)
        # input gradient = same-padded conv of g with the flipped, transposed kernel
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, co * 9)
        gx = (_im2col(np.ascontiguousarray(g)) @ wflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if bias is None:
            return (gx, gw)
        return (gx, gw, gm.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, vjp, "conv2d")


def _box_sum(x: np.ndarray, k: int) -> np.ndarray:
    c = np.cumsum(np.cumsum(x, axis=-1), axis=-2)
    c = np.pad(c, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]


def box_filter(x: Tensor, k: int) -> Tensor:
    """Mean over k x k windows of the last two axes ('valid' placement)."""
    h, w = x.shape[-2:]
    if k < 1 or k > h or k > w:
        raise ShapeError("box_filter", x.shape, (k, k))
    inv = 1.0 / (k * k)

    def vjp(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        return (_box_sum(np.pad(g, pad), k) * inv,)

    return _make(_box_sum(x.data, k) * inv, (x,), vjp, "box_filter")


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), vjp, "layer_norm")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), vjp, "l2_normalize")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for (L, d) or (B, L, d) operands."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1] or q.ndim not in (2, 3):
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    d = q.shape[-1]
    s = 1.0 / np.sqrt(d)
    qd, kd, vd = q.data, k.data, v.data
    logits = (qd @ np.swapaxes(kd, -1, -2)) * s
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def vjp(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        return (gl @ kd, np.swapaxes(gl, -1, -2) @ qd, gv)

    return _make(out, (q, k, v), vjp, "attention")


def custom(inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable, op: str = "custom") -> Tensor:
    """Register an externally computed value with a user-supplied VJP.

    ``vjp(g)`` receives the upstream gradient (shape of ``value``) and returns
    one gradient per input (``None`` for inputs without a gradient).
    """
    inputs = tuple(as_tensor(t) for t in inputs)

    def wrapped(g):
        grads = tuple(vjp(g))
        if len(grads) != len(inputs):
            raise ValueError(f"{op}: vjp returned {len(grads)} gradients for {len(inputs)} inputs")
        return tuple(np.zeros(t.shape) if gg is None else gg for t, gg in zip(inputs, grads))

    return _make(np.asarray(value), inputs, wrapped, op)


# registry of the named op surface -------------------------------------------------

OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "div": div, "matmul": matmul,
    "conv2d": conv2d, "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "softmax": softmax,
    "layer_norm": layer_norm, "l2_normalize": l2_normalize, "sum": sum_, "mean": mean,
    "reshape": reshape, "concat": concat, "slice": slice_, "transpose": transpose,
    "attention": attention, "exp": exp, "log": log, "sqrt": sqrt, "abs": abs_,
    "broadcast_to": broadcast_to, "box_filter": box_filter, "clamp_st": clamp_st,
}


def forward_op(name: str, inputs: Sequence, **params) -> Tensor:
    """Apply a registered op by name."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}") from None
    if name == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


# backward -------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping from leaf tensors to their gradient for this call. The
    graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the tape")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"backward through {node.op}", pg.shape, parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            node._parents = ()
            node._vjp = None
    return leaves


# gradient checking ------------------------------------------------------------------


class NonFiniteError(FloatingPointError):
    def __init__(self, index, where: str):
        self.index = index
        super().__init__(f"non-finite {where} at coordinate {index}")


def numeric_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(Tensor(x.copy())).data)
            flat[i] = orig - step
            fm = float(fn(Tensor(x.copy())).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(np.unravel_index(i, x.shape), "function value")
            gflat[i] = (fp - fm) / (2.0 * step)
    return g


def analytic_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    out = fn(x)
    if not out.requires_grad:
        return np.zeros_like(x.data)
    backward(out)
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)."""
    ga = analytic_grad(fn, point)
    bad = np.argwhere(~np.isfinite(ga))
    if bad.size:
        raise NonFiniteError(tuple(bad[0]), "analytic gradient")
    gn = numeric_grad(fn, point, step)
    err = np.abs(ga - gn) / np.maximum(1e-8, np.abs(ga) + np.abs(gn))
    return float(err.max()) if err.size else 0.0


def parameters_grad_zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
