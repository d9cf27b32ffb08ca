"""Reverse-mode automatic differentiation over dense float64 tensors.

Operations executed while a :class:`Tape` is active are recorded as nodes.
:func:`backward` walks the tape in reverse; with ``create_graph=True`` the
vector-Jacobian products are themselves recorded, so the returned gradients
can be differentiated again (double backprop).

Example::

    with Tape() as tape:
        x = tape.variable(np.array(3.0))
        y = x * x
        (g,) = backward(y, [x])      # g.data == 6.0
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "AutodiffError",
    "ShapeError",
    "SecondOrderError",
    "Tensor",
    "Node",
    "Tape",
    "Primitive",
    "register_primitive",
    "forward_primitive",
    "backward",
    "grad_of_grad",
    "no_record",
    "as_tensor",
    "numerical_gradient",
    "gradcheck",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class SecondOrderError(AutodiffError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _recording() -> "Tape | None":
    stack = _tape_stack()
    if not stack or getattr(_state, "paused", 0):
        return None
    return stack[-1]


class no_record:
    """Context manager suspending tape recording on this thread."""

    def __enter__(self):
        _state.paused = getattr(_state, "paused", 0) + 1
        return self

    def __exit__(self, *exc):
        _state.paused -= 1
        return False


class Tensor:
    """Immutable dense array, optionally bound to a node on a tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        # a view, so freezing it never locks the caller's array
        arr = np.asarray(data, dtype=np.float64).view()
        arr.setflags(write=False)
        self.data = arr
        self.node = node
        self.tape = tape

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
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return forward_primitive("add", self, other)

    def __radd__(self, other):
        return forward_primitive("add", other, self)

    def __sub__(self, other):
        return forward_primitive("sub", self, other)

    def __rsub__(self, other):
        return forward_primitive("sub", other, self)

    def __mul__(self, other):
        return forward_primitive("mul", self, other)

    def __rmul__(self, other):
        return forward_primitive("mul", other, self)

    def __truediv__(self, other):
        return forward_primitive("div", self, other)

    def __rtruediv__(self, other):
        return forward_primitive("div", other, self)

    def __neg__(self):
        return forward_primitive("neg", self)

    def __matmul__(self, other):
        return forward_primitive("matmul", self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: Tensor
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of executed primitives.

    Use as a context manager to make it the active recording tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _append(self, op: str, inputs: tuple[int, ...], data, attrs=None) -> Tensor:
        t = Tensor(data, node=len(self.nodes), tape=self)
        self.nodes.append(Node(t.node, op, inputs, t, attrs or {}))
        return t

    def variable(self, value) -> Tensor:
        """Record a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else value
        return self._append("leaf", (), np.array(data, dtype=np.float64))

    def constant(self, value) -> Tensor:
        data = value.data if isinstance(value, Tensor) else value
        return self._append("const", (), data)

    def _bind(self, t: Tensor) -> int:
        if t.tape is self:
            return t.node
        return self.constant(t).node

    def replay(self, leaves: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node value from the leaves (optionally substituted)."""
        leaves = leaves or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values.append(np.asarray(leaves.get(node.id, node.value.data), dtype=np.float64))
            else:
                prim = _PRIMITIVES[node.op]
                args = [values[i] for i in node.inputs]
                values.append(prim.forward(*args, **node.attrs))
        return values


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(grad, out, *inputs, **attrs) -> tuple of Tensor|None, one per input
    vjp: Callable[..., tuple] | None
    twice_differentiable: bool = True


_PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name, forward, vjp, twice_differentiable=True) -> Primitive:
    prim = Primitive(name, forward, vjp, twice_differentiable)
    _PRIMITIVES[name] = prim
    return prim


def forward_primitive(kind: str, *args, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the active tape."""
    try:
        prim = _PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(a) for a in args]
    out = prim.forward(*(t.data for t in tensors), **attrs)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{kind}: non-finite output")
    tape = _recording()
    if tape is None:
        return Tensor(out)
    inputs = tuple(tape._bind(t) for t in tensors)
    return tape._append(kind, inputs, out, attrs)


def _op(kind):
    return lambda *args, **attrs: forward_primitive(kind, *args, **attrs)


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------


def _check_elementwise(name, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _elementwise(name, fn):
    def forward(a, b):
        _check_elementwise(name, a, b)
        return fn(a, b)

    return forward


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)


def _conv2d_fwd(x, w, b=None):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: incompatible shapes {w.shape} and {b.shape}")
    k = w.shape[2]
    win = _windows(x, k)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, O)
    if b is not None:
        out = out + b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_wgrad_fwd(x, g, k):
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"conv2d_wgrad: incompatible shapes {x.shape} and {g.shape}")
    win = _windows(x, k)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)


def _kernel_flip_fwd(w):
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _pool_index(x):
    """Flat index (0..3) of the first maximal element in each 2x2 window."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    return blocks.argmax(axis=-1), blocks


def _maxpool_fwd(x):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: incompatible shapes {x.shape} and (2, 2)")
    idx, blocks = _pool_index(x)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]


def _unpool_fwd(g, index):
    n, c, h, w = g.shape
    if index.shape != g.shape:
        raise ShapeError(f"unpool2x2: incompatible shapes {g.shape} and {index.shape}")
    blocks = np.zeros((n, c, h, w, 4))
    np.put_along_axis(blocks, index[..., None], g[..., None], axis=-1)
    return blocks.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


def _gather_fwd(x, index):
    n, c, h, w = x.shape
    if index.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"gather2x2: incompatible shapes {x.shape} and {index.shape}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    return np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0]


def _softmax_fwd(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax: incompatible shapes {x.shape} and (n, m)")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_fwd(x):
    if np.any(x <= 0):
        raise FloatingPointError("log: non-positive argument")
    return np.log(x)


def _sum_fwd(x, axis=None, keepdims=False):
    return np.asarray(np.sum(x, axis=axis, keepdims=keepdims))


def _mean_fwd(x):
    return np.asarray(np.mean(x))


def _broadcast_fwd(x, shape):
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: incompatible shapes {x.shape} and {shape}")
    return np.ascontiguousarray(np.broadcast_to(x, shape))


def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: incompatible shapes {x.shape} and {tuple(shape)}") from None


def _flatten_fwd(x):
    if x.ndim < 1:
        raise ShapeError(f"flatten: incompatible shapes {x.shape} and (n, ...)")
    return x.reshape(x.shape[0], -1)


def _transpose_fwd(x, axes=None):
    return np.ascontiguousarray(np.transpose(x, axes))


def _clip_min_fwd(x, floor):
    return np.maximum(x, floor)


# ---------------------------------------------------------------------------
# vector-Jacobian products, written with primitives so they are recordable
# ---------------------------------------------------------------------------

add = _op("add")
sub = _op("sub")
mul = _op("mul")
div = _op("div")
neg = _op("neg")
matmul = _op("matmul")
relu = _op("relu")
maxpool2x2 = _op("maxpool2x2")
flatten = _op("flatten")
softmax = _op("softmax")
log = _op("log")
square = _op("square")
mean = _op("mean")
absolute = _op("abs")
kernel_flip = _op("kernel_flip")


def conv2d(x, w, b=None) -> Tensor:
    if b is None:
        return forward_primitive("conv2d", x, w)
    return forward_primitive("conv2d", x, w, b)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return forward_primitive("sum", x, axis=axis, keepdims=keepdims)


def broadcast_to(x, shape) -> Tensor:
    return forward_primitive("broadcast_to", x, shape=tuple(shape))


def reshape(x, shape) -> Tensor:
    return forward_primitive("reshape", x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return forward_primitive("transpose", x, axes=None if axes is None else tuple(axes))


def clip_min(x, floor: float) -> Tensor:
    return forward_primitive("clip_min", x, floor=float(floor))


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce a full-shape gradient onto a scalar operand when needed."""
    if tuple(shape) == g.shape:
        return g
    return reshape(tsum(g), shape)


def _vjp_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


def _vjp_mul(g, out, a, b):
    return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)


def _vjp_div(g, out, a, b):
    ga = div(g, b)
    gb = neg(mul(ga, div(a, b)))
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _vjp_neg(g, out, a):
    return (neg(g),)


def _vjp_matmul(g, out, a, b):
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_conv2d(g, out, x, w, b=None):
    k = w.shape[2]
    gx = conv2d(g, kernel_flip(w))
    gw = forward_primitive("conv2d_wgrad", x, g, k=k)
    if b is None:
        return gx, gw
    return gx, gw, tsum(g, axis=(0, 2, 3))


def _vjp_conv2d_wgrad(h, out, x, g, k):
    return conv2d(g, kernel_flip(h)), conv2d(x, h)


def _vjp_kernel_flip(g, out, w):
    return (kernel_flip(g),)


def _vjp_relu(g, out, x):
    return (mul(g, Tensor((x.data > 0).astype(np.float64))),)


def _vjp_maxpool(g, out, x):
    idx, _ = _pool_index(x.data)
    return (forward_primitive("unpool2x2", g, index=idx),)


def _vjp_unpool(h, out, g, index):
    return (forward_primitive("gather2x2", h, index=index),)


def _vjp_gather(h, out, x, index):
    return (forward_primitive("unpool2x2", h, index=index),)


def _vjp_flatten(g, out, x):
    return (reshape(g, x.shape),)


def _vjp_reshape(g, out, x, shape):
    return (reshape(g, x.shape),)


def _vjp_transpose(g, out, x, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (transpose(g, inv),)


def _vjp_softmax(g, out, x):
    n, m = out.shape
    dot = tsum(mul(g, out), axis=1, keepdims=True)
    return (mul(out, sub(g, broadcast_to(dot, (n, m)))),)


def _vjp_log(g, out, x):
    return (div(g, x),)


def _vjp_sum(g, out, x, axis=None, keepdims=False):
    if axis is None:
        kshape = (1,) * x.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = {a % x.ndim for a in axes}
        kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    return (broadcast_to(reshape(g, kshape), x.shape),)


def _vjp_mean(g, out, x):
    scale = 1.0 / x.size
    return (mul(broadcast_to(reshape(g, (1,) * x.ndim), x.shape), scale),)


def _vjp_square(g, out, x):
    return (mul(mul(g, x), 2.0),)


def _vjp_abs(g, out, x):
    return (mul(g, Tensor(np.where(x.data >= 0, 1.0, -1.0))),)


def _vjp_broadcast(g, out, x, shape):
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    if not axes:
        return (g,)
    return (tsum(g, axis=axes, keepdims=True),)


def _vjp_clip_min(g, out, x, floor):
    return (mul(g, Tensor((x.data > floor).astype(np.float64))),)


register_primitive("add", _elementwise("add", np.add), _vjp_add)
register_primitive("sub", _elementwise("sub", np.subtract), _vjp_sub)
register_primitive("mul", _elementwise("mul", np.multiply), _vjp_mul)
register_primitive("div", _elementwise("div", np.divide), _vjp_div)
register_primitive("neg", np.negative, _vjp_neg)
register_primitive("matmul", _matmul_fwd, _vjp_matmul)
register_primitive("conv2d", _conv2d_fwd, _vjp_conv2d)
register_primitive("conv2d_wgrad", _conv2d_wgrad_fwd, _vjp_conv2d_wgrad)
register_primitive("kernel_flip", _kernel_flip_fwd, _vjp_kernel_flip)
register_primitive("relu", lambda x: np.maximum(x, 0.0), _vjp_relu)
register_primitive("maxpool2x2", _maxpool_fwd, _vjp_maxpool)
register_primitive("unpool2x2", _unpool_fwd, _vjp_unpool)
register_primitive("gather2x2", _gather_fwd, _vjp_gather)
register_primitive("flatten", _flatten_fwd, _vjp_flatten)
register_primitive("reshape", _reshape_fwd, _vjp_reshape)
register_primitive("transpose", _transpose_fwd, _vjp_transpose)
register_primitive("softmax", _softmax_fwd, _vjp_softmax)
register_primitive("log", _log_fwd, _vjp_log)
register_primitive("sum", _sum_fwd, _vjp_sum)
register_primitive("mean", _mean_fwd, _vjp_mean)
register_primitive("square", np.square, _vjp_square)
register_primitive("abs", np.abs, _vjp_abs)
register_primitive("broadcast_to", _broadcast_fwd, _vjp_broadcast)
register_primitive("clip_min", _clip_min_fwd, _vjp_clip_min)


def _opaque_forward(*args, **attrs):
    raise AutodiffError("opaque gradient nodes cannot be replayed")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the reverse pass is recorded on the output's tape so
    the returned gradients are differentiable themselves.
    """
    if output.size != 1:
        raise AutodiffError(f"backward: output must be scalar, got shape {output.shape}")
    tape = output.tape
    wrt = list(wrt)
    if tape is None:
        return [Tensor(np.zeros(t.shape)) for t in wrt]
    targets = {t.node for t in wrt if t.tape is tape}

    nodes = tape.nodes[: output.node + 1]
    needs = np.zeros(len(nodes), dtype=bool)
    for node in nodes:
        if node.id in targets:
            needs[node.id] = True
        elif node.inputs and any(needs[i] for i in node.inputs):
            needs[node.id] = True

    grads: dict[int, Tensor] = {output.node: Tensor(np.ones(output.shape))}

    def run():
        for node in reversed(nodes):
            g = grads.pop(node.id, None) if node.id not in targets else grads.get(node.id)
            if g is None or not node.inputs or not needs[node.id]:
                continue
            prim = _PRIMITIVES[node.op]
            if prim.vjp is None:
                raise SecondOrderError(f"primitive {node.attrs.get('of', node.op)!r} has no registered second derivative")
            inputs = [tape.nodes[i].value for i in node.inputs]
            parts = prim.vjp(g, node.value, *inputs, **node.attrs)
            if create_graph and not prim.twice_differentiable:
                # keep the dependency visible but refuse to differentiate through it
                parts = tuple(
                    None if p is None else tape._append("opaque_grad", node.inputs + (tape._bind(g),), p.data, {"of": node.op})
                    for p in parts
                )
            for i, p in zip(node.inputs, parts):
                if p is None or not needs[i]:
                    continue
                prev = grads.get(i)
                grads[i] = p if prev is None else add(prev, p)

    if create_graph:
        with tape:
            run()
    else:
        with no_record():
            run()

    out = []
    for t in wrt:
        g = grads.get(t.node) if t.tape is tape else None
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out


def grad_of_grad(scalar_of_gradient: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Second-order gradients of a scalar built from ``backward(create_graph=True)``.

    Raises :class:`SecondOrderError` when the path crosses a primitive whose
    vector-Jacobian product was not itself recorded.
    """
    return backward(scalar_of_gradient, wrt)


register_primitive("opaque_grad", _opaque_forward, None)


def numerical_gradient(fn: Callable[..., float], inputs: Sequence[np.ndarray], index: int, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn(*inputs)`` with respect to ``inputs[index]``."""
    args = [np.array(a, dtype=np.float64) for a in inputs]
    x = args[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = fn(*args)
        x[i] = orig - h
        down = fn(*args)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6) -> float:
    """Largest norm-relative error between tape gradients and central differences.

    ``fn`` maps input tensors to a scalar tensor.
    """
    with Tape() as tape:
        leaves = [tape.variable(a) for a in inputs]
        grads = backward(fn(*leaves), leaves)

    def value(*arrays):
        # a fresh tape, since fn may itself differentiate (e.g. saliency)
        with Tape() as t:
            return fn(*[t.variable(a) for a in arrays]).item()

    worst = 0.0
    for k, g in enumerate(grads):
        num = numerical_gradient(value, inputs, k, h)
        scale = max(np.linalg.norm(num), np.linalg.norm(g.data), 1e-8)
        worst = max(worst, float(np.linalg.norm(g.data - num) / scale))
    return worst
