"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive builds a node holding its parents and a
closure that maps the output gradient to one gradient per parent.  The
recorded graph is the tape: nodes carry a monotonically increasing id, so
sorting the reachable nodes by id yields a topological order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count()
_grad_enabled = True


class InvalidShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


_mac_counts: list[int] = []


@contextmanager
def count_macs():
    """Collect multiply-accumulates of conv/deconv/dense calls made inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    box = [0]
    _mac_counts.append(0)
    try:
        yield box
    finally:
        box[0] = _mac_counts.pop()


def record_macs(n: int) -> None:
    if _mac_counts:
        _mac_counts[-1] += int(n)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; use scale()")
        return scale(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``kind`` is one of ``weight``, ``bias`` or ``norm``; only ``weight``
    entries enter L2 regularisation.  A frozen parameter receives no
    gradient and is skipped by optimizers.
    """

    def __init__(self, data, kind: str = "weight", dtype=None):
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)
        self.kind = kind
        self.frozen = False
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, kind={self.kind}, frozen={self.frozen})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*tensors: Tensor) -> bool:
    if not _grad_enabled:
        return False
    return any(t.requires_grad and not getattr(t, "frozen", False) for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


# -- tape -----------------------------------------------------------------
def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._id)
    return nodes


def trace(root: Tensor) -> list[tuple[str, tuple[int, ...], int]]:
    """Return the tape leading to ``root`` as (op, input ids, output id) records."""
    return [
        (n._op, tuple(p._id for p in n._parents), n._id)
        for n in _reachable(root)
        if n._backward is not None
    ]


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    The graph is released afterwards; a second call on the same graph raises
    ``StaleTapeError``.
    """
    if loss._freed:
        raise StaleTapeError("backward called twice on the same recorded graph")
    if grad is None:
        if loss.size != 1:
            raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    nodes = _reachable(loss)
    for n in nodes:
        if n._freed:
            raise StaleTapeError("graph was already consumed by a previous backward")
    grads: dict[int, np.ndarray] = {loss._id: np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(node, Parameter):
                if not node.frozen:
                    node.grad = node.grad + g
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad or getattr(parent, "frozen", False):
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    for node in nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._freed = True
    if not isinstance(loss, Parameter):
        loss._freed = True


# -- broadcasting ---------------------------------------------------------
def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Narrow broadcast rule: equal shapes, scalar vs tensor, or [N|1,C,1,1] vs [N,C,H,W]."""
    if a == b:
        return a
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    for big, small in ((a, b), (b, a)):
        if (
            len(big) == 4
            and len(small) == 4
            and small[1] == big[1]
            and small[2] == 1
            and small[3] == 1
            and small[0] in (1, big[0])
        ):
            return big
    raise InvalidShapeError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    shape = _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    out = a.data + b.data
    if out.shape != shape:
        out = np.broadcast_to(out, shape).copy()
    return _make(out.astype(a.dtype, copy=False), (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    shape = _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    out = a.data - b.data
    if out.shape != shape:
        out = np.broadcast_to(out, shape).copy()
    return _make(out.astype(a.dtype, copy=False), (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    shape = _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    out = ad * bd
    if out.shape != shape:
        out = np.broadcast_to(out, shape).copy()
    return _make(out.astype(a.dtype, copy=False), (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,), "scale")


def clamp_min(a: Tensor, threshold: float) -> Tensor:
    """max(a, threshold); the subgradient at equality is 1."""
    t = a.dtype.type(threshold)
    mask = a.data >= t

    def bw(g):
        return (g * mask,)

    return _make(np.maximum(a.data, t), (a,), bw, "clamp_min")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    lo_, hi_ = a.dtype.type(lo), a.dtype.type(hi)
    mask = (a.data >= lo_) & (a.data <= hi_)
    return _make(np.clip(a.data, lo_, hi_), (a,), lambda g: (g * mask,), "clip")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
        return (g * d.astype(out.dtype),)

    return _make(out, (a,), bw, "sqrt")


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor; zero rows get a zero subgradient."""
    if a.ndim != 2:
        raise InvalidShapeError(f"row_norm expects a 2-D tensor, got {a.shape}")
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=1))

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return ((g / safe)[:, None] * ad * (out > 0)[:, None],)

    return _make(out, (a,), bw, "row_norm")


def pad_spatial(a: Tensor, before: int, after: int | None = None) -> Tensor:
    """Zero-pad the last two axes by ``before``/``after`` cells on each side."""
    after = before if after is None else after
    widths = [(0, 0)] * (a.ndim - 2) + [(before, after), (before, after)]
    h, w = a.shape[-2:]

    def bw(g):
        return (g[..., before : before + h, before : before + w],)

    return _make(np.pad(a.data, widths), (a,), bw, "pad_spatial")


# -- activations ----------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def swish(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)

    def bw(g):
        return (g * (s + x * s * (1 - s)),)

    return _make(x * s, (a,), bw, "swish")


def hard_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    mask = (x > -3) & (x < 3)
    out = np.clip(x + 3, 0, 6) / 6
    return _make(out.astype(x.dtype), (a,), lambda g: (g * mask / 6,), "hard_sigmoid")


def hard_swish(a: Tensor) -> Tensor:
    x = a.data
    hs = (np.clip(x + 3, 0, 6) / 6).astype(x.dtype)

    def bw(g):
        d = np.where(x <= -3, 0, np.where(x >= 3, 1, (2 * x + 3) / 6))
        return (g * d.astype(x.dtype),)

    return _make(x * hs, (a,), bw, "hard_swish")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "swish": swish,
    "hard-swish": hard_swish,
    "hswish": hard_swish,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": lambda x: x,
}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# -- reductions and structure ---------------------------------------------
def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise InvalidShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise InvalidShapeError(f"concat extents disagree: {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), bw, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def global_avg_pool(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1]."""
    if a.ndim != 4:
        raise InvalidShapeError(f"global_avg_pool expects NCHW, got {a.shape}")
    n, c, h, w = a.shape
    inv = a.dtype.type(1.0 / (h * w))

    def bw(g):
        return (np.broadcast_to(g * inv, (n, c, h, w)).copy(),)

    return _make(a.data.mean(axis=(2, 3), keepdims=True), (a,), bw, "global_avg_pool")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b with W shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"dense: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    record_macs(xd.shape[0] * wd.shape[0] * wd.shape[1])
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise InvalidShapeError(f"dense bias {bias.shape} vs weight {wd.shape}")
        out = out + bias.data

    def bw(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "dense")


# -- tensor dump format ---------------------------------------------------
def dump_tensor(arr, path=None) -> str:
    """Serialise as a ``dtype shape...`` header line followed by row-major values."""
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    header = " ".join([a.dtype.name] + [str(s) for s in a.shape])
    body = " ".join(repr(float(v)) for v in a.reshape(-1))
    text = header + "\n" + body + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def load_tensor(text_or_path) -> np.ndarray:
    text = str(text_or_path)
    if "\n" not in text:
        with open(text) as fh:
            text = fh.read()
    header, _, body = text.partition("\n")
    fields = header.split()
    dtype = np.dtype(fields[0])
    shape = tuple(int(s) for s in fields[1:])
    values = np.array([float(v) for v in body.split()], dtype=dtype)
    if values.size != int(np.prod(shape)):
        raise ValueError(f"tensor dump declares {shape} but holds {values.size} values")
    return values.reshape(shape)


def parameters_of(tensors: Iterable[Tensor]) -> list[Parameter]:
    return [t for t in tensors if isinstance(t, Parameter)]
