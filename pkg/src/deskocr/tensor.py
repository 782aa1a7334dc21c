"""Dense float32 tensors with reverse-mode autodiff on a define-by-run tape.

Everything is row-major and contiguous; reshape copies when numpy would
return a view of a non-contiguous buffer. The tape is global and rebuilt
every training iteration: `reset_tape()` drops all recorded nodes, so a
forward pass in one mode (e.g. with an auxiliary training head) and the
same pass without it produce different op counts but identical values for
the shared part of the graph.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericsError, ShapeError, TapeError


class Tape:
    """Ordered record of ops for one forward/backward cycle.

    `op_count` counts every executed op, recorded or not, so inference-mode
    graphs (where nothing tracks gradients) can still be compared for size.
    """

    def __init__(self, rng_seed: int = 0):
        self.nodes = []
        self.op_count = 0
        self.rng_seed = rng_seed
        self._backward_done = False


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    return _TAPE


def reset_tape(rng_seed: int = 0) -> Tape:
    global _TAPE
    _TAPE = Tape(rng_seed)
    return _TAPE


class no_grad:
    """Context manager: ops inside are executed but not recorded."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self._parents = ()
        self._backward_fn = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, grad={'yes' if self.grad is not None else 'no'}, op={self._op})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))


def _record(out: Tensor, parents, backward_fn, op: str) -> Tensor:
    t = _TAPE
    t.op_count += 1
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
        out.node_id = len(t.nodes)
        t.nodes.append(out)
    return out


def _accum(p: Tensor, g: np.ndarray):
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = g.astype(np.float32, copy=True)
    else:
        p.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape` (size-1 axes summed)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(sa, sb):
    ra, rb = len(sa), len(sb)
    for i in range(1, min(ra, rb) + 1):
        a, b = sa[-i], sb[-i]
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


# creation ------------------------------------------------------------


def create(shape, init="zeros", value: float = 0.0, seed: int = 0,
           requires_grad: bool = False) -> Tensor:
    """Allocate a tensor. init in {zeros, constant, uniform, kaiming}.

    uniform draws from U(0,1); kaiming is a normal with variance 2/fan_in
    where fan_in = product of all extents after the first.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"zero or negative extent in shape {shape}")
    if init == "zeros":
        data = np.zeros(shape, np.float32)
    elif init == "constant":
        data = np.full(shape, value, np.float32)
    elif init == "uniform":
        rng = np.random.default_rng(seed)
        data = rng.random(shape, dtype=np.float32)
    elif init == "kaiming":
        rng = np.random.default_rng(seed)
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        std = np.sqrt(2.0 / fan_in)
        data = (rng.standard_normal(shape, dtype=np.float32) * std).astype(np.float32)
    else:
        raise ValueError(f"unknown init '{init}'")
    return Tensor(data, requires_grad=requires_grad)


# elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data / b.data)
    if not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite value produced by div")

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), bwd, "div")


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)

    def bwd(g):
        _accum(x, -g)

    return _record(out, (x,), bwd, "neg")


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _record(out, (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # stable two-branch form
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.clip(d, 0, None))),
                 np.exp(np.clip(d, None, 0)) / (1.0 + np.exp(np.clip(d, None, 0)))).astype(np.float32)
    out = Tensor(y)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return _record(out, (x,), bwd, "sigmoid")


def hardswish(x: Tensor) -> Tensor:
    d = x.data
    inner = np.clip(d + 3.0, 0.0, 6.0)
    out = Tensor(d * inner / 6.0)

    def bwd(g):
        slope = np.where(d <= -3.0, 0.0, np.where(d >= 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
        _accum(x, g * slope.astype(np.float32))

    return _record(out, (x,), bwd, "hardswish")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise NumericsError("exp overflow")
    out = Tensor(y)

    def bwd(g):
        _accum(x, g * y)

    return _record(out, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    out = Tensor(np.log(x.data))

    def bwd(g):
        _accum(x, g / x.data)

    return _record(out, (x,), bwd, "log")


# linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _record(out, (a, b), bwd, "matmul")


# shape ops -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(np.reshape(x.data, shape))

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _record(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.ascontiguousarray(np.transpose(g, inv)))

    return _record(out, (x,), bwd, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, np.ascontiguousarray(piece))

    return _record(out, tuple(tensors), bwd, "concat")


def expand_leading(x: Tensor, n: int) -> Tensor:
    """Prepend a new axis of extent n by repetition (e.g. [M,D] -> [n,M,D])."""
    out = Tensor(np.broadcast_to(x.data, (n,) + x.shape).copy())

    def bwd(g):
        _accum(x, g.sum(axis=0))

    return _record(out, (x,), bwd, "expand_leading")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32))

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).astype(np.float32))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape).astype(np.float32))

    return _record(out, (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# backward ------------------------------------------------------------


def backward(loss: Tensor):
    """Populate grads of every tracked tensor reachable from `loss`."""
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if loss.node_id is None:
        raise TapeError("loss is not on the tape (no tracked inputs, or recorded under no_grad)")
    t = _TAPE
    if t._backward_done:
        raise TapeError("backward already called on this tape; reset_tape() first")
    t._backward_done = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(t.nodes[: loss.node_id + 1]):
        if node.grad is None or node._backward_fn is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NumericsError(f"non-finite gradient flowing out of op '{node._op}'")
        node._backward_fn(node.grad)


# optimizer -----------------------------------------------------------


class Adam:
    """Adam with bias correction and decoupled weight decay.

    `groups` is a list of dicts: {"params": [Tensor...], "weight_decay": float}
    so distinct decay can be assigned per parameter group (e.g. a CTC head).
    """

    def __init__(self, groups, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups), "weight_decay": 0.0}]
        self.groups = groups
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def params(self):
        for g in self.groups:
            for p in g["params"]:
                yield g, p

    def zero_grad(self):
        for _, p in self.params():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for g, p in self.params():
            if p.grad is None:
                raise TapeError("adam_step: parameter has no gradient")
            wd = g.get("weight_decay", 0.0)
            if wd:
                p.data -= np.float32(self.lr * wd) * p.data
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)
