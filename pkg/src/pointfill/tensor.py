"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation records one node on the active thread's tape.
``backward`` walks the tape in reverse creation order, so each node is
visited once and parents are always processed after their consumers.  The
tape is cleared once backward finishes.

Elementwise operations require equal shapes (or a 0-d operand); the only
implicit broadcasting is over leading batch dimensions in ``matmul`` and
``linear``.  Use ``expand`` for anything else.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

PRECISIONS = {"standard": np.float32, "wide": np.float64}

_local = threading.local()
_faults: set[str] = set()


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def get_dtype():
    return _ctx().dtype


def set_precision(mode: str) -> None:
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    _ctx().dtype = PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the dtype used for new tensors."""
    ctx = _ctx()
    old = ctx.dtype
    set_precision(mode)
    try:
        yield
    finally:
        ctx.dtype = old


@contextlib.contextmanager
def no_grad():
    ctx = _ctx()
    old = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = old


def grad_enabled() -> bool:
    return _ctx().grad_enabled


@contextlib.contextmanager
def inject_fault(name: str):
    """Debug hook: corrupt one backward rule (used by the self-test)."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


class Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward, op):
        self.nodes.append(Node(out, parents, backward, op))

    def clear(self):
        self.nodes.clear()

    def first_nonfinite(self):
        """Return ``(position, op)`` of the earliest node with a non-finite output."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.data)):
                return i, node.op
        return None

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or not any(n.out is loss for n in reversed(self.nodes)):
            raise ContractError("loss was not computed on the tape")
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is not None and parent.requires_grad:
                    parent._accumulate(pg)
        self.clear()


def current_tape() -> Tape:
    return _ctx().tape


class Tensor:
    """An n-dimensional array that can take part in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            current_tape().record(out, parents, backward, op)
        return out

    def _accumulate(self, g):
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        current_tape().backward(self)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _operand(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _operand(b, a)
    if isinstance(b, Tensor):
        return _operand(a, b), b
    return as_tensor(a), as_tensor(b)


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim and b.ndim:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only equal shapes or 0-d operands)")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    return _unbroadcast(g, shape)


def _unbroadcast(g, shape):
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b),
                           lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return Tensor._from_op(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # written so that NaN inputs stay NaN instead of being clipped to zero
    return Tensor._from_op(np.where(x.data <= 0, 0, x.data).astype(x.dtype), (x,),
                           lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (x,), backward, "gelu")


# -- reductions and shape ------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "amax")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (new leading axes or size-1 axes)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    old = x.shape
    return Tensor._from_op(out, (x,), lambda g: (_unbroadcast(g, old),), "expand")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tuple(tensors),
                           lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(x: Tensor, indices, axis=0) -> Tensor:
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise DimensionError("take: indices must be one-dimensional")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor._from_op(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def gather(x: Tensor, indices) -> Tensor:
    """Per-batch row gather: ``out[b, k] = x[b, indices[b, k]]``."""
    indices = np.asarray(indices)
    if indices.ndim != 2 or indices.shape[0] != x.shape[0]:
        raise DimensionError(f"gather: indices {indices.shape} do not fit tensor {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, indices), g)
        return (gx,)

    return Tensor._from_op(x.data[rows, indices], (x,), backward, "gather")


# -- linear algebra ------------------------------------------------------

def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ _swap(bd)
        gb = _swap(ad) @ g
        if "matmul_sign" in _faults:
            ga = -ga
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    n_in, n_out = wd.shape

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ wd.T
        gw = xd.reshape(-1, n_in).T @ g2
        if "matmul_sign" in _faults:
            gx = -gx
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward, "linear")


def softmax(x: Tensor, axis=-1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm: last dim {c} does not match gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "layernorm")


def custom_op(data, parents, backward, name) -> Tensor:
    """Record an operation implemented outside this module.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent.
    """
    return Tensor._from_op(np.asarray(data), tuple(parents), backward, name)


def backward(loss: Tensor) -> None:
    current_tape().backward(loss)


# -- verification --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    analytic: float
    numeric: float
    checked: int

    def passed(self, tol=1e-4):
        return self.max_rel_error <= tol

    def __str__(self):
        if self.worst_param is None:
            return f"checked {self.checked} coordinates, max rel err {self.max_rel_error:.3e}"
        return (f"checked {self.checked} coordinates, max rel err {self.max_rel_error:.3e} "
                f"at {self.worst_param}{list(self.worst_index)} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})")


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(f, params, h=1e-6, coords=None, rng=None) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params`` (a dict name -> Tensor, or a sequence).  With ``coords=None``
    every coordinate is checked; otherwise ``coords`` random coordinates per
    tensor are drawn from ``rng``.

    ``h`` may be a sequence of step sizes; each coordinate then reports its
    best agreement over them.  Piecewise-smooth losses (nearest-neighbour
    switches, ReLU, max-pool) need a step below the distance to the nearest
    kink, while near-zero gradients need a step large enough to clear
    roundoff; a wrong derivative disagrees at every step.
    """
    steps = (h,) if np.isscalar(h) else tuple(h)
    if not steps or min(steps) <= 0:
        raise ContractError("finite-difference step must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    current_tape().clear()
    loss = f()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = GradCheckReport(0.0, None, None, 0.0, 0.0, 0)
    checked = 0
    with no_grad():
        for name, p in params.items():
            if coords is None:
                picks = list(np.ndindex(p.shape))
            else:
                flat = rng.choice(p.size, size=min(coords, p.size), replace=False)
                picks = [np.unravel_index(i, p.shape) for i in flat]
            for idx in picks:
                orig = p.data[idx]
                ana = float(analytic[name][idx])
                err, num = math.inf, 0.0
                for step in steps:
                    p.data[idx] = orig + step
                    fp = float(f().data)
                    p.data[idx] = orig - step
                    fm = float(f().data)
                    p.data[idx] = orig
                    n = (fp - fm) / (2 * step)
                    if relative_error(ana, n) < err:
                        err, num = relative_error(ana, n), n
                    if err <= 1e-7:
                        break
                checked += 1
                if err > worst.max_rel_error or worst.worst_param is None:
                    worst = GradCheckReport(err, name, tuple(int(i) for i in idx), ana, num, 0)
    worst.checked = checked
    return worst


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update on every parameter that has a gradient.

    Parameters with ``requires_grad=False`` or no gradient are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
    return state
