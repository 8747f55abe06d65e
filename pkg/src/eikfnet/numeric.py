"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every array in the model is a :class:`Tensor`. Operations record a node on
the implicit tape (the parent links) only when one of their inputs is
tracked, so dataset tensors never cost anything in the backward pass.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> grads = backward((x * x).sum())
    >>> float(grads[x][0])
    6.0
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class DomainError(ValueError):
    """Raised for log/div on operands outside the function's domain."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``op`` names the primitive that produced the tensor, ``parents`` are its
    inputs and ``_vjp`` maps the output cotangent to one cotangent per parent.
    """

    __slots__ = ("data", "requires_grad", "parents", "op", "_vjp", "name", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._vjp = None
        self.name = name
        self.grad: np.ndarray | None = None

    # --- basic properties ---------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # --- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: non-finite value in forward pass")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.name = None
    t.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.op = op
        t._vjp = vjp
    else:
        t.requires_grad = False
        t.parents = ()
        t.op = op
        t._vjp = None
    return t


# --- elementwise binary ops -------------------------------------------------
def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _record("div", out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", out, (a, b), vjp)


# --- elementwise unary ops --------------------------------------------------
def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive operand")
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt: negative operand")
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow for large x."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = _stable_sigmoid(xd)
    return _record("softplus", out, (x,), lambda g: (g * sig,))


def straight_through(soft, hard) -> Tensor:
    """Forward value of ``hard``; gradient flows to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {soft.shape} and {hard.shape}")
    return _record("straight_through", hard.copy(), (soft,), lambda g: (g,))


# --- reductions and shape ops -------------------------------------------
def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", _as_array(out), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", _as_array(out), (x,), vjp)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes`` when given."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need ndim >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def broadcast(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _record("broadcast", out, (x,), lambda g: (_unbroadcast(g, old),))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("slice", _as_array(x.data[index]), (x,), vjp)


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


# --- normalizations ---------------------------------------------------------
def softmax(x, axis: int = -1, weights=None) -> Tensor:
    """Softmax along ``axis``; with ``weights``, exp terms are scaled by them.

    The weighted form computes ``w * exp(x) / sum(w * exp(x))`` so entries with
    zero weight sit outside the support and receive zero probability, yet the
    weights still get a gradient. Slices whose weights are all zero yield zeros.
    """
    x = as_tensor(x)
    xd = x.data
    if weights is None:
        shifted = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return _record("softmax", out, (x,), vjp)

    w = as_tensor(weights)
    try:
        wd = np.broadcast_to(w.data, xd.shape)
    except ValueError:
        raise ShapeError(f"softmax: weights {w.shape} do not broadcast to {xd.shape}") from None
    if np.any(wd < 0):
        raise DomainError("softmax: negative weights")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    z = (wd * e).sum(axis=axis, keepdims=True)
    safe_z = np.where(z > 0, z, 1.0)
    out = wd * e / safe_z
    wshape = w.shape

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = out * (g - dot)
        gw = (e / safe_z) * (g - dot)
        return gx, _unbroadcast(gw, wshape)

    return _record("softmax", out, (x, w), vjp)


def layer_norm(x, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalize along ``axis`` to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _record("layer_norm", out, (x,), vjp)


# --- reverse pass -----------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``output``.

    Returns a map from every tracked leaf tensor to its gradient and also
    stores each gradient on the leaf's ``.grad``. Contributions from a leaf
    used several times are summed.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node] = g
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def call(arr):
        val = f(Tensor(arr))
        val = val.data if isinstance(val, Tensor) else np.asarray(val, dtype=np.float64)
        if val.size != 1:
            raise ShapeError(f"finite_diff_grad: f must return a scalar, got shape {val.shape}")
        return float(val.reshape(-1)[0])

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = call(base.copy())
            flat[i] = orig - h
            fm = call(base.copy())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(|a|, |b|, 1e-8), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# central difference weights: offset multiples of h and their coefficients
_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                   h: float = 1e-5, order: int = 2) -> float:
    """Largest relative error between ``backward`` and central differences.

    ``loss_fn`` must rebuild the graph from the current ``params`` values on
    every call and must be deterministic. ``order=4`` uses the five-point
    stencil, whose truncation error is O(h^4) instead of O(h^2).
    """
    if order not in _STENCILS:
        raise ValueError(f"stencil order must be 2 or 4, got {order}")
    stencil = _STENCILS[order]
    params = list(params)
    grads = backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                acc = 0.0
                for k, w in stencil:
                    flat[i] = orig + k * h
                    acc += w * float(loss_fn().data.reshape(-1)[0])
                flat[i] = orig
                nflat[i] = acc / h
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# --- parameter initialisation ----------------------------------------------
def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], name: str | None = None) -> Tensor:
    """Trainable tensor drawn from U(-a, a), a = sqrt(6 / (fan_in + fan_out))."""
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


def zeros(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


def ones(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True, name=name)
