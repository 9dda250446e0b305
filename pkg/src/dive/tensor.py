"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its result eagerly and, when any operand requires a gradient,
records a closure that maps the output gradient to operand gradients. A call
to :func:`backward` walks the recorded nodes in reverse topological order and
then releases them, so each graph can be differentiated exactly once.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_LOG_2PI = float(np.log(2 * np.pi))

_CHECKED = True
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class GraphConsumedError(RuntimeError):
    pass


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Toggle NaN/Inf and log-domain checks inside the block."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, enabled
    try:
        yield
    finally:
        _CHECKED = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_checked() -> bool:
    return _CHECKED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> list[float]:
        """Row-major flat list of the entries."""
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar --------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _finish(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite value produced by '{op}'")
    t = Tensor(out)
    t._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _finish("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _finish("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: expected 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    B = b.data.reshape(-1, 1) if b.ndim == 1 else b.data
    out = A @ B

    def bw(g):
        g2 = g.reshape(out.shape)
        return ((g2 @ B.T).reshape(a.shape), (A.T @ g2).reshape(b.shape))

    if a.ndim == 1 and b.ndim == 1:
        res = out.reshape(())
    elif a.ndim == 1:
        res = out.reshape(-1)
    elif b.ndim == 1:
        res = out.reshape(-1)
    else:
        res = out
    return _finish("matmul", res, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a batch ``x`` of shape (n, k), ``w`` (k, m), ``b`` (m,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _finish("affine", out, (x, w, b), bw)


# -- elementwise unary -----------------------------------------------------
def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _finish("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def swish(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _finish("swish", a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if _CHECKED and np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _finish("exp", e, (a,), lambda g: (g * e,))


def softplus(a) -> Tensor:
    """Numerically stable ``log(1 + exp(a))``."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _finish("softplus", out, (a,), lambda g: (g * _sigmoid_np(x),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _finish("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _finish("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions ------------------------------------------------------------
def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _finish("sum", np.asarray(out, dtype=DTYPE), (a,),
                   lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)
    return _finish("mean", np.asarray(out, dtype=DTYPE), (a,),
                   lambda g: (_expand(g, a.shape, axis, keepdims) / count,))


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    se = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
    full = np.log(se) + m
    if keepdims:
        out = full
    else:
        out = np.squeeze(full, axis=axis) if axis is not None else full.reshape(())
    soft = np.exp(a.data - full)

    def bw(g):
        gg = g if keepdims else (np.expand_dims(g, axis) if axis is not None else g)
        return (gg * soft,)

    return _finish("logsumexp", out, (a,), bw)


def mixture_log_density(z, mu, logvar, logw: np.ndarray) -> Tensor:
    """Log-density of each row of ``z`` under weighted diagonal-Gaussian mixtures.

    Component ``j`` is N(mu[j], exp(logvar[j])) with log-weight ``logw[i, j]``
    for query row ``i``. Column 0 of the (m, 2) result scores the joint
    density; column 1 sums the per-dimension marginal log-densities. Fused
    because the (m, m, d) intermediate dominates training time otherwise.
    """
    z, mu, logvar = as_tensor(z), as_tensor(mu), as_tensor(logvar)
    if z.ndim != 2 or mu.shape != logvar.shape or z.shape[1] != mu.shape[1]:
        raise ShapeError(f"mixture_log_density: z {z.shape}, mu {mu.shape}, logvar {logvar.shape}")
    logw = np.asarray(logw, dtype=DTYPE)
    if logw.shape != (z.shape[0], mu.shape[0]):
        raise ShapeError(f"mixture_log_density: weights {logw.shape} for {z.shape[0]}x{mu.shape[0]} pairs")
    diff = z.data[:, None, :] - mu.data[None, :, :]
    scaled = diff * np.exp(-logvar.data)[None, :, :]
    pair = diff * scaled
    pair += (logvar.data + _LOG_2PI)[None, :, :]
    pair *= -0.5
    joint = pair.sum(axis=2) + logw
    jmax = joint.max(axis=1, keepdims=True)
    joint_w = np.exp(joint - jmax)
    joint_sum = joint_w.sum(axis=1, keepdims=True)
    joint_w /= joint_sum
    log_joint = np.log(joint_sum[:, 0]) + jmax[:, 0]
    # in place from here on: ``pair`` becomes the per-dimension responsibilities
    marg = pair
    marg += logw[:, :, None]
    mmax = marg.max(axis=1, keepdims=True)
    marg -= mmax
    np.exp(marg, out=marg)
    msum = marg.sum(axis=1, keepdims=True)
    marg /= msum
    log_marg = (np.log(msum) + mmax)[:, 0, :].sum(axis=1)
    out = np.stack([log_joint, log_marg], axis=1)

    def bw(g):
        w = marg * g[:, 1, None, None]
        w += (joint_w * g[:, 0, None])[:, :, None]
        ws = w * scaled
        return (-ws.sum(axis=1), ws.sum(axis=0), 0.5 * ((ws * diff).sum(axis=0) - w.sum(axis=0)))

    return _finish("mixture_log_density", out, (z, mu, logvar), bw)


def l1_norm(a, axis=None) -> Tensor:
    return sum_(abs_(a), axis=axis)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    out = n if keepdims else (np.squeeze(n, axis=axis) if axis is not None else n.reshape(()))

    def bw(g):
        gg = g if keepdims else (np.expand_dims(g, axis) if axis is not None else g)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(n > 0, a.data / np.where(n > 0, n, 1.0), 0.0)
        return (gg * r,)

    return _finish("l2_norm", out, (a,), bw)


# -- structural ------------------------------------------------------------
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, tuple(ts), bw)


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _finish("slice", np.array(out, dtype=DTYPE), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _finish("transpose", a.data.T, (a,), lambda g: (g.T,))


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": power,
    "matmul": matmul,
    "affine": affine,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "swish": swish,
    "log": log,
    "exp": exp,
    "softplus": softplus,
    "abs": abs_,
    "clip": clip,
    "sum": sum_,
    "mean": mean,
    "logsumexp": logsumexp,
    "mixture_log_density": mixture_log_density,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(op_kind: str, *operands, **kwargs) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*operands, **kwargs)


# -- reverse pass ----------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate (``+=``) into whatever is already stored.
    The interior graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE, copy=True).reshape(node.shape)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
