"""Dense float64 tensors with reverse-mode automatic differentiation.

A small eager engine: every operation records its inputs together with a
per-input vector-Jacobian rule, and ``backward`` replays the recorded graph
in reverse topological order. All storage is 64-bit; a non-finite value
anywhere raises immediately instead of propagating silently.

Broadcasting is deliberately restricted to scalars. Mixing shapes must be
spelled out with ``broadcast_to``/``add_bias`` so that shape bugs surface
at the call site.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeMismatchError",
    "NonFiniteError",
    "TapeError",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "getitem",
    "reshape",
    "transpose",
    "broadcast_to",
    "add_bias",
    "relu",
    "sigmoid",
    "exp",
    "sqrt",
    "maximum_scalar",
    "softmax",
    "sum_all",
    "mean_all",
    "sum_axis",
    "dropout",
    "group_norm",
    "row_normalize",
    "mse",
    "sq_l2",
    "linear",
    "flatten_tensors",
    "backward",
]


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeMismatchError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeError(TensorError):
    pass


# Gradient recording can be switched off for protocol passes whose outputs
# never reach a loss (saves the graph bookkeeping entirely). Thread-local:
# concurrent client updates must not see each other's state.
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _check_finite(arr: np.ndarray, where: str) -> None:
    # One-pass reduction: any NaN/Inf poisons the sum.
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"tensor: non-finite values produced by {where}")


class Tensor:
    """n-dimensional float64 value with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjps: tuple = ()
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._vjps = ()
        out._consumed = False
        return out

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; every route goes through the module-level ops.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _from_op(data, parents, vjps, where: str) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, where)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out._consumed = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _is_scalar_shaped(arr: np.ndarray) -> bool:
    return arr.size == 1


def _binary_shape_check(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape == b.shape:
        return
    if _is_scalar_shaped(a) or _is_scalar_shaped(b):
        return
    raise ShapeMismatchError(
        f"{name}: shapes {a.shape} and {b.shape} do not match "
        f"(broadcasting is limited to scalars)"
    )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Collapse a gradient onto a scalar-shaped operand.
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a.data, b.data, "add")
    ash, bsh = a.shape, b.shape
    return _from_op(
        a.data + b.data,
        (a, b),
        (lambda g: _reduce_to(g, ash), lambda g: _reduce_to(g, bsh)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a.data, b.data, "sub")
    ash, bsh = a.shape, b.shape
    return _from_op(
        a.data - b.data,
        (a, b),
        (lambda g: _reduce_to(g, ash), lambda g: _reduce_to(-g, bsh)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _from_op(
        ad * bd,
        (a, b),
        (lambda g: _reduce_to(g * bd, ad.shape), lambda g: _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape_check(a.data, b.data, "div")
    ad, bd = a.data, b.data
    return _from_op(
        ad / bd,
        (a, b),
        (
            lambda g: _reduce_to(g / bd, ad.shape),
            lambda g: _reduce_to(-g * ad / (bd * bd), bd.shape),
        ),
        "div",
    )


# ---------------------------------------------------------------------------
# matrix products


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if not (2 <= ad.ndim <= 3) or not (2 <= bd.ndim <= 3):
        raise ShapeMismatchError(
            f"matmul: operands must be rank 2 or 3, got {ad.shape} and {bd.shape}"
        )
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions do not agree: {ad.shape} x {bd.shape}"
        )
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeMismatchError(
            f"matmul: stacked operands need equal batch sizes: {ad.shape} x {bd.shape}"
        )

    if ad.ndim == 3 and bd.ndim == 2:
        # Flatten the batch into the row dimension: one large GEMM instead
        # of a slice-by-slice product.
        bsz, m, k = ad.shape
        p = bd.shape[1]
        out = (ad.reshape(bsz * m, k) @ bd).reshape(bsz, m, p)

        def da(g):
            return (g.reshape(bsz * m, p) @ bd.T).reshape(ad.shape)

        def db(g):
            return ad.reshape(bsz * m, k).T @ g.reshape(bsz * m, p)

        return _from_op(out, (a, b), (da, db), "matmul")

    def da(g):
        r = g @ _swap_last(bd)
        if ad.ndim == 2 and r.ndim == 3:
            r = r.sum(axis=0)
        return r

    def db(g):
        r = _swap_last(ad) @ g
        if bd.ndim == 2 and r.ndim == 3:
            r = r.sum(axis=0)
        return r

    return _from_op(ad @ bd, (a, b), (da, db), "matmul")


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatchError("concat: need at least one tensor")
    ref = ts[0].data.shape
    nd = len(ref)
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != nd or any(s[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeMismatchError(
                f"concat: incompatible shapes {ref} and {s} along axis {axis}"
            )
    out = np.concatenate([t.data for t in ts], axis=ax)

    vjps = []
    offset = 0
    for t in ts:
        start, stop = offset, offset + t.data.shape[ax]
        offset = stop

        def make(lo, hi):
            def vjp(g):
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                return g[tuple(sl)]

            return vjp

        vjps.append(make(start, stop))
    return _from_op(out, tuple(ts), tuple(vjps), "concat")


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad[key]

    def da(g):
        z = np.zeros_like(ad)
        np.add.at(z, key, g)
        return z

    return _from_op(out, (a,), (da,), "slice")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _from_op(ad.reshape(shape), (a,), (lambda g: g.reshape(ad.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _from_op(
        a.data.transpose(axes), (a,), (lambda g: g.transpose(inv),), "transpose"
    )


def broadcast_to(a, shape) -> Tensor:
    """Explicitly expand ``a`` to ``shape`` (the only sanctioned broadcast)."""
    a = as_tensor(a)
    ad = a.data
    shape = tuple(shape)
    try:
        out = np.broadcast_to(ad, shape)
    except ValueError as err:
        raise ShapeMismatchError(f"broadcast_to: {ad.shape} -> {shape}: {err}") from None

    def da(g):
        extra = len(shape) - ad.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        squeeze = tuple(i for i, d in enumerate(ad.shape) if d == 1 and g.shape[i] != 1)
        if squeeze:
            g = g.sum(axis=squeeze, keepdims=True)
        return g

    return _from_op(out, (a,), (da,), "broadcast_to")


def add_bias(x, b) -> Tensor:
    """Add a rank-1 bias along the last axis (explicit row broadcast)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(
            f"add_bias: bias {b.shape} does not fit last axis of {x.shape}"
        )
    width = b.shape[0]
    return _from_op(
        x.data + b.data,
        (x, b),
        (lambda g: g, lambda g: g.reshape(-1, width).sum(axis=0)),
        "add_bias",
    )


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _from_op(np.maximum(ad, 0.0), (a,), (lambda g: g * (ad > 0),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _from_op(out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _from_op(out, (a,), (lambda g: g * out,), "exp")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _from_op(out, (a,), (lambda g: g * 0.5 / out,), "sqrt")


def maximum_scalar(a, floor: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _from_op(
        np.maximum(ad, floor), (a,), (lambda g: g * (ad > floor),), "maximum_scalar"
    )


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if ad.size and not np.isfinite(ad.sum()):
        raise NonFiniteError("softmax: non-finite input")
    out = ad - ad.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def da(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _from_op(out, (a,), (da,), "softmax")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _from_op(ad.sum(), (a,), (lambda g: np.full(ad.shape, g),), "sum_all")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    k = 1.0 / ad.size
    return _from_op(ad.mean(), (a,), (lambda g: np.full(ad.shape, g * k),), "mean_all")


def sum_axis(a, axis: int) -> Tensor:
    """Sum along one axis, keeping the reduced dimension."""
    a = as_tensor(a)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=True)
    return _from_op(out, (a,), (lambda g: np.broadcast_to(g, ad.shape),), "sum_axis")


# ---------------------------------------------------------------------------
# stochastic / composite layers


def dropout(a, p: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout: eval mode is the identity, train mode rescales kept
    activations by 1/(1-p) so the expectation is preserved."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate {p} outside [0, 1)")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: train mode needs an explicit rng")
    mask = (rng.random(a.shape, dtype=np.float32) >= p).astype(np.float64)
    mask *= 1.0 / (1.0 - p)
    return _from_op(a.data * mask, (a,), (lambda g: g * mask,), "dropout")


def group_norm(x, num_groups: int, eps: float = 1e-5, scale: Tensor | None = None,
               shift: Tensor | None = None) -> Tensor:
    """Normalize channel groups of the last axis to zero mean / unit variance,
    then apply the learnable per-channel scale and shift.

    Single primitive with an analytic gradient (the composite chain is a
    hot spot inside the encoder blocks)."""
    x = as_tensor(x)
    channels = x.shape[-1]
    if channels % num_groups:
        raise ShapeMismatchError(
            f"group_norm: {channels} channels not divisible into {num_groups} groups"
        )
    gsz = channels // num_groups
    gshape = x.shape[:-1] + (num_groups, gsz)
    xd = x.data.reshape(gshape)
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = np.einsum("...i,...i->...", centered, centered)[..., None] / gsz
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered
    norm *= inv
    out = norm.reshape(x.shape)

    parents: list[Tensor] = [x]
    sd = scale.data if scale is not None else None
    if scale is not None:
        out = out * sd
    if shift is not None:
        out = out + shift.data

    def dx(g):
        gy = g.reshape(gshape) if sd is None else (g * sd).reshape(gshape)
        gmean = gy.mean(axis=-1, keepdims=True)
        gymean = np.einsum("...i,...i->...", gy, norm)[..., None] / gsz
        r = gy - gmean
        r -= norm * gymean
        r *= inv
        return r.reshape(x.shape)

    vjps: list = [dx]
    if scale is not None:
        parents.append(scale)
        vjps.append(lambda g: np.einsum("ij,ij->j", g.reshape(-1, channels),
                                        norm.reshape(-1, channels)))
    if shift is not None:
        parents.append(shift)
        vjps.append(lambda g: g.reshape(-1, channels).sum(axis=0))
    return _from_op(out, tuple(parents), tuple(vjps), "group_norm")


def row_normalize(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance along the last axis with a variance floor:
    rows whose variance falls below eps collapse to (near) zero instead of
    being amplified."""
    x = as_tensor(x)
    n = x.shape[-1]
    mu = mul(sum_axis(x, -1), 1.0 / n)
    centered = sub(x, broadcast_to(mu, x.shape))
    var = mul(sum_axis(mul(centered, centered), -1), 1.0 / n)
    scale = sqrt(maximum_scalar(var, eps))
    return div(centered, broadcast_to(scale, x.shape))


def mse(pred, truth) -> Tensor:
    d = sub(pred, truth)
    return mean_all(mul(d, d))


def sq_l2(a, b) -> Tensor:
    d = sub(a, b)
    return sum_all(mul(d, d))


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add_bias(out, b)
    return out


def flatten_tensors(tensors) -> Tensor:
    """Concatenate tensors into one rank-1 vector (gradient-tracked)."""
    return concat([reshape(t, (as_tensor(t).size,)) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root onto every reachable leaf.

    Each recorded graph supports exactly one reverse pass; rerunning
    without a fresh forward raises."""
    if root.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root._consumed:
        raise TapeError("backward: graph already consumed; run a new forward pass")
    root._consumed = True
    if not root.requires_grad:
        return

    # Post-order DFS: parents land before children, so the reversed order
    # propagates gradients outputs-first. State: absent = undiscovered,
    # False = discovered (parents pending), True = emitted.
    order: list[Tensor] = []
    state: dict[int, bool] = {}
    stack: list[Tensor] = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        st = state.get(nid)
        if st is None:
            state[nid] = False
            for p in node._parents:
                if p.requires_grad and state.get(id(p)) is None:
                    stack.append(p)
        elif st is False:
            state[nid] = True
            order.append(node)
            stack.pop()
        else:
            stack.pop()

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
