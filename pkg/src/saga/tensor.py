"""Dense float64 tensors with reverse-mode differentiation.

This is the only numerics substrate in the repo: a tape-free autodiff
engine in the micrograd style, where each tensor remembers its parents
and a vector-Jacobian closure per parent. ``backward`` walks the graph
in reverse topological order exactly once and accumulates gradients
into leaves.

Scope is deliberately narrow: 2-D/3-D matmul, the row-wise kernels the
aggregation model needs (softmax, layer norm, l2 normalize, max with
argmax, logsumexp, quick-gelu), elementwise arithmetic with numpy-style
broadcasting, and shape plumbing. No GPU, no mixed precision.

Row-wise kernels dispatch through ``saga.kernels`` (compiled extension
when built, numpy fallback otherwise).
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

EPS_NORM = 1e-12  # l2_normalize degenerate-norm threshold


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward, ...)."""


class DegenerateNormError(ValueError):
    """Normalization requested for a vector with near-zero norm."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Contiguous row-major float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_vjps", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._vjps = ()  # tuple of (parent Tensor, vjp callable)
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _nonscalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, op={self._op}{grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _nonscalar(t):
    raise GraphError(f"item() on non-scalar tensor of shape {tuple(t.shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, vjps) -> Tensor:
    """Build a result tensor, recording vjps only when grad is live."""
    out = Tensor(data)
    live = [(p, fn) for p, fn in vjps if p.requires_grad]
    if _grad_enabled and live:
        out.requires_grad = True
        out._vjps = tuple(live)
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        "add",
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        "sub",
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    inv = 1.0 / b.data
    return _make(
        a.data * inv,
        "div",
        [
            (a, lambda g: _unbroadcast(g * inv, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data * inv * inv, b.shape)),
        ],
    )


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, "exp", [(x, lambda g: g * y)])


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), "log", [(x, lambda g: g / x.data)])


def sqrt(x):
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, "sqrt", [(x, lambda g: g * (0.5 / y))])


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, "square", [(x, lambda g: g * (2.0 * x.data))])


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", [(x, lambda g: g * mask)])


def quick_gelu(x):
    """x * sigmoid(1.702 x): the smooth FFN activation used throughout."""
    x = as_tensor(x)
    y2, s2 = kernels.quickgelu_fwd(_rows(x.data))
    return _make(
        y2.reshape(x.shape),
        "quick_gelu",
        [(x, lambda g: kernels.quickgelu_bwd(_rows(x.data), s2, _rows(g)).reshape(x.shape))],
    )


# -- shape plumbing -------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), "reshape", [(x, lambda g: g.reshape(x.shape))])


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        "transpose",
        [(x, lambda g: np.ascontiguousarray(g.transpose(inv)))],
    )


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def make_vjp(i):
        def vjp(g):
            return np.ascontiguousarray(np.split(g, splits, axis=axis)[i])

        return vjp

    return _make(data, "concat", [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def tile_batch(x, batch):
    """Repeat a tensor along a new leading batch axis; grad sums it back."""
    x = as_tensor(x)
    data = np.ascontiguousarray(np.broadcast_to(x.data, (batch,) + x.shape))
    return _make(data, "tile_batch", [(x, lambda g: g.sum(axis=0))])


def index_axis(x, axis, index):
    """Select a single index along `axis` (the axis is dropped)."""
    x = as_tensor(x)
    sel = [slice(None)] * x.ndim
    sel[axis] = index
    sel = tuple(sel)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sel] = g
        return gx

    return _make(np.ascontiguousarray(x.data[sel]), "index_axis", [(x, vjp)])


# -- matmul ---------------------------------------------------------------


def matmul(a, b):
    """Matrix product for 2-D operands or batched 3-D (batch dims equal,
    or one operand 2-D and shared across the batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul supports 2-D/3-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")

    if a.ndim == 3 and b.ndim == 2:
        # Shared right operand: fold the batch into rows so BLAS sees one
        # large product instead of a loop of small ones.
        ba, m, k = a.shape
        n = b.shape[1]
        a2 = a.data.reshape(ba * m, k)
        out = (a2 @ b.data).reshape(ba, m, n)

        def vjp_a(g):
            return (g.reshape(ba * m, n) @ b.data.T).reshape(a.shape)

        def vjp_b(g):
            return a2.T @ g.reshape(ba * m, n)

        return _make(out, "matmul", [(a, vjp_a), (b, vjp_b)])

    out = a.data @ b.data

    def vjp_a(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        return _unbroadcast(ga, a.shape) if ga.ndim != a.ndim else ga

    def vjp_b(g):
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(gb, b.shape) if gb.ndim != b.ndim else gb

    return _make(out, "matmul", [(a, vjp_a), (b, vjp_b)])


# -- reductions -----------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    return _make(data, "sum", [(x, vjp)])


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- row-wise kernels (last axis) ----------------------------------------


def _rows(arr):
    """View any array as (rows, d) for the kernel layer."""
    return np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))


def _move_last(x, axis):
    """Return ndarray with `axis` moved last, plus the inverse mover."""
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        return x, lambda a: a
    moved = np.ascontiguousarray(np.moveaxis(x, axis, -1))
    return moved, lambda a: np.ascontiguousarray(np.moveaxis(a, -1, axis))


def softmax(x, axis=-1):
    """Rows along `axis` sum to 1; max-subtracted, stable for any finite input."""
    x = as_tensor(x)
    xm, back = _move_last(x.data, axis)
    y = kernels.softmax_fwd(_rows(xm)).reshape(xm.shape)

    def vjp(g):
        gm, _ = _move_last(g, axis)
        gx = kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(xm.shape)
        return back(gx)

    return _make(back(y), "softmax", [(x, vjp)])


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    if axis % x.ndim != x.ndim - 1:
        raise ShapeError("logsumexp implemented for the last axis only")
    rows = _rows(x.data)
    lse = kernels.logsumexp_fwd(rows)
    out_shape = x.shape[:-1] + ((1,) if keepdims else ())

    def vjp(g):
        gx = kernels.logsumexp_bwd(rows, lse, g.reshape(-1))
        return gx.reshape(x.shape)

    return _make(lse.reshape(out_shape), "logsumexp", [(x, vjp)])


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row standardization over the last axis, then affine.

    Variance is the biased estimator; eps sits inside the sqrt.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    rows = _rows(x.data)
    y, mu, rstd = kernels.layernorm_fwd(rows, gamma.data, beta.data, eps)

    def vjp_x(g):
        gx, _, _ = kernels.layernorm_bwd(rows, gamma.data, mu, rstd, _rows(g))
        return gx.reshape(x.shape)

    def vjp_gamma(g):
        _, gg, _ = kernels.layernorm_bwd(rows, gamma.data, mu, rstd, _rows(g))
        return gg

    def vjp_beta(g):
        return _rows(g).sum(axis=0)

    return _make(
        y.reshape(x.shape),
        "layer_norm",
        [(x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)],
    )


def l2_normalize(x, axis=-1):
    """Scale rows along the last axis to unit Euclidean norm."""
    x = as_tensor(x)
    if axis % max(x.ndim, 1) != x.ndim - 1:
        raise ShapeError("l2_normalize implemented for the last axis only")
    rows = x.data.reshape(-1, x.shape[-1]) if x.ndim > 1 else x.data.reshape(1, -1)
    try:
        y, norms = kernels.l2norm_fwd(np.ascontiguousarray(rows), EPS_NORM)
    except FloatingPointError:
        raise DegenerateNormError(
            f"cannot l2-normalize: a row has norm <= {EPS_NORM}"
        ) from None

    def vjp(g):
        g2 = g.reshape(rows.shape)
        return kernels.l2norm_bwd(y, norms, np.ascontiguousarray(g2)).reshape(x.shape)

    return _make(y.reshape(x.shape), "l2_normalize", [(x, vjp)])


def reduce_max_with_index(x, axis=-1):
    """Max and argmax along `axis`.

    Backward routes the incoming gradient only to the argmax position;
    ties resolve to the lowest index. Returns (values Tensor, indices
    ndarray).
    """
    x = as_tensor(x)
    xm, back = _move_last(x.data, axis)
    rows = _rows(xm)
    vals, idx = kernels.max_lastaxis(rows)
    out_shape = xm.shape[:-1]

    def vjp(g):
        gx = np.zeros_like(rows)
        np.put_along_axis(gx, idx[:, None], g.reshape(-1, 1), axis=-1)
        return back(gx.reshape(xm.shape))

    values = _make(vals.reshape(out_shape), "reduce_max", [(x, vjp)])
    return values, idx.reshape(out_shape)


# -- backward -------------------------------------------------------------


def _topo_order(root):
    """Iterative post-order over the recorded graph (no recursion limit)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Accumulates ``.grad`` on every tensor with ``requires_grad`` reachable
    from ``loss`` and returns a map ``{leaf Tensor: gradient ndarray}`` over
    the requires_grad leaves. Each graph node is visited exactly once; a
    second call on the same loss raises unless the graph was rebuilt.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor loss")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no requires_grad leaf reaches it")
    if loss._consumed:
        raise GraphError("backward already ran for this loss; rebuild the graph first")
    loss._consumed = True

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        g = node.grad
        for parent, vjp in node._vjps:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
    return {n: n.grad for n in order if n.requires_grad and not n._vjps}
