"""A small reverse-mode autodiff engine over float64 NumPy arrays.

Only the operations the point network, the transport losses and the image
network need are provided.  A graph may be differentiated once; calling
:meth:`Tensor.backward` a second time raises :class:`GraphConsumed`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import GraphConsumed, NonScalarLoss, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "concat",
    "gather",
    "relu",
    "leaky_relu",
    "max_reduce",
    "mean_reduce",
    "sum_reduce",
    "square",
    "exp",
    "row_norm",
    "reshape",
    "conv2d",
    "AdamState",
    "adam_step",
    "Adam",
    "GradCheckReport",
    "grad_check",
]


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their
    ``grad`` is filled in by :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable parameter leaf."""
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumed("this graph has already been differentiated")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            node._consumed = True
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{node._op}: gradient shape {pg.shape} != operand shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
        self._consumed = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)``; the right operand must be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(data, ts, backward, "concat")


def gather(a, indices) -> Tensor:
    """Rows of ``a`` selected by an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim < 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError(f"gather: indices out of range for shape {a.shape}")
    n = a.shape[0]
    flat = idx.reshape(-1) % max(n, 1)

    def backward(g):
        rest = a.shape[1:]
        g2 = g.reshape(len(flat), -1)
        sel = sp.csr_matrix(
            (np.ones(len(flat)), (flat, np.arange(len(flat)))), shape=(n, len(flat))
        )
        return (np.asarray(sel @ g2).reshape((n,) + rest),)

    return _node(a.data[idx], (a,), backward, "gather")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, alpha=0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = a.data * alpha
    np.copyto(out, a.data, where=mask)

    def backward(g):
        gi = g * alpha
        np.copyto(gi, g, where=mask)
        return (gi,)

    return _node(out, (a,), backward, "leaky_relu")


def max_reduce(a, axis) -> Tensor:
    """Max along ``axis``; the gradient goes to the first arg-max only."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"max_reduce: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    out = a.data.max(axis=axis)
    slices = np.moveaxis(a.data, axis, 0)
    if len(slices) <= 64:
        # sweeping a short axis backwards beats a strided argmax by far and
        # leaves the first index on ties
        arg = np.zeros(out.shape, dtype=np.intp)
        for j in range(len(slices) - 1, 0, -1):
            arg = np.where(slices[j] == out, j, arg)
        arg = np.where(slices[0] == out, 0, arg)
    else:
        arg = np.argmax(slices, axis=0)

    def backward(g):
        full = np.zeros(a.shape)
        view = np.moveaxis(full, axis, 0)
        for j in range(len(slices)):
            view[j] = np.where(arg == j, g, 0.0)
        return (full,)

    return _node(out, (a,), backward, "max_reduce")


def sum_reduce(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean_reduce(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), backward, "mean")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data**2, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def row_norm(a, eps=1e-12) -> Tensor:
    """Euclidean norm over the last axis; zero gradient where the norm < ``eps``."""
    a = as_tensor(a)
    nrm = np.sqrt((a.data**2).sum(axis=-1))
    ok = nrm >= eps
    inv = np.where(ok, 1.0 / np.where(ok, nrm, 1.0), 0.0)

    def backward(g):
        return ((g * inv)[..., None] * a.data,)

    return _node(nrm, (a,), backward, "row_norm")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


# --- conv2d ---------------------------------------------------------------


def _reflect_pad(x):
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)], mode="reflect")


def _reflect_pad_backward(gp):
    # adjoint of 1-pixel reflect padding on the last two axes
    g = gp[..., 1:-1].copy()
    g[..., 1] += gp[..., 0]
    g[..., -2] += gp[..., -1]
    h = g[..., 1:-1, :].copy()
    h[..., 1, :] += g[..., 0, :]
    h[..., -2, :] += g[..., -1, :]
    return h


_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def conv2d(x, w, b=None) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, reflect padding.

    ``x``: (B, C_in, H, W); ``w``: (C_out, C_in, 3, 3); ``b``: (C_out,).
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes x={x.shape} w={w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match w={w.shape}")
    B, cin, H, W = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"conv2d: reflect padding needs H, W >= 2, got {x.shape}")
    cout = w.shape[0]
    xp = _reflect_pad(x.data)

    if cin <= cout:
        # shift the (small) input: cols (B, 9*cin, H*W)
        cols = np.stack(
            [xp[:, :, dy : dy + H, dx : dx + W] for dy, dx in _OFFSETS], axis=2
        ).reshape(B, cin * 9, H * W)
        wmat = w.data.reshape(cout, cin * 9)
        out = (wmat @ cols).reshape(B, cout, H, W)

        def backward(g):
            g2 = g.reshape(B, cout, H * W)
            gw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gcols = (wmat.T @ g2).reshape(B, cin, 9, H, W)
            gp = np.zeros(xp.shape)
            for t, (dy, dx) in enumerate(_OFFSETS):
                gp[:, :, dy : dy + H, dx : dx + W] += gcols[:, :, t]
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return (_reflect_pad_backward(gp), gw, gb)[: 3 if b is not None else 2]

    else:
        # shift the (small) output: per-offset responses on the padded grid
        Hp, Wp = H + 2, W + 2
        wstack = w.data.transpose(2, 3, 0, 1).reshape(9 * cout, cin)
        resp = (wstack @ xp.reshape(B, cin, Hp * Wp)).reshape(B, 9, cout, Hp, Wp)
        out = np.zeros((B, cout, H, W))
        for t, (dy, dx) in enumerate(_OFFSETS):
            out += resp[:, t, :, dy : dy + H, dx : dx + W]

        def backward(g):
            gresp = np.zeros((B, 9, cout, Hp, Wp))
            for t, (dy, dx) in enumerate(_OFFSETS):
                gresp[:, t, :, dy : dy + H, dx : dx + W] = g
            gresp = gresp.reshape(B, 9 * cout, Hp * Wp)
            xflat = xp.reshape(B, cin, Hp * Wp)
            gw = (gresp @ xflat.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(3, 3, cout, cin).transpose(2, 3, 0, 1)
            gxp = (wstack.T @ gresp).reshape(B, cin, Hp, Wp)
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return (_reflect_pad_backward(gxp), gw, gb)[: 3 if b is not None else 2]

    if b is not None:
        out = out + b.data[None, :, None, None]
        return _node(out, (x, w, b), backward, "conv2d")
    return _node(out, (x, w), backward, "conv2d")


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new arrays, leaves inputs untouched."""
    state.step += 1
    t = state.step
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} != parameter {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        new[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, state


class Adam:
    """Stateful wrapper around :func:`adam_step` for named arrays."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: dict) -> dict:
        self.params, self.state = adam_step(self.params, grads, self.state)
        return self.params


# --- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn, params: dict, h=1e-5, tolerance=1e-3, max_coords=1000, n_probes=8, seed=0):
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` maps a dict of :class:`Tensor` to a scalar :class:`Tensor`.  For
    each parameter with at most ``max_coords`` entries every coordinate is
    perturbed; larger ones are probed along ``n_probes`` random unit
    directions.  The error for a parameter is the largest absolute
    discrepancy divided by the largest gradient magnitude involved.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = fn(leaves)
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def f(name, arr):
        args = {k: Tensor(arr if k == name else v) for k, v in params.items()}
        return float(fn(args).data)

    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in params.items():
        a = analytic[name]
        if p.size <= max_coords:
            num = np.empty(p.size)
            flat = p.reshape(-1)
            for i in range(p.size):
                old = flat[i]
                flat[i] = old + h
                fp = f(name, p)
                flat[i] = old - h
                fm = f(name, p)
                flat[i] = old
                num[i] = (fp - fm) / (2 * h)
            ana = a.reshape(-1)
        else:
            num = np.empty(n_probes)
            ana = np.empty(n_probes)
            for j in range(n_probes):
                d = rng.normal(size=p.shape)
                d /= np.linalg.norm(d)
                num[j] = (f(name, p + h * d) - f(name, p - h * d)) / (2 * h)
                ana[j] = float((a * d).sum())
        scale = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-12)
        per_param[name] = float(np.abs(num - ana).max(initial=0.0) / scale)
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(worst, per_param, tolerance)
