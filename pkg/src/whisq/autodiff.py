"""Dense float64 tensors with reverse-mode differentiation.

The engine covers exactly the operations the scoring pipeline composes:
affine maps, batched matmul, (masked) softmax, masked pooling, ReLU,
log/exp reductions, concatenation, and the robust regression loss.
Fused custom nodes (the entropic-transport divergence in
``whisq.losses``) plug into the same edge mechanism.

Every op accepts plain ndarrays as well as ``Tensor`` values and returns
a ``Tensor`` only when some input actually requires a gradient. A call
on plain arrays is plain numpy, which keeps finite-difference sweeps
cheap; traced calls additionally validate that no non-finite value is
produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

REL_ERR_DENOM_FLOOR = 1e-12


def _finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced")


class Tensor:
    """Graph node: f64 data plus reverse edges to parents.

    ``_edges`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the
    output cotangent to the parent's cotangent contribution.
    """

    __slots__ = ("data", "grad", "requires_grad", "_edges")

    # Make `ndarray <op> Tensor` defer to our reflected operators.
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._edges = ()

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
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar mirroring ndarray so model code is generic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _d(x):
    return x.data if isinstance(x, Tensor) else x


def _edges_of(pairs):
    return [(s, fn) for s, fn in pairs if isinstance(s, Tensor) and s.requires_grad]


def _result(out, pairs):
    edges = _edges_of(pairs)
    if not edges:
        return np.asarray(out, dtype=np.float64)
    t = Tensor.__new__(Tensor)
    arr = np.asarray(out, dtype=np.float64)
    _finite(arr)
    t.data = arr
    t.grad = None
    t.requires_grad = True
    t._edges = tuple(edges)
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast cotangent back to the parent's shape."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    ad, bd = _d(a), _d(b)
    out = ad + bd
    return _result(out, [
        (a, lambda g: _unbroadcast(g, np.shape(ad))),
        (b, lambda g: _unbroadcast(g, np.shape(bd))),
    ])


def sub(a, b):
    ad, bd = _d(a), _d(b)
    out = ad - bd
    return _result(out, [
        (a, lambda g: _unbroadcast(g, np.shape(ad))),
        (b, lambda g: _unbroadcast(-g, np.shape(bd))),
    ])


def mul(a, b):
    ad, bd = _d(a), _d(b)
    out = ad * bd
    return _result(out, [
        (a, lambda g: _unbroadcast(g * bd, np.shape(ad))),
        (b, lambda g: _unbroadcast(g * ad, np.shape(bd))),
    ])


def matmul(a, b):
    """2D or batched 3D matmul; batch dims must match exactly."""
    ad, bd = _d(a), _d(b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = ad @ bd
    return _result(out, [
        (a, lambda g: g @ bd.swapaxes(-1, -2)),
        (b, lambda g: ad.swapaxes(-1, -2) @ g),
    ])


def relu(x):
    xd = _d(x)
    out = np.maximum(xd, 0.0)
    # subgradient at exactly 0 is defined as 0
    return _result(out, [(x, lambda g: g * (xd > 0.0))])


def exp(x):
    xd = _d(x)
    with np.errstate(over="ignore"):
        out = np.exp(xd)
    return _result(out, [(x, lambda g: g * out)])


def log(x):
    xd = _d(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(xd)
    return _result(out, [(x, lambda g: g / xd)])


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return axis % ndim
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False):
    xd = _d(x)
    ax = _norm_axis(axis, xd.ndim)
    out = xd.sum(axis=ax, keepdims=keepdims)

    def vjp(g):
        if ax is None:
            return np.broadcast_to(np.asarray(g), xd.shape)
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, ax)
        return np.broadcast_to(gg, xd.shape)

    return _result(out, [(x, vjp)])


def tensor_mean(x, axis=None, keepdims=False):
    xd = _d(x)
    ax = _norm_axis(axis, xd.ndim)
    out = xd.mean(axis=ax, keepdims=keepdims)
    if ax is None:
        count = xd.size
    elif isinstance(ax, int):
        count = xd.shape[ax]
    else:
        count = int(np.prod([xd.shape[a] for a in ax]))

    def vjp(g):
        if ax is None:
            return np.broadcast_to(np.asarray(g) / count, xd.shape)
        gg = np.asarray(g) / count
        if not keepdims:
            gg = np.expand_dims(gg, ax)
        return np.broadcast_to(gg, xd.shape)

    return _result(out, [(x, vjp)])


def reshape(x, shape):
    xd = _d(x)
    out = xd.reshape(shape)
    return _result(out, [(x, lambda g: np.asarray(g).reshape(xd.shape))])


def transpose(x, axes=None):
    xd = _d(x)
    out = xd.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _result(out, [(x, lambda g: np.asarray(g).transpose(inv))])


def swapaxes(x, a, b):
    xd = _d(x)
    out = xd.swapaxes(a, b)
    return _result(out, [(x, lambda g: np.asarray(g).swapaxes(a, b))])


def getitem(x, idx):
    xd = _d(x)
    out = xd[idx]

    def vjp(g):
        full = np.zeros_like(xd)
        np.add.at(full, idx, np.asarray(g))
        return full

    return _result(out, [(x, vjp)])


def concat(parts, axis=-1):
    datas = [_d(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    offsets = np.cumsum([0] + [d.shape[ax] for d in datas])
    pairs = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(lo, hi)
            return np.ascontiguousarray(np.asarray(g)[tuple(sl)])

        pairs.append((p, vjp))
    return _result(out, pairs)


def stack(parts, axis=0):
    datas = [_d(p) for p in parts]
    out = np.stack(datas, axis=axis)
    pairs = []
    for i, p in enumerate(parts):
        pairs.append((p, lambda g, i=i: np.take(np.asarray(g), i, axis=axis)))
    return _result(out, pairs)


def logsumexp(x, axis=-1, keepdims=False):
    xd = _d(x)
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return gg * (e / s)

    return _result(out, [(x, vjp)])


def softmax(x, mask=None, axis=-1):
    """Softmax along ``axis``; entries where ``mask`` is falsy are exactly 0.

    ``mask`` must be broadcastable to ``x``. A slice with no valid entry
    is an error (there is nothing to normalize over).
    """
    xd = _d(x)
    if mask is None:
        m = np.max(xd, axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not valid.any(axis=axis).all():
            raise NumericError("softmax slice has zero valid entries")
        neg = np.where(valid, xd, -np.inf)
        m = np.max(neg, axis=axis, keepdims=True)
        e = np.where(valid, np.exp(neg - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = e / s

    def vjp(g):
        gg = np.asarray(g)
        dot = (gg * out).sum(axis=axis, keepdims=True)
        return out * (gg - dot)

    return _result(out, [(x, vjp)])


def masked_mean(x, mask, axis):
    """Mean over ``axis`` restricted to positions where ``mask`` is truthy.

    ``mask`` must have the shape of ``x`` without its trailing feature
    axis (it is expanded across features). A row with no valid position
    is an error.
    """
    xd = _d(x)
    mk = np.asarray(mask, dtype=np.float64)
    if mk.shape != xd.shape:
        mk = np.expand_dims(mk, -1)
        mk = np.broadcast_to(mk, xd.shape)
    count = mk.sum(axis=axis)
    if np.any(count == 0):
        raise NumericError("masked mean over a fully masked row")
    out = (xd * mk).sum(axis=axis) / count

    def vjp(g):
        gg = np.expand_dims(np.asarray(g) / count, axis)
        return gg * mk

    return _result(out, [(x, vjp)])


def huber(pred, target, delta: float):
    """Mean Huber loss over a batch: quadratic within ``delta``, linear beyond."""
    if delta <= 0:
        raise DataError("huber delta must be positive")
    pd, td = _d(pred), _d(target)
    if np.size(pd) == 0:
        raise DataError("huber loss over an empty batch")
    r = pd - td
    a = np.abs(r)
    quad = a <= delta
    out = np.mean(np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)))
    n = np.size(pd)

    def dpred(g):
        # branches agree at |r| == delta: both give delta * sign(r)
        return np.asarray(g) * np.where(quad, r, delta * np.sign(r)) / n

    return _result(out, [(pred, dpred), (target, lambda g: -dpred(g))])


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into its graph leaves."""
    if not isinstance(loss, Tensor):
        raise NumericError("backward expects a traced Tensor")
    if loss.data.size != 1:
        raise NumericError(f"loss must be scalar, got shape {loss.data.shape}")

    # iterative postorder: parents land before children, so reversed(topo)
    # visits each node after everything downstream of it
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._edges:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def value_and_grad(fn, params, *args):
    """Evaluate ``fn(tensor_params, *args)`` and differentiate it.

    ``params`` maps names to ndarrays; each is wrapped as a gradient
    leaf. Returns the scalar value and a dict of gradients, one per
    parameter (zeros for parameters the computation never touched).
    """
    tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = fn(tparams, *args)
    if not isinstance(out, Tensor):
        # the computation never touched a parameter
        val = float(np.asarray(out))
        return val, {k: np.zeros_like(v) for k, v in params.items()}
    if out.data.size != 1:
        raise NumericError(f"loss must be scalar, got shape {out.data.shape}")
    backward(out)
    grads = {}
    for k, v in params.items():
        g = tparams[k].grad
        if g is None:
            g = np.zeros_like(v)
        else:
            g = np.asarray(g, dtype=np.float64)
            _finite(g)
        grads[k] = g
    return float(out.data), grads


def finite_difference_grad(fn, params, h: float = 1e-5):
    """Central-difference gradient of ``fn(params)`` per scalar parameter.

    The independent oracle for ``value_and_grad``: ``fn`` takes the raw
    ndarray dict and returns a float. Perturbs entries in place and
    restores them.
    """
    if h <= 0:
        raise DataError("finite difference step must be positive")
    base1 = float(fn(params))
    base2 = float(fn(params))
    if base1 != base2:
        raise NumericError("loss computation is not deterministic")
    grads = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        out = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(params))
            flat[i] = orig - h
            fm = float(fn(params))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
        grads[name] = out.reshape(arr.shape)
    return grads


# ---------------------------------------------------------------------------
# gradient comparison report
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    analytic_norm: float
    numeric_norm: float


@dataclass
class GradReport:
    checks: list

    def max_rel_err(self, names=None) -> float:
        sel = [c for c in self.checks if names is None or c.name in names]
        return max((c.max_rel_err for c in sel), default=0.0)

    def to_dict(self) -> dict:
        return {
            c.name: {
                "max_rel_err": c.max_rel_err,
                "analytic_norm": c.analytic_norm,
                "numeric_norm": c.numeric_norm,
            }
            for c in self.checks
        }


def compare_grads(analytic, numeric, atol: float = 0.0) -> GradReport:
    """Elementwise relative error |a-n| / max(|a|, |n|, floor), per parameter.

    Entries where both gradients are below ``atol`` are counted as
    agreeing: central differences of an f64 scalar cannot resolve below
    roughly ulp(loss)/2h, so relative error carries no signal there.
    """
    checks = []
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        mag = np.maximum(np.abs(a), np.abs(n))
        rel = np.abs(a - n) / np.maximum(mag, REL_ERR_DENOM_FLOOR)
        if atol > 0.0:
            rel = np.where(mag < atol, 0.0, rel)
        checks.append(ParamCheck(
            name=name,
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            analytic_norm=float(np.linalg.norm(a)),
            numeric_norm=float(np.linalg.norm(n)),
        ))
    return GradReport(checks=checks)
