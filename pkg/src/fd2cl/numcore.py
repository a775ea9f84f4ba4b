"""Small reverse-mode autodiff over numpy arrays.

Only the operations the detector needs are provided. Operations executed
inside an active :class:`Tape` whose inputs depend on a trainable tensor are
recorded; :meth:`Tape.gradient` replays the records once each, newest first.
Recording order is a topological order, so its reverse is a valid backward
schedule. Gradients are returned, never accumulated into the tensors.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, EvaluationError

_TAPES = []


class Tensor:
    """An ndarray plus a trainable flag.

    Operation outputs are never modified in place. Parameters are the one
    exception: the optimiser rebinds ``data`` to a fresh array between steps.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def gradient(self, root, wrt, seed=None):
        """Gradients of ``root`` with respect to each tensor in ``wrt``.

        ``seed`` is the upstream gradient of ``root`` (ones when omitted, so a
        scalar root yields the ordinary gradient). Tensors that ``root`` does
        not depend on get zero arrays.
        """
        grads = {id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.data.dtype)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue
            for inp, g in zip(node.inputs, node.backward(gout)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape))
        return out


def active_tape():
    return _TAPES[-1] if _TAPES else None


def emit(data, inputs, backward):
    """Wrap ``data`` as an operation output and record it when needed.

    ``backward(gout)`` must return one gradient (or None) per input. Custom
    operations outside this module use this hook too.
    """
    data = np.asarray(data)
    if not np.isfinite(data).all():
        raise EvaluationError("operation produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return emit(a.data @ b.data, (a, b), backward)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return emit(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return emit(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return emit(a.data * b.data, (a, b), backward)


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return emit(a.data * c, (a,), lambda g: (g * c,))


def affine(a, mult, shift):
    """``a * mult + shift`` with scalar constants (no gradient to the constants)."""
    a = as_tensor(a)
    mult = float(mult)
    return emit(a.data * mult + float(shift), (a,), lambda g: (g * mult,))


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    y, t = kernels.gelu_forward(x.data)
    return emit(y, (x,), lambda g: (kernels.gelu_backward(x.data, t, g),))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x, shape):
    x = as_tensor(x)
    return emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors))

    return emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def mean_of(tensors):
    """Elementwise mean of equally shaped tensors."""
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise DimensionError(f"mean_of: shape {t.shape} != {tensors[0].shape}")
    k = len(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc = acc + t.data
    return emit(acc / k, tensors, lambda g: tuple(g / k if t.requires_grad else None for t in tensors))


def sum_all(x):
    x = as_tensor(x)
    return emit(np.array([x.data.sum()]), (x,), lambda g: (np.full(x.shape, g[0]),))


def mean_all(x):
    x = as_tensor(x)
    n = x.size
    return emit(np.array([x.data.sum() / n]), (x,), lambda g: (np.full(x.shape, g[0] / n),))


def l2_normalize_rows(x, eps=1e-12):
    """Divide every row by its Euclidean norm; rows with norm below ``eps`` are rejected."""
    from .errors import DegenerateFeatureError

    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    if np.any(norms < eps):
        raise DegenerateFeatureError(f"row norm below {eps}; cannot normalise")
    y = x.data / norms

    def backward(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return emit(y, (x,), backward)


def row_dot(x, rows):
    """Per-row inner product of ``x`` with constant ``rows`` (same shape)."""
    x = as_tensor(x)
    r = np.asarray(rows, dtype=x.data.dtype)
    if r.shape != x.shape:
        raise DimensionError(f"row_dot: {x.shape} vs {r.shape}")
    return emit(np.sum(x.data * r, axis=1), (x,), lambda g: (g[:, None] * r,))


def log_sigmoid(z):
    """Numerically stable log(sigmoid(z))."""
    z = as_tensor(z)
    val = -np.logaddexp(0.0, -z.data)
    sig_neg = 0.5 * (1.0 - np.tanh(0.5 * z.data))  # sigmoid(-z)
    return emit(val, (z,), lambda g: (g * sig_neg,))


def bce_with_logits(z, labels):
    """Mean binary cross-entropy of logits ``z`` against 0/1 ``labels``."""
    z = as_tensor(z)
    y = np.asarray(labels, dtype=z.data.dtype).reshape(z.shape)
    if z.data.ndim != 1:
        raise DimensionError("bce_with_logits expects a 1-D logit vector")
    n = z.size
    # max(z,0) - z*y + log(1 + exp(-|z|))
    per = np.maximum(z.data, 0.0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z.data))

    def backward(g):
        return (g[0] * (sig - y) / n,)

    return emit(np.array([per.sum() / n]), (z,), backward)


def weighted_sq_dist(theta, anchor, weight):
    """``sum(weight * (theta - anchor)**2)`` with constant anchor and weight."""
    theta = as_tensor(theta)
    anchor = np.asarray(anchor)
    weight = np.asarray(weight)
    if anchor.shape != theta.shape or weight.shape != theta.shape:
        raise DimensionError("weighted_sq_dist: shape mismatch")
    diff = theta.data - anchor
    return emit(np.array([np.sum(weight * diff * diff)]), (theta,),
                lambda g: (g[0] * 2.0 * weight * diff,))


# ---------------------------------------------------------------- checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst_param: str
    worst_index: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _loss_value(loss_fn):
    out = loss_fn()
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])
    if not np.isfinite(val):
        raise EvaluationError("loss is not finite")
    return val


def grad_check(loss_fn, params, h=1e-5, tol=1e-4, floor=1e-6, indices=None):
    """Compare tape gradients of ``loss_fn()`` with central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries with a true gradient near zero from dominating through
    round-off. ``indices`` optionally maps ``id(param)`` to the flat entries to
    check (all entries otherwise).
    """
    with Tape() as tape:
        loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("loss is not finite")
    analytic = tape.gradient(loss, params)

    worst = (0.0, "", -1)
    n_checked = 0
    for p, a in zip(params, analytic):
        base = p.data
        flat_a = a.reshape(-1)
        picks = range(base.size) if indices is None or id(p) not in indices else indices[id(p)]
        for i in picks:
            work = base.copy().reshape(-1)
            work[i] = base.reshape(-1)[i] + h
            p.data = work.reshape(base.shape)
            up = _loss_value(loss_fn)
            work[i] = base.reshape(-1)[i] - h
            p.data = work.reshape(base.shape)
            down = _loss_value(loss_fn)
            p.data = base
            num = (up - down) / (2.0 * h)
            err = abs(flat_a[i] - num) / max(abs(flat_a[i]), abs(num), floor)
            n_checked += 1
            if err > worst[0]:
                worst = (err, p.name or "", i)
    return GradCheckReport(worst[0], n_checked, worst[1], worst[2], tol)
