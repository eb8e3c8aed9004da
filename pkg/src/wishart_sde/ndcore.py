"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape every operation is
plain numpy evaluation, which is what prediction and forecasting use.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.gradient(loss)[w]
    array([2., 4.])
"""

import threading

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ContractError, DimensionError, NumericalError, SingularityError

DTYPE = np.float64

# Relative jitter (times the mean diagonal) and the escalation ceiling.
DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Nodes are appended at creation time, so the list is already in
    topological order and the backward sweep is a single reverse pass.
    """

    def __init__(self):
        self.nodes = []
        self._open = False

    def __enter__(self):
        _tape_stack().append(self)
        self._open = True
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        self._open = False
        return False

    def gradient(self, loss, params=None):
        """Gradients of a scalar ``loss`` with respect to leaf tensors.

        Returns a dict keyed by tensor. With ``params`` given, exactly those
        tensors are keys and any that ``loss`` does not depend on map to zeros;
        otherwise every requires-grad leaf reached from ``loss`` is returned.
        """
        loss = as_tensor(loss)
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads = {id(loss): np.ones_like(loss.value)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._vjp is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        if params is None:
            return {leaf: grads[key] for key, leaf in leaves.items()}
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.value) if g is None else g
        return out


def backward(loss, params=None):
    """Gradient map of ``loss`` using the tape it was recorded on."""
    loss = as_tensor(loss)
    if loss._tape is None:
        raise ContractError("loss is not on an active tape")
    return loss._tape.gradient(loss, params)


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_parents", "_vjp", "_tape")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError("T is defined for matrices; use transpose()")
        return transpose(self)

    @property
    def mT(self):
        return swapaxes(self, -1, -2)

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def detach(self):
        return Tensor(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{grad})"

    def __len__(self):
        return len(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x)


def _make(value, parents, vjp):
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value)
    for p in parents:
        if p._tape is not None and p._tape is not tape:
            raise ContractError("tensor belongs to a different tape")
    out = Tensor(value)
    out.requires_grad = True
    out._parents = parents
    out._vjp = vjp
    out._tape = tape
    tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value / b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * value / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(value, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def power(a, p):
    a = as_tensor(a)
    value = a.value ** p
    return _make(value, (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    value = np.exp(a.value)
    return _make(value, (a,), lambda g: (g * value,))


def log(a):
    a = as_tensor(a)
    value = np.log(a.value)
    return _make(value, (a,), lambda g: (g / a.value,))


def sqrt(a):
    a = as_tensor(a)
    value = np.sqrt(a.value)

    def vjp(g):
        # d sqrt at 0 is taken as 0 so that exactly-zero variances stay inert
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(value > 0, 0.5 * g / value, 0.0)
        return (out,)

    return _make(value, (a,), vjp)


def maximum(a, floor):
    """Elementwise max against a constant floor."""
    a = as_tensor(a)
    value = np.maximum(a.value, floor)
    return _make(value, (a,), lambda g: (np.where(a.value >= floor, g, 0.0),))


def softplus(a):
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.value)
    return _make(value, (a,), lambda g: (g * _sigmoid(a.value),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_inverse(y):
    """Inverse of softplus on plain arrays (used for initialisation)."""
    y = np.asarray(y, dtype=DTYPE)
    if np.any(y <= 0):
        raise ContractError("softplus inverse needs strictly positive input")
    return y + np.log(-np.expm1(-y))


def sigmoid(a):
    a = as_tensor(a)
    value = _sigmoid(a.value)
    return _make(value, (a,), lambda g: (g * value * (1.0 - value),))


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(value, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis, keepdims) / count


def logsumexp(a, axis=None, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.value - m)
    tot = s.sum(axis=axis, keepdims=True)
    value = np.log(tot) + m
    weights = s / tot
    if not keepdims:
        value = np.squeeze(value, axis=_norm_axis(axis, a.ndim))
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * weights,)

    return _make(value, (a,), vjp)


# -------------------------------------------------------------------- shaping


def reshape(a, shape):
    a = as_tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(value, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    value = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(value, (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    value = np.swapaxes(a.value, ax1, ax2)
    return _make(value, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a, axis):
    a = as_tensor(a)
    value = np.expand_dims(a.value, axis)
    return _make(value, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(value, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.value.astype(np.intp)
    value = a.value[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(value, (a,), vjp)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(value, tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.stack([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(value, tuple(tensors), vjp)


def diagonal(a):
    """Diagonal over the last two axes."""
    a = as_tensor(a)
    value = np.diagonal(a.value, axis1=-2, axis2=-1).copy()
    n = a.shape[-1]

    def vjp(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        idx = np.arange(n)
        out[..., idx, idx] = g
        return (out,)

    return _make(value, (a,), vjp)


def diag_embed(a):
    """Place the last axis on the diagonal of a new square trailing block."""
    a = as_tensor(a)
    n = a.shape[-1]
    value = a.value[..., :, None] * np.eye(n)
    idx = np.arange(n)
    return _make(value, (a,), lambda g: (g[..., idx, idx].copy(),))


def tril(a, k=0):
    a = as_tensor(a)
    mask = np.tril(np.ones(a.shape[-2:]), k)
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


# ------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(value, (a, b), vjp)


def _batched_solve(l, b, lower, trans):
    """Triangular solve broadcasting over leading axes (``b`` is ...×n×k)."""
    batch = np.broadcast_shapes(l.shape[:-2], b.shape[:-2])
    if not batch:
        return solve_triangular(l, b, lower=lower, trans=trans, check_finite=False)
    lb = np.broadcast_to(l, batch + l.shape[-2:]).reshape((-1,) + l.shape[-2:])
    bb = np.broadcast_to(b, batch + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
    if lb.shape[0] > 8:
        # many small systems: one vectorised LAPACK call beats a Python loop
        lt = np.swapaxes(lb, -1, -2) if trans else lb
        return np.linalg.solve(lt, bb).reshape(batch + b.shape[-2:])
    out = np.empty(bb.shape, dtype=DTYPE)
    for i in range(lb.shape[0]):
        out[i] = solve_triangular(lb[i], bb[i], lower=lower, trans=trans, check_finite=False)
    return out.reshape(batch + b.shape[-2:])


def triangular_solve(l, b, lower=True, transpose=False):
    """Solve ``l x = b`` (or ``lᵀ x = b``) for triangular ``l``.

    ``b`` may be a vector (n,) for a single matrix, or ...×n×k.
    """
    l, b = as_tensor(l), as_tensor(b)
    if l.ndim < 2 or l.shape[-1] != l.shape[-2]:
        raise DimensionError(f"triangular_solve needs square matrices, got {l.shape}")
    vector = b.ndim == 1
    bv = b.value[:, None] if vector else b.value
    if bv.shape[-2] != l.shape[-1]:
        raise DimensionError(f"triangular_solve shapes disagree: {l.shape} and {b.shape}")
    diag = np.diagonal(l.value, axis1=-2, axis2=-1)
    if np.any(diag == 0):
        raise SingularityError("triangular matrix has a zero diagonal entry")
    trans = 1 if transpose else 0
    x = _batched_solve(l.value, bv, lower, trans)
    value = x[:, 0] if vector else x
    mask = np.tril(np.ones(l.shape[-2:])) if lower else np.triu(np.ones(l.shape[-2:]))

    def vjp(g):
        gv = g[:, None] if vector else g
        bbar = _batched_solve(l.value, gv, lower, 1 - trans)
        gl = None
        if l.requires_grad:
            if transpose:
                gl = -(x @ np.swapaxes(bbar, -1, -2))
            else:
                gl = -(bbar @ np.swapaxes(x, -1, -2))
            gl = _unbroadcast(gl * mask, l.shape)
        gb = None
        if b.requires_grad:
            gb = bbar[:, 0] if vector else _unbroadcast(bbar, b.shape)
        return gl, gb

    return _make(value, (l, b), vjp)


def _first_bad_pivot(a):
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0:
            return j
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return None


def _jittered_cholesky(a, jitter):
    n = a.shape[-1]
    scale = np.mean(np.diagonal(a, axis1=-2, axis2=-1), axis=-1)[..., None, None]
    eye = np.eye(n)
    levels = [jitter]
    eps = max(jitter, DEFAULT_JITTER) if jitter > 0 else DEFAULT_JITTER
    if jitter > 0:
        eps *= 10
    while eps <= MAX_JITTER * (1 + 1e-9):
        levels.append(eps)
        eps *= 10
    for eps in levels:
        try:
            return np.linalg.cholesky(a + eps * scale * eye), eps
        except np.linalg.LinAlgError:
            continue
    worst = levels[-1]
    shifted = (a + worst * scale * eye).reshape((-1, n, n))
    for mat in shifted:
        pivot = _first_bad_pivot(mat)
        if pivot is not None:
            raise NumericalError(
                f"Cholesky failed at pivot {pivot} after jitter {worst:g}", pivot=pivot)
    raise NumericalError("Cholesky failed", pivot=None)


def cholesky(a, jitter=DEFAULT_JITTER):
    """Lower Cholesky factor of ``a + eps·mean(diag a)·I``.

    ``eps`` starts at ``jitter`` and escalates by 10x up to ``MAX_JITTER``
    on failure. ``jitter=0`` attempts the exact factorisation first.
    Works on stacks of matrices over the leading axes.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"cholesky needs square matrices, got {a.shape}")
    if not np.all(np.isfinite(a.value)):
        raise NumericalError("cholesky input is not finite")
    L, eps = _jittered_cholesky(a.value, jitter)
    n = a.shape[-1]

    def vjp(g):
        # Murray (2016): Abar = sym(L^-T Phi(L^T Lbar) L^-1)
        P = np.swapaxes(L, -1, -2) @ np.tril(g)
        P = np.tril(P) - 0.5 * P * np.eye(n)
        X = _batched_solve(L, P, True, 1)
        S = np.swapaxes(_batched_solve(L, np.swapaxes(X, -1, -2), True, 1), -1, -2)
        S = 0.5 * (S + np.swapaxes(S, -1, -2))
        if eps:
            tr = np.trace(S, axis1=-2, axis2=-1)[..., None, None]
            S = S + (eps / n) * tr * np.eye(n)
        return (S,)

    return _make(L, (a,), vjp)


def cholesky_logdet(chol):
    """log det of ``chol cholᵀ`` from a Cholesky factor (per trailing matrix)."""
    return 2.0 * sum(log(diagonal(chol)), axis=-1)


def eye(n):
    return Tensor(np.eye(n))


def zeros(shape):
    return Tensor(np.zeros(shape))
