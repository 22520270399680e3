"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every forward op that touches a tensor with ``requires_grad`` appends a node
to the active :class:`Graph`. :func:`backward` walks that tape in strict
reverse creation order, accumulates gradients into leaf tensors and clears
the tape.

Only the operations the renderer and losses need are provided::

    add sub mul scale matmul affine exp neg sigmoid softplus relu abs
    square sum mean concat gather_rows clamp_min reshape div
"""

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit

from ._validation import ContractViolation, NumericFault

__all__ = [
    "Tensor", "Graph", "GradCheckReport", "backward", "grad_check", "no_grad",
    "graph", "current_graph", "add", "sub", "mul", "scale", "matmul", "affine",
    "exp", "neg", "sigmoid", "softplus", "relu", "abs", "square", "sum", "mean",
    "concat", "gather_rows", "clamp_min", "reshape", "div", "const",
]

_builtin_abs = abs
_builtin_sum = sum


@dataclass
class Node:
    kind: str
    inputs: tuple
    out: "Tensor"
    backward: object


class Graph:
    """Ordered list of operation records; creation order is topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, out, backward_fn):
        out._node = len(self.nodes)
        self.nodes.append(Node(kind, inputs, out, backward_fn))

    def clear(self):
        for node in self.nodes:
            # intermediates become constants once their tape is gone
            node.out._node = None
            node.out.requires_grad = False
        self.nodes = []


class _State(threading.local):
    def __init__(self):
        self.graphs = [Graph()]
        self.grad_enabled = True


_state = _State()


def current_graph():
    return _state.graphs[-1]


@contextlib.contextmanager
def graph():
    """Run a block against a fresh, private tape."""
    g = Graph()
    _state.graphs.append(g)
    try:
        yield g
    finally:
        _state.graphs.pop()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and not requires_grad:
            self.data = data              # constants may be read-only broadcast views
        else:
            self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

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
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(data):
    return Tensor(data)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape)
    return Tensor(arr)


def _tracking(*inputs):
    return _state.grad_enabled and any(t.requires_grad for t in inputs)


def _emit(kind, inputs, out_data, backward_fn, check=True):
    # check=False only for ops that map finite inputs to finite outputs
    if check and not np.all(np.isfinite(out_data)):
        raise NumericFault(f"non-finite output from op '{kind}'")
    out = Tensor(out_data)
    if _tracking(*inputs):
        out.requires_grad = True
        current_graph().record(kind, inputs, out, backward_fn)
    return out


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (g * bd if ra else None, g * ad if rb else None))


def div(a, b):
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (g / bd if ra else None, -g * ad / (bd * bd) if rb else None))


def scale(a, k):
    k = float(k)
    return _emit("scale", (a,), a.data * k, lambda g: (g * k,))


def matmul(a, b):
    """2-D matrix product; ``a`` may also be a constant scipy sparse matrix."""
    if sparse.issparse(a):
        if b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractViolation(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        return _emit("matmul", (b,), np.asarray(a @ b.data), lambda g: (np.asarray(a.T @ g),))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _emit("matmul", (a, b), ad @ bd,
                 lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None))


def affine(x, w, b):
    """``x @ w + b`` with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"affine: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise ContractViolation(f"affine: bias shape {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    rx = x.requires_grad

    def bw(g):
        return (g @ wd.T if rx else None), xd.T @ g, g.sum(axis=0)

    return _emit("affine", (x, w, b), xd @ wd + b.data, bw)


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def neg(a):
    return _emit("neg", (a,), -a.data, lambda g: (-g,), check=False)


def sigmoid(a):
    out = expit(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),), check=False)


def softplus(a):
    ad = a.data
    return _emit("softplus", (a,), np.logaddexp(0.0, ad), lambda g: (g * expit(ad),))


def relu(a):
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,), check=False)


def abs(a):
    sgn = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * sgn,), check=False)


def square(a):
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def clamp_min(a, lo):
    mask = a.data > lo
    return _emit("clamp_min", (a,), np.where(mask, a.data, lo), lambda g: (g * mask,),
                 check=False)


def sum(a, axis=None):
    shape = a.shape
    if axis is None:
        def bw(g):
            return (np.full(shape, float(g)),)
        return _emit("sum", (a,), np.asarray(a.data.sum()), bw)
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return _emit("sum", (a,), a.data.sum(axis=ax), bw)


def mean(a, axis=None):
    if a.size == 0:
        raise ContractViolation("mean: empty tensor")
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors):
    """Concatenate along the last axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ContractViolation("concat: nothing to concatenate")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ContractViolation(
                f"concat: leading shapes differ {tensors[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=-1)),
                 check=False)


def gather_rows(a, index):
    """Rows ``a[index]`` of a 1-D or 2-D tensor; repeated rows accumulate on backward."""
    if a.ndim not in (1, 2):
        raise ContractViolation(f"gather_rows: expected 1-D or 2-D, got {a.shape}")
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractViolation("gather_rows: index must be 1-D")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractViolation(f"gather_rows: index out of range for {n} rows")
    shape = a.shape

    def bw(g):
        if len(shape) == 1:
            return (np.bincount(idx, weights=g, minlength=n).astype(np.float64),)
        scatter = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))),
                                    shape=(n, idx.size))
        return (np.asarray(scatter @ g),)

    return _emit("gather_rows", (a,), a.data[idx], bw, check=False)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.shape
    if int(np.prod(shape)) != a.size:
        raise ContractViolation(f"reshape: cannot view {old} as {shape}")
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),),
                 check=False)


def backward(loss):
    """Accumulate ``d loss / d leaf`` into every tracked leaf, then clear the tape."""
    if loss.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = current_graph()
    if not len(tape) or loss._node is None:
        raise ContractViolation("backward: graph is empty; loss is not connected to any parameter")
    grads = {loss._node: np.ones(loss.shape)}
    try:
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = tape.nodes[idx]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
                elif inp._node in grads:
                    grads[inp._node] = grads[inp._node] + gi
                else:
                    grads[inp._node] = gi
    finally:
        tape.clear()


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kinks: np.ndarray
    tol: float
    passed: bool = field(default=False)

    @property
    def max_rel_error(self):
        ok = ~self.kinks
        return float(self.rel_error[ok].max()) if ok.any() else 0.0


def grad_check(f, point, step=1e-4, tol=1e-5, coords=None, floor=None, kink_tol=0.05):
    """Compare analytic gradients with central differences.

    ``f`` maps ``point`` (a Tensor or a list of Tensors) to a scalar Tensor.
    ``coords`` selects ``(tensor_index, flat_index)`` pairs; default is every
    coordinate. Coordinates where the one-sided differences disagree are
    reported as kinks and left out of the pass/fail decision.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``. By default
    ``floor`` is the central difference's own roundoff (``4 eps |f| / step``)
    divided by ``tol``, so gradients too small for the numeric estimate to
    resolve do not count as failures.
    """
    if step <= 0:
        raise ContractViolation("grad_check: step must be positive")
    params = list(point) if isinstance(point, (list, tuple)) else [point]
    if coords is None:
        coords = [(p, i) for p, t in enumerate(params) for i in range(t.size)]

    def value():
        with no_grad():
            return float(f(point).data)

    f0 = value()
    if value() != f0:
        raise ContractViolation("grad_check: f is not deterministic")
    if floor is None:
        floor = 4.0 * np.finfo(np.float64).eps * max(1.0, _builtin_abs(f0)) / step / tol

    for t in params:
        t.requires_grad = True
        t.grad = None
    with graph():
        backward(f(point))
    analytic = np.array([
        params[p].grad.reshape(-1)[i] if params[p].grad is not None else 0.0
        for p, i in coords
    ])

    numeric = np.empty(len(coords))
    kinks = np.zeros(len(coords), dtype=bool)
    for k, (p, i) in enumerate(coords):
        flat = params[p].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        fp = value()
        flat[i] = orig - step
        fm = value()
        flat[i] = orig
        numeric[k] = (fp - fm) / (2 * step)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        kinks[k] = _builtin_abs(fwd - bwd) > kink_tol * max(1.0, _builtin_abs(fwd), _builtin_abs(bwd))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    report = GradCheckReport(analytic, numeric, rel, kinks, tol)
    report.passed = bool(np.all(rel[~kinks] <= tol))
    return report
