"""Small define-by-run reverse-mode autodiff over dense numpy arrays.

Only the primitives the exploration agent needs are provided. Every
primitive checks its input shapes and raises :class:`ShapeError` naming
itself and the offending shapes. Broadcasting is limited to a scalar
(size-1) operand against a tensor.

Usage::

    with Tape() as tape:
        y = sum_(tanh(matvec(W, x)))
    grads = backward(tape, y)
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "gradcheck",
    "GradcheckReport",
    "forward_primitive",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class Tensor:
    """A dense array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, all routed through the primitives below
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
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` is overwritten by :func:`backward`."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Record:
    op: str
    inputs: tuple  # node ids, None for untracked inputs
    output: int
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Records are appended in execution order, which is a valid topological
    order, so reverse replay visits every node after all of its consumers.
    """

    records: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)

    def __post_init__(self):
        self._counter = itertools.count()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def node_id(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        if t._tape is not self:
            # leaf seen for the first time on this tape
            t._tape = self
            t._id = next(self._counter)
            self.leaves[t._id] = t
        return t._id

    def new_output(self, data: np.ndarray) -> Tensor:
        out = Tensor(data, requires_grad=True)
        out._tape = self
        out._id = next(self._counter)
        return out

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[Tape] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    ids = tuple(tape.node_id(t) for t in inputs)
    res = tape.new_output(out)
    tape.records.append(Record(op, ids, res._id, bwd))
    return res


def _reject(op: str, *tensors) -> None:
    shapes = ", ".join(str(t.shape) for t in tensors)
    raise ShapeError(f"{op}: incompatible shapes {shapes}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        _reject(op, a, b)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit("div", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _emit("softplus", (a,), out, lambda g: (g * _sigmoid(x),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def power(a, p) -> Tensor:
    """``a ** p`` for ``a >= 0``; ``p`` is a python float or a size-1 tensor."""
    a = _as_tensor(a)
    x = a.data
    if isinstance(p, Tensor):
        if p.size != 1:
            _reject("power", a, p)
        pv = p.data.reshape(())
        out = np.power(x, pv)
        pshape = p.shape

        def bwd(g):
            pos = x > 0
            dx = np.where(pos, pv * np.power(np.where(pos, x, 1.0), pv - 1.0), 0.0)
            if pv == 1.0:
                dx = np.ones_like(x)
            logx = np.where(pos, np.log(np.where(pos, x, 1.0)), 0.0)
            dp = np.sum(g * out * logx)
            return g * dx, np.asarray(dp).reshape(pshape)

        return _emit("power", (a, p), out, bwd)
    pv = float(p)
    out = np.power(x, pv)
    return _emit("power", (a,), out, lambda g: (g * pv * np.power(x, pv - 1.0),))


# --------------------------------------------------------------------------
# reductions, normalisers
# --------------------------------------------------------------------------

def sum_(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()),
                 lambda g: (np.full(shape, g, dtype=np.result_type(g)),))


def softmax(a) -> Tensor:
    """Softmax over all elements of ``a`` (flattened), output keeps the shape."""
    a = _as_tensor(a)
    x = a.data
    z = np.exp(x - x.max())
    out = z / z.sum()

    def bwd(g):
        return (out * (g - np.sum(g * out)),)

    return _emit("softmax", (a,), out, bwd)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max()
    lse = np.log(np.exp(shifted).sum())
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(),)

    return _emit("log_softmax", (a,), out, bwd)


# --------------------------------------------------------------------------
# linear algebra, structure
# --------------------------------------------------------------------------

def matvec(A, x) -> Tensor:
    A, x = _as_tensor(A), _as_tensor(x)
    if A.data.ndim != 2 or x.data.ndim != 1 or A.shape[1] != x.shape[0]:
        _reject("matvec", A, x)
    Ad, xd = A.data, x.data
    return _emit("matvec", (A, x), Ad @ xd, lambda g: (np.outer(g, xd), Ad.T @ g))


def vecmat(x, A) -> Tensor:
    """``x @ A`` for a vector ``x`` of length ``A.shape[0]``."""
    x, A = _as_tensor(x), _as_tensor(A)
    if A.data.ndim != 2 or x.data.ndim != 1 or A.shape[0] != x.shape[0]:
        _reject("vecmat", x, A)
    xd, Ad = x.data, A.data
    return _emit("vecmat", (x, A), xd @ Ad, lambda g: (Ad @ g, np.outer(xd, g)))


def outer(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        _reject("outer", a, b)
    ad, bd = a.data, b.data
    return _emit("outer", (a, b), np.outer(ad, bd), lambda g: (g @ bd, ad @ g))


def concat(tensors: Sequence) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if any(t.data.ndim != 1 for t in ts):
        _reject("concat", *ts)
    sizes = [t.shape[0] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", ts, np.concatenate([t.data for t in ts]),
                 lambda g: tuple(np.split(g, cuts)))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as err:
        raise ShapeError(f"getitem: index {index!r} invalid for shape {shape}") from err

    def bwd(g):
        full = np.zeros(shape, dtype=np.result_type(g))
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (a,), np.array(out), bwd)


def cosine_similarity(M, k, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of ``k`` against every row of ``M`` (or a vector).

    The denominator is ``|k| |m| + eps`` so zero rows give similarity 0.
    """
    M, k = _as_tensor(M), _as_tensor(k)
    if k.data.ndim != 1 or M.data.ndim not in (1, 2) or M.shape[-1] != k.shape[0]:
        _reject("cosine_similarity", M, k)
    Md, kd = M.data, k.data
    vector = Md.ndim == 1
    M2 = Md.reshape(1, -1) if vector else Md
    nk = np.sqrt(kd @ kd)
    nm = np.sqrt(np.einsum("ij,ij->i", M2, M2))
    dots = M2 @ kd
    den = nk * nm + eps
    out = dots / den

    def bwd(g):
        g2 = np.reshape(g, -1)
        s = g2 / den                       # dS/d(dot) scaled
        t = g2 * dots / (den * den)        # -dS/d(den) scaled
        safe_m = np.where(nm > 0, nm, 1.0)
        gm = np.outer(s, kd) - (t * nk / safe_m)[:, None] * M2 * (nm > 0)[:, None]
        gk = s @ M2
        if nk > 0:
            gk = gk - (t @ nm) * kd / nk
        return (gm.reshape(Md.shape), gk)

    return _emit("cosine_similarity", (M, k), out[0] if vector else out, bwd)


def _padded(x: np.ndarray, circular: bool) -> np.ndarray:
    return np.pad(x, 1, mode="wrap" if circular else "constant")


def conv2d_3x3(w, kernel, circular: bool = True) -> Tensor:
    """``out(y, x) = sum_{dy,dx} kernel[dy+1, dx+1] * w(y - dy, x - dx)``.

    Indices wrap modulo the grid size by default; ``circular=False`` pads
    with zeros instead.
    """
    w, kernel = _as_tensor(w), _as_tensor(kernel)
    if w.data.ndim != 2 or kernel.shape != (3, 3):
        _reject("conv2d_3x3", w, kernel)
    wd, kd = w.data, kernel.data
    H, W = wd.shape
    p = _padded(wd, circular)
    # window (a, b) of the padded grid is w shifted by (dy, dx) = (1 - a, 1 - b)
    out = np.zeros_like(wd)
    for a in range(3):
        for b in range(3):
            out += kd[2 - a, 2 - b] * p[a:a + H, b:b + W]

    def bwd(g):
        pg = _padded(g, circular)
        gw = np.zeros_like(g)
        gk = np.empty((3, 3), dtype=np.result_type(g))
        for a in range(3):
            for b in range(3):
                # adjoint of the shift by (dy, dx) is the shift by (-dy, -dx)
                gw += kd[a, b] * pg[a:a + H, b:b + W]
                gk[2 - a, 2 - b] = np.sum(g * p[a:a + H, b:b + W])
        return gw, gk

    return _emit("conv2d_3x3", (w, kernel), out, bwd)


PRIMITIVES: dict[str, Callable] = {
    "matvec": matvec,
    "vecmat": vecmat,
    "outer": outer,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "power": power,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "concat": lambda *ts: concat(ts),
    "sum": sum_,
    "cosine_similarity": cosine_similarity,
    "conv2d_3x3": conv2d_3x3,
    "reshape": reshape,
    "getitem": getitem,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive called ``op`` by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def _replay(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape or loss._id is None:
        raise ValueError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=loss.data.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for nid, gi in zip(rec.inputs, rec.backward(g)):
            if nid is None or gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    return grads


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-replay ``tape`` from scalar ``loss``.

    Sets ``grad`` on every :class:`Parameter` leaf on the tape (zeros for
    parameters that do not influence the loss) and returns them keyed by
    name. The tape is left untouched, so replaying is repeatable.
    """
    grads = _replay(tape, loss)
    out = {}
    for nid, leaf in tape.leaves.items():
        if isinstance(leaf, Parameter):
            g = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
            out[leaf.name] = leaf.grad
    return out


def leaf_gradients(tape: Tape, loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. arbitrary tracked leaves."""
    grads = _replay(tape, loss)
    res = []
    for t in leaves:
        g = grads.get(t._id) if t._tape is tape else None
        res.append(np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape))
    return res


@dataclass
class GradcheckReport:
    analytic: list
    numeric: list
    rel_error: list
    nonfinite: list
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        vals = [float(np.max(e)) if np.size(e) else 0.0 for e in self.rel_error]
        return max(vals) if vals else 0.0

    @property
    def element_pass(self) -> list:
        return [(e < self.tolerance) & ~nf for e, nf in zip(self.rel_error, self.nonfinite)]

    @property
    def passed(self) -> bool:
        return all(bool(np.all(p)) for p in self.element_pass)


def gradcheck(
    f: Callable[..., Tensor],
    points,
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    atol: float = 1e-5,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``points`` is one array or a sequence of arrays; ``f`` receives one
    tracked tensor per point. Relative error per element is
    ``|a - n| / max(|a|, |n|, atol)``; non-finite values are flagged per
    element rather than dropped.
    """
    single = isinstance(points, (np.ndarray, Tensor, float, int))
    pts = [np.array(points.data if isinstance(p, Tensor) else p, dtype=np.float64)
           for p in ([points] if single else points)]

    leaves = [Tensor(p.copy(), requires_grad=True) for p in pts]
    with Tape() as tape:
        y = f(*leaves)
    if y.size != 1:
        raise ShapeError(f"gradcheck: f must be scalar-valued, got shape {y.shape}")
    analytic = leaf_gradients(tape, y, leaves)

    def value(args):
        return float(np.asarray(f(*[Tensor(a) for a in args]).data).reshape(-1)[0])

    numeric, rel, nonfinite = [], [], []
    for i, p in enumerate(pts):
        num = np.zeros_like(p)
        flat = num.reshape(-1)
        for j in range(p.size):
            plus = [q.copy() for q in pts]
            minus = [q.copy() for q in pts]
            plus[i].reshape(-1)[j] += eps
            minus[i].reshape(-1)[j] -= eps
            flat[j] = (value(plus) - value(minus)) / (2.0 * eps)
        a = analytic[i]
        bad = ~(np.isfinite(a) & np.isfinite(num))
        with np.errstate(invalid="ignore"):
            err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), atol)
        err = np.where(bad, np.inf, err)
        numeric.append(num)
        rel.append(err)
        nonfinite.append(bad)
    return GradcheckReport(analytic, numeric, rel, nonfinite, tolerance)
