"""Dense/sparse numeric core with reverse-mode differentiation.

Everything trainable in this package is expressed through the ops in this
module: a ``Tape`` records primitive operations on ``Var`` handles, and
``Tape.backward`` replays them in reverse construction order (which is a
reverse topological order) exactly once per node. Values are 64-bit floats
throughout; reductions use numpy's fixed pairwise order so repeated runs
are bit-identical for a given seed.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as _sp

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Globally toggle per-op finite-value validation (used by tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_f64(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Immutable row-major float64 value: a shape plus flat data."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        self.data = arr

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class SparseMatrix:
    """COO sparse matrix with no duplicate entries.

    The COO triples are the source of truth; a CSR form (and its transpose)
    is cached for fast apply/backward.
    """

    def __init__(self, rows: int, cols: int, entries: Sequence[Tuple[int, int, float]],
                 symmetric: bool = False):
        self.rows = int(rows)
        self.cols = int(cols)
        ii = np.asarray([e[0] for e in entries], dtype=np.int64)
        jj = np.asarray([e[1] for e in entries], dtype=np.int64)
        vv = _as_f64([e[2] for e in entries])
        if ii.size:
            if ii.min() < 0 or ii.max() >= rows or jj.min() < 0 or jj.max() >= cols:
                raise ValueError("COO index out of range")
            keys = ii * cols + jj
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate COO entry")
        if symmetric:
            if rows != cols:
                raise ValueError("symmetric flag on a non-square matrix")
            order = np.lexsort((jj, ii))
            order_t = np.lexsort((ii, jj))
            if not (np.array_equal(ii[order], jj[order_t])
                    and np.array_equal(jj[order], ii[order_t])
                    and np.allclose(vv[order], vv[order_t], rtol=0, atol=0)):
                raise ValueError("symmetry flag set but entries are not symmetric")
        self.row_idx = ii
        self.col_idx = jj
        self.values = vv
        self.symmetric = bool(symmetric)
        csr = _sp.csr_matrix((vv, (ii, jj)), shape=(rows, cols))
        self._csr = csr
        self._csr_t = csr.T.tocsr()

    @property
    def nnz(self) -> int:
        return self.values.size

    def entries(self) -> Iterable[Tuple[int, int, float]]:
        return zip(self.row_idx.tolist(), self.col_idx.tolist(), self.values.tolist())

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._csr @ x

    def apply_t(self, x: np.ndarray) -> np.ndarray:
        return self._csr_t @ x

    def to_dense(self) -> np.ndarray:
        return np.asarray(self._csr.todense(), dtype=np.float64)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.cols, self.rows,
                            list(zip(self.col_idx.tolist(), self.row_idx.tolist(),
                                     self.values.tolist())))


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Record of primitive ops with backward rules plus a parameter registry.

    One training context owns one tape; construction and backward are
    single-threaded. Backward visits nodes in reverse construction order
    (reverse topological) exactly once and accumulates (+=) into parameter
    gradients, so parameters reused across timesteps sum their
    contributions as BPTT requires. Unused registered parameters report
    zero gradients.
    """

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._parents: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[Callable]] = []
        self._param_names: Dict[int, str] = {}
        self._params: Dict[str, int] = {}

    def _push(self, value: np.ndarray, parents: Tuple[int, ...],
              vjp: Optional[Callable]) -> Var:
        if _CHECK_FINITE and not np.all(np.isfinite(value)):
            raise FloatingPointError("non-finite value produced by a tape op")
        idx = len(self._values)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, idx, value)

    def constant(self, data) -> Var:
        return self._push(_as_f64(data), (), None)

    def param(self, name: str, data) -> Var:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        v = self._push(_as_f64(data), (), None)
        self._params[name] = v.idx
        self._param_names[v.idx] = name
        return v

    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.ndim != 0 and loss.value.size != 1:
            raise ValueError("backward expects a scalar loss")
        if not np.all(np.isfinite(loss.value)):
            raise FloatingPointError("non-finite loss")
        grads: List[Optional[np.ndarray]] = [None] * len(self._values)
        grads[loss.idx] = np.ones_like(loss.value)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            vjp = self._vjps[idx]
            if vjp is None:
                continue
            for parent, contrib in zip(self._parents[idx], vjp(g)):
                if contrib is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = contrib.copy()
                else:
                    grads[parent] += contrib
        out: Dict[str, np.ndarray] = {}
        for name, idx in self._params.items():
            g = grads[idx]
            out[name] = np.zeros_like(self._values[idx]) if g is None else g
        return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded, back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _coerce(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def matmul(a: Var, b: Var) -> Var:
    """Standard 2-D product with registered backward rules."""
    if a.value.shape[-1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return a.tape._push(av @ bv, (a.idx, b.idx), vjp)


def spmv(m: SparseMatrix, x: Var) -> Var:
    """Sparse-dense product m @ x; the matrix itself is not differentiated."""
    if m.cols != x.value.shape[0]:
        raise ValueError(f"spmv shape mismatch: {m.rows}x{m.cols} @ {x.value.shape}")

    def vjp(g):
        return (m.apply_t(g),)

    return x.tape._push(m.apply(x.value), (x.idx,), vjp)


def add(a: Var, b) -> Var:
    b = _coerce(a.tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return a.tape._push(av + bv, (a.idx, b.idx), vjp)


def sub(a: Var, b) -> Var:
    b = _coerce(a.tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return a.tape._push(av - bv, (a.idx, b.idx), vjp)


def mul(a: Var, b) -> Var:
    b = _coerce(a.tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape._push(av * bv, (a.idx, b.idx), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return a.tape._push(a.value * c, (a.idx,), vjp)


def sigmoid(x: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-x.value))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return x.tape._push(y, (x.idx,), vjp)


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return x.tape._push(y, (x.idx,), vjp)


def relu(x: Var) -> Var:
    mask = x.value > 0

    def vjp(g):
        return (g * mask,)

    return x.tape._push(np.where(mask, x.value, 0.0), (x.idx,), vjp)


def identity(x: Var) -> Var:
    return x


ACTIVATIONS: Dict[str, Callable[[Var], Var]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
}


def activate(x: Var, kind: str) -> Var:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(x: Var, axis: int = -1) -> Var:
    xv = x.value
    if not -xv.ndim <= axis < xv.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {xv.shape}")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return x.tape._push(y, (x.idx,), vjp)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    tape = parts[0].tape
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[k], offsets[k + 1]), axis=axis)
                     for k in range(len(values)))

    return tape._push(np.concatenate(values, axis=axis),
                      tuple(p.idx for p in parts), vjp)


def split(x: Var, sizes: Sequence[int], axis: int = -1) -> List[Var]:
    if sum(sizes) != x.value.shape[axis]:
        raise ValueError("split sizes do not cover the axis")
    offsets = np.cumsum([0] + list(sizes))
    out = []
    for k in range(len(sizes)):
        sl = [slice(None)] * x.value.ndim
        sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
        sl = tuple(sl)

        def vjp(g, _sl=sl):
            full = np.zeros_like(x.value)
            full[_sl] = g
            return (full,)

        out.append(x.tape._push(np.ascontiguousarray(x.value[sl]), (x.idx,), vjp))
    return out


def take_rows(x: Var, start: int, stop: int) -> Var:
    """Contiguous row slice with zero-padded backward."""

    def vjp(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return (full,)

    return x.tape._push(np.ascontiguousarray(x.value[start:stop]), (x.idx,), vjp)


def vsum(x: Var) -> Var:
    def vjp(g):
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return x.tape._push(np.asarray(x.value.sum()), (x.idx,), vjp)


def vmean(x: Var) -> Var:
    n = x.value.size

    def vjp(g):
        return (np.broadcast_to(g / n, x.value.shape).copy(),)

    return x.tape._push(np.asarray(x.value.mean()), (x.idx,), vjp)


def vabs(x: Var) -> Var:
    s = np.sign(x.value)

    def vjp(g):
        return (g * s,)

    return x.tape._push(np.abs(x.value), (x.idx,), vjp)


def grad_check(build_loss: Callable[[Dict[str, np.ndarray]], Tuple[Tape, Var]],
               params: Dict[str, np.ndarray],
               eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_loss`` constructs a fresh tape from a parameter dict and returns
    (tape, scalar loss Var). Differences below the 1e-6 absolute floor count
    as zero error.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps outside [1e-7, 1e-4]")
    tape, loss = build_loss(params)
    if not np.all(np.isfinite(loss.value)):
        raise FloatingPointError("non-finite loss at the evaluation point")
    grads = tape.backward(loss)

    def value_at(p):
        _, lv = build_loss(p)
        return float(lv.value)

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            bumped = {k: v.copy() for k, v in params.items()}
            bumped[name].reshape(-1)[i] = flat[i] + eps
            f_plus = value_at(bumped)
            bumped[name].reshape(-1)[i] = flat[i] - eps
            f_minus = value_at(bumped)
            fd = (f_plus - f_minus) / (2.0 * eps)
            diff = abs(g[i] - fd)
            if diff < 1e-6:
                continue
            worst = max(worst, diff / max(abs(g[i]), abs(fd)))
    return worst
