"""Dense-tensor math with reverse-mode differentiation.

A :class:`Tape` records every operation performed on tensors while it is
active; records are appended in creation order, so the reversed list is a
valid topological order for the backward sweep. Gradients accumulate
additively at fan-out and land on the ``grad`` field of trainable leaves.

The op catalog is deliberately small: matmul, add, sub, scale, hadamard,
concat_cols, row_softmax, masked_row_softmax, segment_softmax, tanh,
leaky_relu, elu, exp, log, softplus, tsum, tmean, trace, transpose,
l2_normalize_rows, gather_rows, pairwise_weighted_dot. Everything trainable
in the pipeline is composed from it. All data is float64; broadcasting is
limited to scalars and row/column vectors.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiffMathError", "Tensor", "Tape", "constant", "param", "zero_grads",
    "matmul", "add", "sub", "scale", "hadamard", "concat_cols",
    "row_softmax", "masked_row_softmax", "segment_softmax",
    "tanh", "leaky_relu", "elu", "exp", "log", "softplus",
    "tsum", "tmean", "trace", "transpose", "l2_normalize_rows",
    "reshape", "gather_rows", "pairwise_weighted_dot",
    "finite_diff_check", "FiniteDiffReport",
]


class DiffMathError(RuntimeError):
    pass


class Tensor:
    """Row-major float64 array plus the bookkeeping backward needs."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DiffMathError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


_TAPE_STACK = threading.local()


def _active_stack() -> list["Tape"]:
    if not hasattr(_TAPE_STACK, "stack"):
        _TAPE_STACK.stack = []
    return _TAPE_STACK.stack


class Tape:
    """Append-only record of ops; one backward sweep per tape.

    A tape is owned by one thread; distinct tapes on distinct threads do not
    interact.
    """

    def __init__(self):
        self._nodes: list[tuple[str, Tensor, object]] = []
        self._consumed = False

    def __enter__(self):
        _active_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_stack().pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, op_name: str, out: Tensor, backward_fn) -> None:
        self._nodes.append((op_name, out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) to every trainable leaf on this tape."""
        if self._consumed:
            raise DiffMathError("tape already consumed; repeated backward without reset")
        if loss.data.size != 1:
            raise DiffMathError(f"loss must be scalar, got shape {loss.data.shape}")
        if not np.isfinite(loss.data).all():
            raise DiffMathError("loss is non-finite")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for op_name, out, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            if not np.isfinite(out.grad).all():
                raise DiffMathError(f"non-finite gradient flowing out of op '{op_name}'")
            backward_fn(out.grad)


def _current_tape() -> Tape | None:
    stack = _active_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _finish(op_name: str, out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise DiffMathError(f"op '{op_name}' produced non-finite values")
    tape = _current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._record(op_name, out, backward_fn)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,) or shape == (1, 1):
        return g.sum().reshape(shape)
    ndim_gap = g.ndim - len(shape)
    for _ in range(ndim_gap):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise DiffMathError(f"op '{op}': incompatible shapes {a.data.shape} and {b.data.shape}") from exc


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DiffMathError(f"op 'matmul': incompatible shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _finish("matmul", out_data, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _finish("add", out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _finish("sub", out_data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backward(g):
        _accum(a, g * c)

    return _finish("scale", out_data, (a,), backward)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("hadamard", a, b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _finish("hadamard", out_data, (a, b), backward)


def concat_cols(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise DiffMathError(f"op 'concat_cols': incompatible shapes {a.data.shape} and {b.data.shape}")
    na = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _finish("concat_cols", out_data, (a, b), backward)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    out_data = _softmax_rows(a.data)

    def backward(g):
        s = out_data
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - inner))

    return _finish("row_softmax", out_data, (a,), backward)


def masked_row_softmax(a, mask) -> Tensor:
    """Softmax along rows restricted to ``mask``; masked entries are exactly 0.

    Every row must have at least one unmasked entry.
    """
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.data.shape:
        raise DiffMathError(f"op 'masked_row_softmax': mask shape {m.shape} != data shape {a.data.shape}")
    row_counts = m.sum(axis=-1)
    if (row_counts == 0).any():
        raise DiffMathError("op 'masked_row_softmax': row with empty mask")
    neg = np.where(m, a.data, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted, where=m, out=np.zeros_like(a.data))
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        s = out_data
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - inner))

    return _finish("masked_row_softmax", out_data, (a,), backward)


def segment_softmax(values, row_ptr) -> Tensor:
    """Softmax within contiguous segments of a flat value vector.

    ``row_ptr`` is a CSR-style boundary array of length n_segments+1; every
    segment must be non-empty.
    """
    v = _as_tensor(values)
    if v.data.ndim != 1:
        raise DiffMathError("op 'segment_softmax': values must be 1-D")
    ptr = np.asarray(row_ptr, dtype=np.int64)
    if ptr[0] != 0 or ptr[-1] != v.data.size or (np.diff(ptr) <= 0).any():
        raise DiffMathError("op 'segment_softmax': invalid or empty segment boundaries")
    seg_id = np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))
    seg_max = np.maximum.reduceat(v.data, ptr[:-1])
    e = np.exp(v.data - seg_max[seg_id])
    denom = np.add.reduceat(e, ptr[:-1])
    out_data = e / denom[seg_id]

    def backward(g):
        inner = np.add.reduceat(g * out_data, ptr[:-1])
        _accum(v, out_data * (g - inner[seg_id]))

    return _finish("segment_softmax", out_data, (v,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _finish("tanh", out_data, (a,), backward)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    out_data = np.where(pos, a.data, slope * a.data)

    def backward(g):
        _accum(a, g * np.where(pos, 1.0, slope))

    return _finish("leaky_relu", out_data, (a,), backward)


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    neg = a.data <= 0
    expm1 = np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(neg, alpha * expm1, a.data)

    def backward(g):
        _accum(a, g * np.where(neg, alpha * (expm1 + 1.0), 1.0))

    return _finish("elu", out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _finish("exp", out_data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise DiffMathError("op 'log': non-positive input")
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _finish("log", out_data, (a,), backward)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        _accum(a, g * sig)

    return _finish("softplus", out_data, (a,), backward)


def tsum(a, axis: int | None = None) -> Tensor:
    """Full reduction to a scalar, or a keepdims reduction along one axis."""
    a = _as_tensor(a)
    if axis is None:
        out_data = np.asarray(a.data.sum())

        def backward(g):
            _accum(a, np.broadcast_to(g, a.data.shape))
    else:
        out_data = a.data.sum(axis=axis, keepdims=True)

        def backward(g):
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _finish("sum", out_data, (a,), backward)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _finish("mean", out_data, (a,), backward)


def trace(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DiffMathError(f"op 'trace': expected square matrix, got {a.data.shape}")
    out_data = np.asarray(np.trace(a.data))

    def backward(g):
        _accum(a, float(g) * np.eye(a.data.shape[0]))

    return _finish("trace", out_data, (a,), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DiffMathError(f"op 'transpose': expected matrix, got {a.data.shape}")
    out_data = a.data.T.copy()

    def backward(g):
        _accum(a, g.T)

    return _finish("transpose", out_data, (a,), backward)


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DiffMathError(f"op 'l2_normalize_rows': expected matrix, got {a.data.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    safe = np.maximum(norms, eps)
    out_data = a.data / safe

    def backward(g):
        inner = (g * out_data).sum(axis=1, keepdims=True)
        _accum(a, (g - out_data * inner) / safe)

    return _finish("l2_normalize_rows", out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise DiffMathError(f"op 'reshape': cannot view {a.data.shape} as {tuple(shape)}")
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _finish("reshape", out_data, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise DiffMathError(f"op 'gather_rows': expected matrix, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DiffMathError("op 'gather_rows': index out of range")
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            _accum(a, acc)

    return _finish("gather_rows", out_data, (a,), backward)


def pairwise_weighted_dot(x: np.ndarray, rows_i, rows_j, weights, chunk: int = 4096) -> Tensor:
    """Per-pair weighted inner products ``s_r = sum_d x[i_r,d] * w_d * x[j_r,d]``.

    ``x`` is a constant dense matrix; only ``weights`` is differentiable.
    Chunked so the gathered row blocks never materialize at full pair count.
    """
    w = _as_tensor(weights)
    x = np.asarray(x, dtype=np.float64)
    ii = np.asarray(rows_i, dtype=np.int64)
    jj = np.asarray(rows_j, dtype=np.int64)
    if w.data.ndim != 1 or w.data.shape[0] != x.shape[1]:
        raise DiffMathError(f"op 'pairwise_weighted_dot': weight shape {w.data.shape} "
                            f"does not match {x.shape[1]} columns")
    if ii.shape != jj.shape:
        raise DiffMathError("op 'pairwise_weighted_dot': index arrays differ in length")
    n_pairs = ii.size
    out_data = np.empty(n_pairs)
    for lo in range(0, n_pairs, chunk):
        hi = min(lo + chunk, n_pairs)
        out_data[lo:hi] = np.einsum("pd,d,pd->p", x[ii[lo:hi]], w.data, x[jj[lo:hi]])

    def backward(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for lo in range(0, n_pairs, chunk):
                hi = min(lo + chunk, n_pairs)
                gw += np.einsum("p,pd,pd->d", g[lo:hi], x[ii[lo:hi]], x[jj[lo:hi]])
            _accum(w, gw)

    return _finish("pairwise_weighted_dot", out_data, (w,), backward)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err)


def finite_diff_check(fn, params: dict[str, Tensor], epsilon: float = 1e-5) -> FiniteDiffReport:
    """Compare reverse-mode gradients of ``fn(params)`` against central
    differences, entry by entry.

    ``fn`` must be a pure scalar-valued function of the parameter values.
    Relative error per entry is |a - f| / max(|a|, |f|, 1e-8); non-finite
    differences surface as inf in the report rather than raising.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    zero_grads(params.values())
    with Tape() as tape:
        loss = fn(params)
        tape.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    zero_grads(params.values())

    def value() -> float:
        # probe points may step over a domain edge; report that in-band
        try:
            out = fn(params)
        except DiffMathError:
            return float("nan")
        return float(out.data.reshape(-1)[0])

    per_param: dict[str, float] = {}
    worst_name, worst_err = "", 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        err = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            f_plus = value()
            flat[idx] = orig - epsilon
            f_minus = value()
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            if not np.isfinite(fd):
                err = float("inf")
                continue
            denom = max(abs(ana[idx]), abs(fd), 1e-8)
            err = max(err, abs(ana[idx] - fd) / denom)
        per_param[name] = err
        if err >= worst_err:
            worst_err, worst_name = err, name
    return FiniteDiffReport(max_rel_err=worst_err, worst_param=worst_name, per_param=per_param)
