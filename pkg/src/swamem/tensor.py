"""Minimal reverse-mode autodiff over float64 numpy arrays.

The engine is a flat tape: every operation appends one node holding the ids
of its inputs and a closure computing the vector-Jacobian product. Backward
walks node ids in strictly decreasing order, so gradient accumulation order
is fixed and two passes over identical inputs are bit-identical.

Conventions
-----------
* All data is float64. Tensors are immutable (backing arrays are marked
  read-only); ops return fresh tensors.
* A tensor is either a constant (``tape is None``) or attached to exactly one
  tape. Ops record a node iff at least one input is attached; mixing tensors
  from different tapes is an error.
* Every op output is checked for NaN/Inf at construction and every gradient
  contribution is checked during backward; a non-finite value raises
  :class:`~swamem.errors.NumericError` immediately.
* Leading axes are batch axes: binary ops broadcast by numpy rules and the
  backward pass sum-reduces gradients back to each operand's shape, so the
  same graph code serves single sequences and batches.
* :func:`matmul` and :func:`causal_conv1d` feed a multiply-accumulate
  counter (see :func:`count_macs`); elementwise work is not counted. The
  counter observes forward compute only, which is what the analytic cost
  model predicts.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DegenerateRowError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "mT",
    "permute",
    "reshape",
    "concat",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "softplus",
    "silu",
    "silu_prime",
    "softmax_rows",
    "log_softmax",
    "rmsnorm",
    "l2_normalize",
    "row_renorm",
    "frob_clip",
    "causal_conv1d",
    "take_along_last",
    "count_macs",
    "MacTally",
]


def _check_finite(arr: np.ndarray, what: str = "result") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """Immutable float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)  # copy: detach from caller
        _check_finite(arr, "tensor data")
        arr.setflags(write=False)
        self.data = arr
        self.tape: Tape | None = None
        self.nid: int | None = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node {self.nid}"
        return f"Tensor({kind}, shape={self.data.shape})"

    # operator sugar ----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)


def _bare(arr: np.ndarray) -> Tensor:
    """Wrap an array we own without copying it."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    _check_finite(arr)
    try:
        arr.setflags(write=False)
    except ValueError:
        arr = arr.copy()
        arr.setflags(write=False)
    out.data = arr
    out.tape = None
    out.nid = None
    return out


def constant(data) -> Tensor:
    """A tensor that never records onto any tape."""
    if isinstance(data, Tensor):
        return _bare(data.data)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Append-only record of operations, replayed in reverse for gradients."""

    def __init__(self):
        self._in_ids: list[tuple[int, ...]] = []
        self._fns: list = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._fns)

    def leaf(self, value) -> Tensor:
        """Register an input tensor whose gradient should be retained."""
        out = Tensor(value.data if isinstance(value, Tensor) else value)
        out.tape = self
        out.nid = self._record((), None)
        return out

    def _record(self, in_ids: tuple[int, ...], fn) -> int:
        self._in_ids.append(in_ids)
        self._fns.append(fn)
        return len(self._fns) - 1

    def backward(self, out: Tensor, seed=None, retain_all: bool = False) -> None:
        """Accumulate d(out)/d(leaf) for every leaf reachable from ``out``.

        Without ``seed`` the output must be a single element and the seed is
        one. Calling backward again recomputes from scratch; results are
        bit-identical for identical tapes.
        """
        if out.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        if seed is None:
            if out.data.size != 1:
                raise ShapeError("backward without a seed needs a one-element output")
            seed_arr = np.ones_like(out.data)
        else:
            seed_arr = np.broadcast_to(np.asarray(seed, dtype=np.float64), out.data.shape).copy()
        live: dict[int, np.ndarray] = {out.nid: seed_arr}
        kept: dict[int, np.ndarray] = {}
        for nid in range(out.nid, -1, -1):
            g = live.pop(nid, None)
            if g is None:
                continue
            fn = self._fns[nid]
            if fn is None or retain_all:
                kept[nid] = g
            if fn is None:
                continue
            contribs = fn(g)
            for iid, ig in zip(self._in_ids[nid], contribs):
                if iid < 0 or ig is None:
                    continue
                ig = np.asarray(ig, dtype=np.float64)
                _check_finite(ig, f"gradient into node {iid}")
                prev = live.get(iid)
                live[iid] = ig if prev is None else prev + ig
        self._grads = kept

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient from the most recent backward; zeros if unreached."""
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self._grads.get(t.nid)
        if g is None:
            return np.zeros_like(t.data)
        return g


def _tape_of(inputs: tuple[Tensor, ...]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _make(arr, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = _bare(arr)
    tape = _tape_of(inputs)
    if tape is not None:
        ids = tuple(t.nid if t.tape is not None else -1 for t in inputs)
        out.tape = tape
        out.nid = tape._record(ids, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to an operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# MAC counting (matmul + conv only)


class MacTally:
    """Mutable multiply-accumulate count; see :func:`count_macs`."""

    __slots__ = ("macs",)

    def __init__(self):
        self.macs = 0


class _MacState(threading.local):
    def __init__(self):
        self.stack: list[MacTally] = []


_MAC_STATE = _MacState()


class count_macs:
    """Context manager tallying matmul/conv MACs executed inside the block.

    >>> with count_macs() as tally:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 5))))
    >>> tally.macs
    30
    """

    def __enter__(self) -> MacTally:
        self._tally = MacTally()
        _MAC_STATE.stack.append(self._tally)
        return self._tally

    def __exit__(self, *exc):
        _MAC_STATE.stack.pop()
        return False


def _add_macs(n: int) -> None:
    for tally in _MAC_STATE.stack:
        tally.macs += int(n)


# ----------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_forward(ufunc, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return ufunc(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.data.shape} with {b.data.shape}") from e


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_forward(np.add, a, b)

    def fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_forward(np.subtract, a, b)

    def fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_forward(np.multiply, a, b)

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_forward(np.divide, a, b)

    def fn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(data, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.square(a.data), (a,), lambda g: (2.0 * a.data * g,))


# ----------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}") from e
    _add_macs(int(np.prod(data.shape, dtype=np.int64)) * a.data.shape[-1])

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), fn)


def mT(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError("mT needs at least 2 dimensions")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"bad permutation {axes} for ndim {a.data.ndim}")
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}") from e
    return _make(data, (a,), lambda g: (g.reshape(a.data.shape),))


def _getitem(a: Tensor, idx) -> Tensor:
    data = np.asarray(a.data[idx])

    def fn(g):
        out = np.zeros(a.data.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), fn)


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError("concat shape mismatch") from e
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(data, parts, fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        return (_spread(g, a.data.shape, axis, keepdims),)

    return _make(data, (a,), fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else int(np.prod([a.data.shape[i] for i in _axes_tuple(axis, a.data.ndim)]))

    def fn(g):
        return (_spread(g, a.data.shape, axis, keepdims) / count,)

    return _make(data, (a,), fn)


def _axes_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _spread(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is None and not keepdims:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, _axes_tuple(axis, len(shape)))
    return np.broadcast_to(g, shape).copy()


# ----------------------------------------------------------------------
# scalar nonlinearities


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (0.5 * g / data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _np_sigmoid(a.data)
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; softplus(0) = log 2."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _make(data, (a,), lambda g: (g * _np_sigmoid(a.data),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _np_sigmoid(a.data)
    data = a.data * s

    def fn(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _make(data, (a,), fn)


def silu_prime(a) -> Tensor:
    """First derivative of silu, as a differentiable op.

    silu'(x) = s(x) * (1 + x * (1 - s(x)));  its own derivative, used for the
    backward pass, is s(1-s) * (2 + x * (1 - 2s)).
    """
    a = as_tensor(a)
    s = _np_sigmoid(a.data)
    data = s * (1.0 + a.data * (1.0 - s))

    def fn(g):
        return (g * s * (1.0 - s) * (2.0 + a.data * (1.0 - 2.0 * s)),)

    return _make(data, (a,), fn)


# ----------------------------------------------------------------------
# reductions with structure


def softmax_rows(a, mask=None) -> Tensor:
    """Softmax over the last axis with an optional boolean visibility mask.

    Masked-out entries get probability exactly 0. A row with no visible
    entry raises :class:`DegenerateRowError`.
    """
    a = as_tensor(a)
    z = a.data
    if a.data.shape[-1] == 0:
        raise DegenerateRowError("softmax over empty rows")
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        z = np.where(m, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    data = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), fn)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis (no masking)."""
    a = as_tensor(a)
    zmax = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def fn(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _make(data, (a,), fn)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * gain, gain broadcast on the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    r = np.sqrt(np.mean(np.square(x.data), axis=-1, keepdims=True) + eps)
    u = x.data / r
    data = u * gain.data
    d = x.data.shape[-1]

    def fn(g):
        gh = g * gain.data
        dx = (gh - u * ((gh * u).sum(axis=-1, keepdims=True) / d)) / r
        dgain = _unbroadcast(g * u, gain.data.shape)
        return dx, dgain

    return _make(data, (x, gain), fn)


def l2_normalize(x, floor: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit L2 norm; rows below ``floor`` pass through
    scaled by 1/floor (zero rows therefore stay zero)."""
    x = as_tensor(x)
    n = np.linalg.norm(x.data, axis=-1, keepdims=True)
    clamped = np.maximum(n, floor)
    data = x.data / clamped
    active = n > floor

    def fn(g):
        proj = (g * data).sum(axis=-1, keepdims=True)
        dx = np.where(active, (g - data * proj) / clamped, g / clamped)
        return (dx,)

    return _make(data, (x,), fn)


def row_renorm(w, targets, floor: float = 1e-12) -> Tensor:
    """Rescale each row (last axis) of ``w`` to the target L2 norm.

    ``targets`` has the row shape (everything but the last axis). Rows whose
    current norm is below ``floor`` are returned unchanged, so an all-zero
    matrix is a fixed point regardless of its targets. Targets are treated
    as constants by the backward pass.
    """
    w = as_tensor(w)
    tgt = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    r = np.linalg.norm(w.data, axis=-1, keepdims=True)
    active = r > floor
    scale = np.where(active, tgt[..., None] / np.maximum(r, floor), 1.0)
    data = w.data * scale

    def fn(g):
        proj = (g * w.data).sum(axis=-1, keepdims=True)
        dw_active = scale * (g - w.data * (proj / np.maximum(r * r, floor * floor)))
        return (np.where(active, dw_active, g),)

    return _make(data, (w,), fn)


def frob_clip(g_in, theta: float) -> Tensor:
    """Clip each trailing matrix (last two axes) to Frobenius norm ``theta``.

    Matrices at or under the threshold pass through bitwise unchanged.
    """
    g_in = as_tensor(g_in)
    if g_in.data.ndim < 2:
        raise ShapeError("frob_clip needs at least 2 dimensions")
    if theta <= 0.0:
        raise ShapeError("clip threshold must be positive")
    r = np.sqrt(np.square(g_in.data).sum(axis=(-2, -1), keepdims=True))
    clipped = r > theta
    safe_r = np.where(clipped, r, 1.0)  # r > theta > 0 wherever it is used
    data = np.where(clipped, g_in.data * (theta / safe_r), g_in.data)

    def fn(g):
        if not clipped.any():
            return (g,)
        proj = (g * g_in.data).sum(axis=(-2, -1), keepdims=True)
        dg_c = (theta / safe_r) * g - g_in.data * (theta * proj / safe_r**3)
        return (np.where(clipped, dg_c, g),)

    return _make(data, (g_in,), fn)


def causal_conv1d(x, kernel) -> Tensor:
    """Depthwise causal convolution along the second-to-last axis.

    ``x`` has shape (..., L, d) and ``kernel`` (k, d); output[t] mixes
    x[t-k+1 .. t] with left zero padding, per channel:

        y[..., t, c] = sum_i kernel[i, c] * x[..., t-k+1+i, c]

    so kernel row k-1 multiplies the current token.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim < 2 or kernel.data.ndim != 2:
        raise ShapeError("causal_conv1d expects x (..., L, d) and kernel (k, d)")
    if x.data.shape[-1] != kernel.data.shape[-1]:
        raise ShapeError(f"channel mismatch {x.data.shape[-1]} vs {kernel.data.shape[-1]}")
    k = kernel.data.shape[0]
    data = np.zeros(x.data.shape)
    for i in range(k):
        shift = k - 1 - i
        if shift == 0:
            data += kernel.data[i] * x.data
        else:
            data[..., shift:, :] += kernel.data[i] * x.data[..., :-shift, :]
    _add_macs(int(np.prod(x.data.shape, dtype=np.int64)) * k)

    def fn(g):
        dx = np.zeros(x.data.shape)
        dk = np.zeros(kernel.data.shape)
        lead = tuple(range(g.ndim - 1))
        for i in range(k):
            shift = k - 1 - i
            if shift == 0:
                dx += kernel.data[i] * g
                dk[i] = (x.data * g).sum(axis=lead)
            else:
                dx[..., :-shift, :] += kernel.data[i] * g[..., shift:, :]
                dk[i] = (x.data[..., :-shift, :] * g[..., shift:, :]).sum(axis=lead)
        return dx, dk

    return _make(data, (x, kernel), fn)


def take_along_last(x, ids) -> Tensor:
    """Pick one entry per row along the last axis; ids shape = x.shape[:-1]."""
    x = as_tensor(x)
    ids = np.asarray(ids)
    if ids.shape != x.data.shape[:-1]:
        raise ShapeError(f"ids shape {ids.shape} != row shape {x.data.shape[:-1]}")
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def fn(g):
        out = np.zeros(x.data.shape)
        np.put_along_axis(out, ids[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(data, (x,), fn)
