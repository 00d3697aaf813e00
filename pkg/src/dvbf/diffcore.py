"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient slot. Executing ops
while a Tape is active records one node per op; Tape.backward replays the
records in reverse, visiting each node exactly once and accumulating
gradients with `+=`. Without an active tape every op is pure numpy
(evaluation mode).

The op set is deliberately small so every backward rule can be audited by
hand: dense algebra (matmul / linear / bmatvec), 3x3 same-padded strided
convolution and its exact adjoint, elementwise maps, axis sums, shape
plumbing (reshape / concat / narrow) and the reparameterized Gaussian
sample. Elementwise binaries broadcast only scalar-with-tensor or
equal-shape operands.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np


class DiffError(Exception):
    pass


class ShapeError(DiffError):
    """Operand dimensions do not satisfy the op contract."""


class DomainError(DiffError):
    """Operand values outside the op's legal range (e.g. log of x <= 0)."""


class ContractError(DiffError):
    """API misuse (non-scalar backward seed, nested tapes, ...)."""


# ---------------------------------------------------------------------------
# global precision switch
# ---------------------------------------------------------------------------

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float64


def set_precision(name: str) -> None:
    """Select the global dtype ('float32' or 'float64') for new tensors."""
    global _dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}")
    _dtype = _DTYPES[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    global _dtype
    prev = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = prev


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives for one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, callable]] = []

    def __enter__(self) -> "Tape":
        if _TAPE_STACK:
            raise ContractError("tapes do not nest")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and replay records in reverse order."""
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: "Tensor") -> None:
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # operator sugar; python numbers stay constants
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _record(out: Tensor, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise binaries (equal shape or scalar-with-tensor only)
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(
        f"{name}: shapes {a.data.shape} and {b.data.shape} are neither equal "
        "nor scalar-with-tensor"
    )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # undo scalar broadcast: sum everything back into the scalar slot
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _binary(a, b, name, fwd, da_fn, db_fn) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, name)
    out = Tensor(fwd(a.data, b.data), dtype=np.result_type(a.data, b.data))

    def bwd(g, a=a, b=b, out=out):
        if a.requires_grad:
            _accum(a, _reduce_to(da_fn(g, a.data, b.data, out.data), a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(db_fn(g, a.data, b.data, out.data), b.data.shape))

    return _record(out, (a, b), bwd)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


# ---------------------------------------------------------------------------
# elementwise unaries
# ---------------------------------------------------------------------------

def _unary(x, fwd, bwd_fn) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(fwd(x.data), dtype=x.data.dtype)

    def bwd(g, x=x, out=out):
        if x.requires_grad:
            _accum(x, bwd_fn(g, x.data, out.data))

    return _record(out, (x,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails: exp(-|x|) <= 1 always
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0),
                  lambda g, v, o: g * (v > 0))


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid_np, lambda g, v, o: g * o * (1.0 - o))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def softplus(x) -> Tensor:
    # max(x,0) + log1p(exp(-|x|)) never overflows
    return _unary(x, lambda v: np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v))),
                  lambda g, v, o: g * _sigmoid_np(v))


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda g, v, o: g * o)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if not np.all(x.data > 0):
        raise DomainError("log of non-positive value")
    return _unary(x, np.log, lambda g, v, o: g / v)


def square(x) -> Tensor:
    return _unary(x, np.square, lambda g, v, o: g * 2.0 * v)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if not np.all(x.data >= 0):
        raise DomainError("sqrt of negative value")
    return _unary(x, np.sqrt, lambda g, v, o: g * 0.5 / o)


# ---------------------------------------------------------------------------
# dense algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, dtype=a.data.dtype)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def linear(x, w, b) -> Tensor:
    """x @ w + b with b broadcast over rows (fused dense layer)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} x {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data, dtype=x.data.dtype)

    def bwd(g, x=x, w=w, b=b):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _record(out, (x, w, b), bwd)


def bmatvec(a, v) -> Tensor:
    """Batched matrix-vector product: [B,n,m] x [B,m] -> [B,n]."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.data.ndim != 3 or v.data.ndim != 2 or a.data.shape[0] != v.data.shape[0] \
            or a.data.shape[2] != v.data.shape[1]:
        raise ShapeError(f"bmatvec: incompatible shapes {a.data.shape} x {v.data.shape}")
    out = Tensor(np.matmul(a.data, v.data[:, :, None])[:, :, 0],
                 dtype=a.data.dtype)

    def bwd(g, a=a, v=v):
        if a.requires_grad:
            _accum(a, g[:, :, None] * v.data[:, None, :])
        if v.requires_grad:
            _accum(v, np.matmul(a.data.transpose(0, 2, 1), g[:, :, None])[:, :, 0])

    return _record(out, (a, v), bwd)


def bias_add(x, b, axis: int) -> Tensor:
    """Add a 1-D vector along `axis` of x, broadcasting over the rest."""
    x, b = _as_tensor(x), _as_tensor(b)
    axis = axis % x.data.ndim
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[axis]:
        raise ShapeError(
            f"bias_add: vector {b.data.shape} does not match axis {axis} of {x.data.shape}"
        )
    bshape = [1] * x.data.ndim
    bshape[axis] = -1
    out = Tensor(x.data + b.data.reshape(bshape), dtype=x.data.dtype)
    other_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def bwd(g, x=x, b=b):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=other_axes))

    return _record(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    """Sum over all elements (axis=None) or over the given axis/axes."""
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis), dtype=x.data.dtype)
    axes = None if axis is None else (axis if isinstance(axis, tuple) else (axis,))

    def bwd(g, x=x):
        if not x.requires_grad:
            return
        if axes is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            gg = g
            for ax in sorted(a % x.data.ndim for a in axes):
                gg = np.expand_dims(gg, ax)
            _accum(x, np.broadcast_to(gg, x.data.shape))

    return _record(out, (x,), bwd)


def tmean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), dtype=x.data.dtype)

    def bwd(g, x=x):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 dtype=parts[0].data.dtype)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, parts=parts):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return _record(out, parts, bwd)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    x = _as_tensor(x)
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} "
            f"of {x.data.shape}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy(), dtype=x.data.dtype)

    def bwd(g, x=x):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution (3x3-style odd kernels, zero same-padding, out = ceil(in/stride))
# ---------------------------------------------------------------------------

def _same_pads(h: int, s: int, k: int) -> tuple[int, int, int]:
    out = -(-h // s)
    total = max((out - 1) * s + k - h, 0)
    return out, total // 2, total - total // 2


def _conv_shapes(x_shape, k_shape, stride, name):
    if stride < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    b, c, h, w = x_shape
    o, ck, kh, kw = k_shape
    if ck != c:
        raise ShapeError(f"{name}: input channels {c} != kernel channels {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"{name}: kernels must have odd extent, got {kh}x{kw}")
    return b, c, h, w, o, kh, kw


def _conv_fwd(x: np.ndarray, kern: np.ndarray, s: int) -> np.ndarray:
    # shift-and-add: one channel GEMM per kernel tap (fast for 3x3 kernels)
    b, c, h, w = x.shape
    o, _, kh, kw = kern.shape
    ho, pt, pb = _same_pads(h, s, kh)
    wo, pl, pr = _same_pads(w, s, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((o, b, ho, wo), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + (ho - 1) * s + 1:s, dj:dj + (wo - 1) * s + 1:s]
            # [O,C] x [B,C,Y,X] contracted over C -> [O,B,Y,X]
            out += np.tensordot(kern[:, :, di, dj], xs, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_dkernel(x: np.ndarray, g: np.ndarray, s: int, k_shape) -> np.ndarray:
    b, c, h, w = x.shape
    o, _, kh, kw = k_shape
    ho, pt, pb = _same_pads(h, s, kh)
    wo, pl, pr = _same_pads(w, s, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    kg = np.empty(k_shape, dtype=g.dtype)
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + (ho - 1) * s + 1:s, dj:dj + (wo - 1) * s + 1:s]
            kg[:, :, di, dj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
    return kg


def _conv_dinput(g: np.ndarray, kern: np.ndarray, s: int, h: int, w: int) -> np.ndarray:
    # exact adjoint of _conv_fwd: scatter each tap's GEMM back onto the
    # strided input positions, then crop the padding
    b, o, ho, wo = g.shape
    _, c, kh, kw = kern.shape
    _, pt, pb = _same_pads(h, s, kh)
    _, pl, pr = _same_pads(w, s, kw)
    hp, wp = h + pt + pb, w + pl + pr
    gxp = np.zeros((c, b, hp, wp), dtype=g.dtype)
    for di in range(kh):
        for dj in range(kw):
            # [C,O] x [B,O,Y,X] contracted over O -> [C,B,Y,X]
            term = np.tensordot(kern[:, :, di, dj], g, axes=([0], [1]))
            gxp[:, :, di:di + (ho - 1) * s + 1:s,
                dj:dj + (wo - 1) * s + 1:s] += term
    return np.ascontiguousarray(gxp.transpose(1, 0, 2, 3)[:, :, pt:pt + h, pl:pl + w])


def _with_batch(x: Tensor):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"conv input must be 3-D or 4-D, got {x.data.shape}")


def conv2d(x, kern, stride: int = 1) -> Tensor:
    """Same-padded cross-correlation; output side = ceil(input/stride)."""
    x, kern = _as_tensor(x), _as_tensor(kern)
    xd, squeeze = _with_batch(x)
    _conv_shapes(xd.shape, kern.data.shape, stride, "conv2d")
    od = _conv_fwd(xd, kern.data, stride)
    out = Tensor(od[0] if squeeze else od, dtype=xd.dtype)
    h, w = xd.shape[2], xd.shape[3]

    def bwd(g, x=x, kern=kern):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            gx = _conv_dinput(gb, kern.data, stride, h, w)
            _accum(x, gx[0] if squeeze else gx)
        if kern.requires_grad:
            xd2 = x.data[None] if squeeze else x.data
            _accum(kern, _conv_dkernel(xd2, gb, stride, kern.data.shape))

    return _record(out, (x, kern), bwd)


def conv2d_transpose(y, kern, stride: int = 1) -> Tensor:
    """Exact adjoint of conv2d: [.., O, h', w'] -> [.., C, h'*stride, w'*stride]."""
    y, kern = _as_tensor(y), _as_tensor(kern)
    yd, squeeze = _with_batch(y)
    if stride < 1:
        raise ShapeError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    o, c, kh, kw = kern.data.shape
    if yd.shape[1] != o:
        raise ShapeError(
            f"conv2d_transpose: input channels {yd.shape[1]} != kernel out channels {o}"
        )
    h, w = yd.shape[2] * stride, yd.shape[3] * stride
    od = _conv_dinput(yd, kern.data, stride, h, w)
    out = Tensor(od[0] if squeeze else od, dtype=yd.dtype)

    def bwd(g, y=y, kern=kern):
        gb = g[None] if squeeze else g
        if y.requires_grad:
            _accum(y, _conv_fwd(gb, kern.data, stride)[0] if squeeze
                   else _conv_fwd(gb, kern.data, stride))
        if kern.requires_grad:
            yd2 = y.data[None] if squeeze else y.data
            _accum(kern, _conv_dkernel(gb, yd2, stride, kern.data.shape))

    return _record(out, (y, kern), bwd)


# ---------------------------------------------------------------------------
# stochastic node
# ---------------------------------------------------------------------------

def sample_reparam(mean, var, noise: np.ndarray) -> Tensor:
    """mean + sqrt(var) * noise; gradients flow to mean and var only.

    Differentiated use requires var > 0; with no active tape var = 0 is
    accepted (degenerate evaluation mode).
    """
    mean, var = _as_tensor(mean), _as_tensor(var)
    noise = np.asarray(noise, dtype=mean.data.dtype)
    if noise.shape != mean.data.shape:
        raise ShapeError(f"noise shape {noise.shape} != mean shape {mean.data.shape}")
    if var.data.shape != mean.data.shape:
        raise ShapeError(f"var shape {var.data.shape} != mean shape {mean.data.shape}")
    recording = active_tape() is not None and (mean.requires_grad or var.requires_grad)
    if recording:
        if not np.all(var.data > 0):
            raise DomainError("sample_reparam: variance must be positive")
    elif not np.all(var.data >= 0):
        raise DomainError("sample_reparam: variance must be non-negative")
    std = np.sqrt(var.data)
    out = Tensor(mean.data + std * noise, dtype=mean.data.dtype)

    def bwd(g, mean=mean, var=var):
        if mean.requires_grad:
            _accum(mean, g)
        if var.requires_grad:
            _accum(var, g * noise / (2.0 * std))

    return _record(out, (mean, var), bwd)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax of a 2-D tensor, built from primitives.

    The max shift is a detached constant, so gradients are exact.
    """
    b, k = x.data.shape
    shift = Tensor(-x.data.max(axis=1), dtype=x.data.dtype)
    e = exp(bias_add(x, shift, axis=0))
    denom = reshape(tsum(e, axis=1), (b, 1))
    ones_row = Tensor(np.ones((1, k), dtype=x.data.dtype))
    return div(e, matmul(denom, ones_row))


def expand_cols(col: Tensor, n: int) -> Tensor:
    """Tile a [B,1] column to [B,n] via matmul with a constant ones row."""
    ones_row = Tensor(np.ones((1, n), dtype=col.data.dtype))
    return matmul(col, ones_row)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.square(a, dtype=np.float64)))
    return math.sqrt(total)
