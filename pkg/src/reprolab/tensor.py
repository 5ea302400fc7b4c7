"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: enough primitives to express padded
convolutional classifiers and to differentiate their loss with respect to
input pixels. Each operation records its inputs and a backward rule on the
output tensor; ``backward`` replays the recorded rules in reverse creation
order, which is a fixed topological order of the graph, so gradient
accumulation is deterministic.

All arrays are C-contiguous float64. Tensors are immutable after creation
except for their ``grad`` buffers.
"""

from __future__ import annotations

import itertools
import json
import struct
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, LabelError, NumericError, ShapeError

# next() on itertools.count is atomic under the GIL, giving every tensor a
# process-wide creation index even with concurrent disjoint tapes.
_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A dense float64 array plus optional gradient and tape bookkeeping.

    ``array`` is the shaped C-order buffer; ``data`` exposes the flat
    row-major view the serialization format is defined over. ``grad`` is
    allocated lazily during backward and has the same shape as ``array``.
    """

    __slots__ = ("array", "requires_grad", "grad", "_parents", "_backward_rule", "_id")

    def __init__(self, array, requires_grad: bool = False):
        arr = np.asarray(array, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; only copy when
        # the layout actually needs fixing.
        self.array = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], None] | None = None
        self._id = next(_node_ids)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major float64 view of the underlying buffer."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        if not self.shape:
            raise ShapeError("len() of a scalar tensor")
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make_node(array: np.ndarray, parents: Sequence[Tensor],
               backward_rule: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(array)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = backward_rule
    return out


def _accumulate(t: Tensor, grad: np.ndarray, owned: bool = False) -> None:
    # ``owned`` marks freshly allocated arrays the rule will not reuse, which
    # may be adopted without a defensive copy.
    if t.grad is None:
        t.grad = grad if owned and grad.flags.c_contiguous else np.array(grad, dtype=np.float64)
    else:
        t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and linear primitives ----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.array + b.array
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad, b.shape))

    return _make_node(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.array * b.array
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad * b.array, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad * a.array, b.shape))

    return _make_node(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, -grad)

    return _make_node(-a.array, (a,), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad * c)

    return _make_node(a.array * c, (a,), rule)


def tensor_sum(a: Tensor) -> Tensor:
    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, np.full_like(a.array, float(grad)))

    return _make_node(np.asarray(a.array.sum()), (a,), rule)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.array.size

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, np.full_like(a.array, float(grad) / n))

    return _make_node(np.asarray(a.array.mean()), (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.array.reshape(shape)

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad.reshape(a.shape))

    return _make_node(out, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ between {a.shape} and {b.shape}")
    out = a.array @ b.array

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad @ b.array.T)
        if b.requires_grad:
            _accumulate(b, a.array.T @ grad)

    return _make_node(out, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.array, 0.0)

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad * (a.array > 0.0))

    return _make_node(out, (a,), rule)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the keep mask is drawn from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def rule(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad * keep)

    return _make_node(a.array * keep, (a,), rule)


# -- convolution and pooling ---------------------------------------------------
#
# Convolution runs on a "wrapped grid": the zero-padded batch is flattened to a
# channel-major (C, N*Hp*Wp) matrix, whereupon every kernel offset (a, b)
# becomes one GEMM against a contiguous slice shifted by a*Wp + b. Offsets wrap
# across row and sample boundaries, but every wrapped output cell lands outside
# the valid output rows/columns and is cropped, and the backward passes place
# zeros there, so no garbage propagates. This avoids materializing im2col
# patch matrices (a 9x data blow-up for 3x3 kernels) entirely.


def _wrap_grid(x4: np.ndarray, padding: int, kw: int) -> np.ndarray:
    """Channel-major zero-padded batch grid with a kw-1 wrap margin."""
    n, c, h, w = x4.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    grid = np.zeros((c, n * hp * wp + kw - 1))
    view = grid[:, : n * hp * wp].reshape(c, n, hp, wp)
    view[:, :, padding : padding + h, padding : padding + w] = x4.transpose(1, 0, 2, 3)
    return grid


# Segment length (elements per channel) for the offset GEMM loops; sized so a
# segment of the grid plus accumulators stays cache-resident.
_SEG = 8192


def _offset_gemm(out2: np.ndarray, wmats, grid: np.ndarray, offsets, span: int) -> None:
    """out2[:, q] = sum_k wmats[k] @ grid[:, q + offsets[k]], segment by segment."""
    tmp = np.empty((out2.shape[0], min(_SEG, span)))
    for s0 in range(0, span, _SEG):
        s1 = min(s0 + _SEG, span)
        length = s1 - s0
        acc = out2[:, s0:s1]
        for k, (off, w) in enumerate(zip(offsets, wmats)):
            np.matmul(w, grid[:, s0 + off : s1 + off], out=acc if k == 0 else tmp[:, :length])
            if k:
                acc += tmp[:, :length]


def _offset_gemm_scatter(dgrid: np.ndarray, wmats, gwin: np.ndarray, offsets, span: int) -> None:
    """dgrid[:, q + offsets[k]] += wmats[k] @ gwin[:, q], segment by segment."""
    tmp = np.empty((dgrid.shape[0], min(_SEG, span)))
    for s0 in range(0, span, _SEG):
        s1 = min(s0 + _SEG, span)
        length = s1 - s0
        for off, w in zip(offsets, wmats):
            np.matmul(w, gwin[:, s0:s1], out=tmp[:, :length])
            dgrid[:, s0 + off : s1 + off] += tmp[:, :length]


def _offset_gemm_outer(gwin: np.ndarray, grid: np.ndarray, offsets, span: int,
                       c_out: int, c_in: int) -> np.ndarray:
    """Per-offset outer products dW[k] = gwin @ grid[:, off:off+span].T, segmented."""
    dw = np.zeros((len(offsets), c_out, c_in))
    tmp = np.empty((c_out, c_in))
    for s0 in range(0, span, _SEG):
        s1 = min(s0 + _SEG, span)
        gseg = gwin[:, s0:s1]
        for k, off in enumerate(offsets):
            np.matmul(gseg, grid[:, s0 + off : s1 + off].T, out=tmp)
            dw[k] += tmp
    return dw


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, kH, kW). Output extent is floor((H + 2p - kH)/stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kernels.array.ndim != 4:
        raise ShapeError(f"conv2d kernels must be 4-D, got shape {kernels.shape}")
    if x.array.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    single = x.array.ndim == 3
    xa = x.array[None] if single else x.array
    n, c_in, h, w = xa.shape
    c_out, k_cin, kh, kw = kernels.shape
    if k_cin != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernels expect {k_cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    wk = kernels.array
    grid = _wrap_grid(xa, padding, kw)
    offsets = [a * wp + b for a in range(kh) for b in range(kw)]
    # Valid stride-1 output extents; the GEMM window covers every grid row
    # that exists for all kh row offsets.
    h1, w1 = hp - kh + 1, wp - kw + 1
    span = (n * hp - (kh - 1)) * wp
    wmats = [np.ascontiguousarray(wk[:, :, a, b]) for a in range(kh) for b in range(kw)]
    acc = np.empty((c_out, span))
    _offset_gemm(acc, wmats, grid, offsets, span)
    rows = (np.arange(n)[:, None] * hp + np.arange(0, h1, stride)[None, :]).ravel()
    acc3 = acc.reshape(c_out, n * hp - (kh - 1), wp)
    out_h, out_w = (h1 + stride - 1) // stride, (w1 + stride - 1) // stride
    out = np.empty((n, c_out, out_h, out_w))
    out.transpose(1, 0, 2, 3)[...] = acc3[:, rows, : w1 : stride].reshape(
        c_out, n, out_h, out_w
    )

    def rule(grad_out: np.ndarray) -> None:
        grad = grad_out[None] if single else grad_out
        # Output gradient scattered (with stride dilation) onto the padded grid
        # geometry; zeros elsewhere kill all wrapped contributions.
        gfull = np.zeros((c_out, n * hp * wp))
        gview = gfull.reshape(c_out, n, hp, wp)
        gview[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride] = (
            grad.transpose(1, 0, 2, 3)
        )
        gwin = gfull[:, :span]
        if kernels.requires_grad:
            dw_flat = _offset_gemm_outer(gwin, grid, offsets, span, c_out, c_in)
            _accumulate(kernels, dw_flat.transpose(1, 2, 0).reshape(wk.shape), owned=False)
        if x.requires_grad:
            dgrid = np.zeros((c_in, n * hp * wp + kw - 1))
            wmats_t = [np.ascontiguousarray(m.T) for m in wmats]
            _offset_gemm_scatter(dgrid, wmats_t, gwin, offsets, span)
            dview = dgrid[:, : n * hp * wp].reshape(c_in, n, hp, wp)
            dx = np.empty((n, c_in, h, w))
            dx.transpose(1, 0, 2, 3)[...] = dview[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, dx[0] if single else dx, owned=True)

    return _make_node(out[0] if single else out, (x, kernels), rule)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the lowest flat index."""
    if x.array.ndim not in (3, 4):
        raise ShapeError(f"maxpool2d input must be 3-D or 4-D, got shape {x.shape}")
    single = x.array.ndim == 3
    xa = x.array[None] if single else x.array
    n, c, h, w = xa.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by window {window}")
    # One strided view per in-window offset, in row-major offset order; the
    # backward pass gives ties to the first offset attaining the maximum,
    # i.e. the lowest flat index in the source tensor.
    in_window = [(a, b) for a in range(window) for b in range(window)]
    slices = [xa[:, :, a::window, b::window] for a, b in in_window]
    out = np.maximum(slices[0], slices[1]) if len(slices) > 1 else slices[0].copy()
    for s in slices[2:]:
        np.maximum(out, s, out=out)

    def rule(grad_out: np.ndarray) -> None:
        if not x.requires_grad:
            return
        grad = grad_out[None] if single else grad_out
        dx = np.zeros_like(xa)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (a, b) in enumerate(in_window):
            winner = (slices[k] == out) & ~taken
            dx[:, :, a::window, b::window] = grad * winner
            taken |= winner
        _accumulate(x, dx[0] if single else dx, owned=True)

    return _make_node(out[0] if single else out, (x,), rule)


# -- loss ----------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stabilized by row-max subtraction; gradient is (softmax - onehot)/n.
    """
    if logits.array.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (n, classes) logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        idx = int(np.argmax(bad))
        raise LabelError(f"label {labels[idx]} at index {idx} outside [0, {c})")

    shifted = logits.array - logits.array.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def rule(grad: np.ndarray) -> None:
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(n), labels] -= 1.0
            _accumulate(logits, probs * (float(grad) / n))

    return _make_node(np.asarray(loss), (logits,), rule)


# -- backward pass ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable requires_grad tensor.

    Nodes are replayed in reverse creation order (a fixed topological order of
    the recorded operations), so fan-out sums always reduce in the same order.
    """
    if loss.array.size != 1:
        raise ShapeError(f"backward() requires a scalar loss, got shape {loss.shape}")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)

    loss.grad = np.ones_like(loss.array)
    for node in nodes:
        if node._backward_rule is not None and node.grad is not None:
            node._backward_rule(node.grad)


# -- gradient checking -------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    Returns max over coordinates of |analytic - central| / max(1, |central|).
    """
    leaf = Tensor(x.array.copy(), requires_grad=True)
    out = f(leaf)
    if out.array.size != 1:
        raise ShapeError("finite_diff_check requires a scalar-valued function")
    backward(out)
    analytic = (np.zeros_like(leaf.array) if leaf.grad is None else leaf.grad).reshape(-1)

    flat = x.array.copy().reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(flat.reshape(x.shape).copy())).item()
            flat[i] = orig - h
            lo = f(Tensor(flat.reshape(x.shape).copy())).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite function value near coordinate {i}")
            central = (hi - lo) / (2.0 * h)
            err = abs(analytic[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst


# -- serialization -------------------------------------------------------------------

_MAGIC = b"TNSR"


def save_tensor(t: Tensor, path) -> None:
    """Write little-endian binary: magic, u32 rank, u64 extents, float64 payload."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(t.shape)))
        for extent in t.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(t.array.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise FormatError(f"{path}: truncated payload, expected {count} float64 values")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(arr)


def tensor_to_json(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": [float(v) for v in t.data]}


def tensor_from_json(obj: dict) -> Tensor:
    shape = tuple(int(s) for s in obj["shape"])
    arr = np.asarray(obj["data"], dtype=np.float64)
    expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if arr.size != expected:
        raise FormatError(f"JSON tensor payload length {arr.size} does not match shape {shape}")
    return Tensor(arr.reshape(shape))
