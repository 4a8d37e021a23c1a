"""Minimal dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (entered as a context
manager) whenever at least one input requires a gradient. ``backward`` walks
the tape in reverse execution order, which is an anti-topological order of
the graph, and accumulates gradients into every leaf that requires one.

Layout is NCHW throughout. Convolutions use an im2col lowering so the heavy
lifting happens inside BLAS matrix products.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense array that can participate in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return tsum(self)


def _not_scalar():
    raise ValueError("item() requires a single-element tensor")


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient of the same shape."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> Tape:
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Raises:
        ValueError: if ``loss`` is not a single-element tensor or was not
            produced on ``tape``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(t):
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    av, bv = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _emit(av * bv, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def log(a: Tensor) -> Tensor:
    av = a.data
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    av = a.data
    inside = (av >= lo) & (av <= hi)
    return _emit(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    xv = x.data
    pos = xv > 0
    return _emit(np.where(pos, xv, 0).astype(xv.dtype), (x,), lambda g: (g * pos,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ----------------------------------------------------------- image operations


def _check4(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} expects a 4-D (B, C, H, W) tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, h, w), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * k * k, h * w)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding plus bias.

    Args:
        x: input of shape (B, Cin, H, W).
        w: kernel of shape (Cout, Cin, k, k), k odd.
        b: bias of shape (Cout,).
    """
    _check4(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"conv2d kernel must be (Cout, Cin, k, k) with odd k, got {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, wd)
    wm = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols)
    out += b.data[None, :, None]
    out = out.reshape(bsz, cout, h, wd)

    def vjp(g):
        g2 = g.reshape(bsz, cout, h * wd)
        gb = g2.sum(axis=(0, 2)) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g2).reshape(bsz, cin, k, k, h, wd)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy:dy + h, dx:dx + wd] += gcols[:, :, dy, dx]
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return _emit(out, (x, w, b), vjp)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-2, kernel-2 transposed convolution doubling H and W.

    Args:
        x: input of shape (B, Cin, H, W).
        w: kernel of shape (Cin, Cout, 2, 2).
        b: bias of shape (Cout,).
    """
    _check4(x, "conv_transpose2d")
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError(f"conv_transpose2d kernel must be (Cin, Cout, 2, 2), got {w.shape}")
    bsz, cin, h, wd = x.shape
    if w.shape[0] != cin:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {cin}, kernel expects {w.shape[0]}")
    cout = w.shape[1]
    if b.shape != (cout,):
        raise ValueError(f"conv_transpose2d bias must have shape ({cout},), got {b.shape}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, cout * 4)
    y = (xm @ wm).reshape(bsz, h, wd, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(bsz, cout, 2 * h, 2 * wd)
    out = out + b.data[None, :, None, None]

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gm = g.reshape(bsz, cout, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gw = (xm.T @ gm).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (gm @ wm.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _emit(out, (x, w, b), vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 block max; gradient goes to the first maximal element of each block."""
    _check4(x, "maxpool2x2")
    bsz, c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{wd}")
    blocks = x.data.reshape(bsz, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(bsz, c, h // 2, wd // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(bsz, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(bsz, c, h, wd),)

    return _emit(out, (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels")
    _check4(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1, max-subtracted for stability."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), vjp)


def segment_mean(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Per-segment channel means of a (B, C, H, W) tensor.

    Args:
        x: values of shape (B, C, H, W).
        segments: integer map of shape (B, H, W); entries in [0, n_segments)
            select a segment, -1 leaves the pixel out.
        n_segments: number of segments; each must own at least one pixel.

    Returns:
        Tensor of shape (n_segments, C).
    """
    _check4(x, "segment_mean")
    bsz, c, h, wd = x.shape
    seg = np.asarray(segments).reshape(bsz, h * wd)
    if seg.shape != (bsz, h * wd):
        raise ValueError("segment map does not match tensor spatial shape")
    flat = seg.reshape(-1)
    keep = flat >= 0
    ids = flat[keep]
    counts = np.bincount(ids, minlength=n_segments)[:n_segments]
    if (counts == 0).any():
        raise ValueError(f"segment {int(np.argmax(counts == 0))} owns no pixels")
    vals = x.data.transpose(0, 2, 3, 1).reshape(-1, c)[keep]
    sums = np.zeros((n_segments, c), dtype=np.float64)
    for ch in range(c):
        sums[:, ch] = np.bincount(ids, weights=vals[:, ch], minlength=n_segments)
    out = (sums / counts[:, None]).astype(x.dtype)

    def vjp(g):
        per = (g / counts[:, None]).astype(x.dtype)
        gflat = np.zeros((bsz * h * wd, c), dtype=x.dtype)
        gflat[keep] = per[ids]
        return (gflat.reshape(bsz, h, wd, c).transpose(0, 3, 1, 2),)

    return _emit(out, (x,), vjp)


# --------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...]
    n_checked: int
    passed: bool


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    tol: float = 1e-4,
    h: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
    analytic: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``analytic`` overrides the tape gradient, which lets callers check the
    harness itself against a corrupted gradient.
    """
    x = np.array(x, dtype=np.float64)
    if analytic is None:
        leaf = Tensor(x.copy(), requires_grad=True)
        with Tape() as tape:
            out = f(leaf)
        backward(out, tape)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst, worst_idx = 0.0, ()
    for idx in indices:
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
        a = float(analytic[idx])
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        if err > worst:
            worst, worst_idx = err, tuple(int(i) for i in idx)
    return GradCheckReport(worst, worst_idx, len(indices), worst < tol)
