"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the spacetime network needs are provided. Every op
accepts an optional leading batch axis so a whole mini-batch runs through
one tape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class UnsupportedKernelError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class StateError(RuntimeError):
    pass


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list = field(default_factory=list)
    enabled: bool = True

    def record(self, out, inputs, backward, name):
        self.nodes.append(_Node(out, tuple(inputs), backward, name))

    def clear(self):
        self.nodes.clear()

    def backward(self, root: "Tensor", grad: np.ndarray | None = None) -> list[str]:
        """Replay the tape in reverse from ``root``.

        Returns the names of the operations visited, in visiting order.
        The tape is cleared afterwards.
        """
        if grad is None:
            if root.data.size != 1:
                raise DimensionError(f"backward needs a scalar output, got shape {root.shape}")
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
        leaves = {}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            visited.append(node.name)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._is_leaf:
                    if key in leaves:
                        leaves[key][1] += gi
                    else:
                        leaves[key] = [inp, np.array(gi, dtype=inp.data.dtype)]
                elif key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if root._is_leaf and root.requires_grad:
            leaves.setdefault(id(root), [root, grad])
        for leaf, g in leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g
        self.clear()
        return visited


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus a gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else _DEFAULT_DTYPE))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        return current_tape().backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._is_leaf = False
    tape = current_tape()
    out.requires_grad = tape.enabled and any(t.requires_grad for t in inputs)
    out.grad = None
    if out.requires_grad:
        tape.record(out, inputs, backward, name)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _make(a.data * b.data, (a, b), backward, "mul")


def tabs(a: Tensor) -> Tensor:
    # subgradient 0 at 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x), with derivative 1 taken at exactly 0."""
    if not 0.0 < slope < 1.0:
        raise ParameterError(f"leaky slope must lie in (0, 1), got {slope}")
    neg_mask = x.data < 0
    factor = np.where(neg_mask, slope, 1.0).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def dropout(x: Tensor, rate: float, training: bool, rng_seed=None) -> Tensor:
    """Inverted dropout. ``rng_seed`` may be an int or a numpy Generator."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), backward, "index")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis (third from the end)."""
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:-3] != ref[:-3] or x.shape[-2:] != ref[-2:]:
            raise DimensionError(f"cannot concatenate shapes {ref} and {x.shape}")
    bounds = np.cumsum([x.shape[-3] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=-3))

    return _make(np.concatenate([x.data for x in xs], axis=-3), tuple(xs), backward, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 3:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2)).sum(axis=0)
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if bd.ndim == 2 and ad.ndim == 3:
            gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def softmax_rows(s: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    z = s.data - s.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (s,), backward, "softmax")


def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, c, h, w = xd.shape
    if kh == 1 and kw == 1:
        return xd.reshape(b, c, h * w)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # b, c, h, w, kh, kw
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, h * w)


def conv2d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded cross-correlation keeping the spatial size.

    x is (C_in, H, W) or (B, C_in, H, W); kernel is (C_out, C_in, kh, kw)
    with odd kh and kw.
    """
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 4-d, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedKernelError(f"kernel size {kh}x{kw} is not odd")
    if x.ndim not in (3, 4) or x.shape[-3] != c_in:
        raise DimensionError(f"conv2d input {x.shape} does not match kernel {kernel.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    b, _, h, w = xd.shape
    cols = _im2col(xd, kh, kw)
    wmat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (wmat @ cols).reshape(b, c_out, h, w)

    def backward(g):
        g = g.reshape(b, c_out, h * w)
        gk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            if kh == 1 and kw == 1:
                gx = (wmat.T @ g).reshape(b, c_in, h, w)
            else:
                # correlation with the flipped, channel-transposed kernel
                flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
                gx = (flipped @ _im2col(g.reshape(b, c_out, h, w), kh, kw)).reshape(b, c_in, h, w)
            if unbatched:
                gx = gx[0]
        return gx, gk

    return _make(out[0] if unbatched else out, (x, kernel), backward, "conv2d")


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} (shape {p.shape}) has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise StateError("Adam state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      floor: float = 1e-6) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    The relative error of each coordinate is |a - n| / max(|a|, |n|, floor).
    ``f`` may close over other leaves; only ``x`` is perturbed.
    """
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    current_tape().clear()
    out = f(x)
    if out.requires_grad:
        out.backward()
    else:
        current_tape().clear()
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.sum())
            flat[i] = orig - h
            fm = float(f(x).data.sum())
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
