"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves onto the active :class:`Tape` (if any). Outside
a tape they are plain numpy forward passes, which is what rollouts use.

    with Tape() as tape:
        loss = dsum(activation(matmul(x, w), "tanh"))
    backward(tape, loss)
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

_ACTIVE: List["Tape"] = []


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications (inputs always precede outputs)."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._outputs = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn) -> None:
        self.nodes.append(_Node(out, tuple(inputs), fn))
        self._outputs.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def __len__(self):
        return len(self.nodes)


class ParamStore(dict):
    """name -> Tensor. Every entry carries a gradient slot."""

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.zero_grad()
        super().__setitem__(name, t)

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.items():
            out[k] = Tensor(t.data.copy())
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, fn) -> Tensor:
    out = Tensor(data)
    if _ACTIVE:
        _ACTIVE[-1].record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return _make(x.data * mask, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return _make(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x.data)
        return _make(y, (x,), lambda g: (g * (1.0 - y * y),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


# ---------------------------------------------------------------- reductions / shape

def dsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(dsum(x, axis=axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_along(x, idx: np.ndarray) -> Tensor:
    """Select ``x[i, idx[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return _make(x.data[rows, idx], (x,), bw)


# ---------------------------------------------------------------- linear algebra

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (inputs need ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g @ _swap(bd), ad.shape),
                _unbroadcast(_swap(ad) @ g, bd.shape))

    return _make(ad @ bd, (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Valid cross-correlation.

    ``x`` is C_in x H x W or batched N x C_in x H x W; ``kernel`` is
    C_out x C_in x kH x kW.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, kd = x.data, kernel.data
    batched = xd.ndim == 4
    if not batched:
        xd = xd[None]
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kd.shape
    if kc != c_in:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, kernel {kc}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # n c ho wo kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    kmat = kd.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def bw(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gmat.T @ cols).reshape(kd.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c_in, kh, kw)
        gx = np.zeros((n, c_in, h, w))
        # scatter back one kernel offset at a time
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (gx if batched else gx[0], gk)

    return _make(out, (x, kernel), bw)


# ---------------------------------------------------------------- recurrent

GRU_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_cell(x, h_prev, params) -> Tensor:
    """Standard GRU update with row-vector convention (``x @ W``).

    ``params`` maps the names in :data:`GRU_NAMES` to tensors; ``W_*`` are
    d_in x d_h, ``U_*`` are d_h x d_h.
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    p = {k: params[k] for k in GRU_NAMES}
    if x.shape[-1] != p["W_z"].shape[0] or h_prev.shape[-1] != p["U_z"].shape[0]:
        raise ValueError(
            f"gru_cell shape mismatch: x {x.shape}, h {h_prev.shape}, W {p['W_z'].shape}")
    squeeze = x.data.ndim == 1
    if squeeze:
        x, h_prev = reshape(x, (1, -1)), reshape(h_prev, (1, -1))
    z = sigmoid(matmul(x, p["W_z"]) + matmul(h_prev, p["U_z"]) + p["b_z"])
    r = sigmoid(matmul(x, p["W_r"]) + matmul(h_prev, p["U_r"]) + p["b_r"])
    cand = tanh(matmul(x, p["W_h"]) + matmul(mul(r, h_prev), p["U_h"]) + p["b_h"])
    h = mul(sub(1.0, z), cand) + mul(z, h_prev)
    if squeeze:
        h = reshape(h, (-1,))
    return h


# ---------------------------------------------------------------- backward / checks

def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep; adds into ``.grad`` of every leaf that requires it."""
    if loss not in tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.requires_grad:
                leaves[key] = inp
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-5,
               names: Optional[Iterable[str]] = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from ``params`` on every call.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss in grad_check")
    backward(tape, loss)
    worst = 0.0
    for name in (names if names is not None else list(params)):
        t = params[name]
        analytic = t.grad.ravel()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).data)
            flat[i] = orig - h
            fm = float(f(params).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
