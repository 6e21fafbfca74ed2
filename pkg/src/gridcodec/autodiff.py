"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the synthesis and context networks need are provided.
Every op works on float32 (training) and float64 (gradient checks) alike; the
dtype of the result follows numpy promotion of the inputs.

Recording happens only inside an active :class:`Tape` and only for ops that
touch a tensor with ``requires_grad=True``. Outside a tape the ops are plain
numpy computations, which is how the codec runs them at encode/decode time.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .gaussian import PROB_FLOOR, bin_mass

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "matmul",
    "affine",
    "relu",
    "gelu",
    "sigmoid",
    "clamp",
    "mse_loss",
    "masked_product",
    "conv2d",
    "conv1d_temporal",
    "conv3d",
    "upsample_nearest2x",
    "block_expand",
    "ste_round",
    "gaussian_bits",
    "PROB_FLOOR",
]

_LN2 = math.log(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE: list["Tape"] = []


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

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
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple, fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is already in topological
    order; :func:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and not isinstance(x, np.ndarray):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b) -> tuple:
    """Wrap operands; bare Python scalars take the dtype of the tensor operand."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _result(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(out, tuple(inputs), fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> list:
    """Back-propagate ``loss`` through ``tape``.

    Gradients land in ``.grad`` of every leaf reached. Tensors in ``params``
    that did not take part in the computation get a zero gradient. Returns the
    gradients of ``params`` in order (empty list when ``params`` is None).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = {id(node.out) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = _unbroadcast(np.asarray(ig, dtype=inp.data.dtype), inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))
    out = []
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def masked_product(mask, z) -> Tensor:
    """Zero ``z`` wherever the constant ``mask`` is zero (``m ⊗ z``)."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=as_tensor(z).dtype)
    z = as_tensor(z)
    return _result(m * z.data, (z,), lambda g: (g * m,))


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        return (np.broadcast_to(np.expand_dims(g, tuple(ax % len(shape) for ax in axes)), shape),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), fn)


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.cumsum(a.data, axis=axis), (a,),
                   lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    shape = a.shape
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), fn)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), fn)


def affine(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``x`` of shape (..., in), ``w`` (in, out), ``b`` (out,)."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ----------------------------------------------------------------------------
# nonlinearities and losses

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x2))
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dt = (1.0 - t * t) * (_GELU_C * (1.0 + 3 * 0.044715 * x2))
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def mse_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def fn(g):
        d = (2.0 / n) * g * diff
        return (d, -d)

    return _result(np.asarray(np.mean(diff * diff)), (a, b), fn)


# ----------------------------------------------------------------------------
# convolutions; activations are laid out (T, C, H, W), frames act as batch


def _odd(k: int, what: str) -> None:
    if k % 2 != 1:
        raise DimensionError(f"{what} kernel extent must be odd, got {k}")


def _conv3d_data(x: np.ndarray, w: np.ndarray, phase=None):
    """Batched (B, T, C, H, W) cross-correlation; returns output and the window view."""
    kt, kh, kw = w.shape[2:]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (pt, pt), (0, 0), (ph, ph), (pw, pw)))
    v = sliding_window_view(xp, (kt, kh, kw), axis=(1, 3, 4))
    if phase is not None:
        v = v[:, :, :, phase[0]::2, phase[1]::2]
    out = np.tensordot(v, w, axes=([2, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 1, 4, 2, 3)), v


def _conv3d_input_grad(g, wd, xshape, phase):
    """Gradient of a batched conv3d w.r.t. its input.

    With fewer input than output channels (or a subsampled output) the
    per-tap products are formed by one matrix product and scattered back
    (col2im), which avoids unfolding the wide output gradient.
    """
    B, T, C, H, W = xshape
    Co = wd.shape[0]
    kt, kh, kw = wd.shape[2:]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    if phase is None and Co <= C:
        wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        return _conv3d_data(g, wf)[0]
    stride = 1 if phase is None else 2
    h_off, w_off = (0, 0) if phase is None else phase
    nh, nw = g.shape[3], g.shape[4]
    cols = np.tensordot(g, wd, axes=([2], [0]))  # (B, T, nh, nw, C, kt, kh, kw)
    dxp = np.zeros((B, T + 2 * pt, H + 2 * ph, W + 2 * pw, C), dtype=g.dtype)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                h0, w0 = h_off + b, w_off + c
                dxp[:, a:a + T, h0:h0 + stride * (nh - 1) + 1:stride, w0:w0 + stride * (nw - 1) + 1:stride] += \
                    cols[..., a, b, c]
    return np.ascontiguousarray(dxp[:, pt:pt + T, ph:ph + H, pw:pw + W].transpose(0, 1, 4, 2, 3))


def conv3d(x, w, bias=None, phase: Optional[tuple] = None) -> Tensor:
    """Same-size 3D cross-correlation over (T, H, W) with zero padding.

    ``x`` is (T, C, H, W), or (B, T, C, H, W) for a batch of independent
    volumes; ``w`` is (Co, C, kt, kh, kw) with odd extents. With
    ``phase=(ph, pw)`` only outputs at rows ``h % 2 == ph`` and columns
    ``w % 2 == pw`` are computed, giving spatial extents
    ``ceil((H-ph)/2) x ceil((W-pw)/2)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim not in (4, 5) or w.ndim != 5:
        raise DimensionError(f"conv3d expects ([B,]T,C,H,W) and (Co,C,kt,kh,kw); got {x.shape}, {w.shape}")
    if x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape[-3]}, kernel {w.shape[1]}")
    for k in w.shape[2:]:
        _odd(k, "conv3d")
    batched = x.ndim == 5
    xd, wd = (x.data if batched else x.data[None]), w.data
    out, v = _conv3d_data(xd, wd, phase)
    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, 1, -1, 1, 1)
        inputs.append(bias)
    if not batched:
        out = out[0]

    def fn(g):
        if not batched:
            g = g[None]
        dw = np.tensordot(g, v, axes=([0, 1, 3, 4], [0, 1, 3, 4])) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = _conv3d_input_grad(g, wd, xd.shape, phase)
            if not batched:
                dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 3, 4)))
        return tuple(grads)

    return _result(out, inputs, fn)


def _phase_taps(r: int, s: int) -> tuple:
    """Kernel slice and lattice offset linking input parity ``s`` to output parity ``r``."""
    if r == s:
        return slice(1, 2), 0
    return slice(0, 3, 2), (-1 if r == 0 else 0)


def _polyphase_narrow(x, w, xd, wsub, taps, pads, out_hw) -> Tensor:
    """Few output channels: multiply every sample by all taps once, then shift-add the small products."""
    B, T, C, H, W = xd.shape
    Co, _, kt, kh, kw = wsub.shape
    lo_h, hi_h, lo_w, hi_w = pads
    Hu, Wv = out_hw
    wmat = wsub.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    xt = np.ascontiguousarray(xd.transpose(0, 1, 3, 4, 2))
    y = (xt.reshape(-1, C) @ wmat).reshape(B, T, H, W, Co, kt, kh, kw)
    yp = np.pad(y, ((0, 0), (1, 1), (lo_h, hi_h), (lo_w, hi_w), (0, 0), (0, 0), (0, 0), (0, 0)))
    out = np.zeros((B, T, Hu, Wv, Co), dtype=y.dtype)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                out += yp[:, a:a + T, b:b + Hu, c:c + Wv, :, a, b, c]

    def fn(g):
        gt = g.transpose(0, 1, 3, 4, 2)
        dyp = np.zeros(yp.shape, dtype=g.dtype)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    dyp[:, a:a + T, b:b + Hu, c:c + Wv, :, a, b, c] = gt
        dy = dyp[:, 1:T + 1, lo_h:lo_h + H, lo_w:lo_w + W].reshape(-1, wmat.shape[1])
        dx = None
        if x.requires_grad:
            dx = np.ascontiguousarray((dy @ wmat.T).reshape(B, T, H, W, C).transpose(0, 1, 4, 2, 3))
        dw = None
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            dw[:, :, :, taps[0], taps[1]] = (xt.reshape(-1, C).T @ dy).reshape(C, Co, kt, kh, kw).transpose(1, 0, 2, 3, 4)
        return dx, dw

    return _result(np.ascontiguousarray(out.transpose(0, 1, 4, 2, 3)), [x, w], fn)


def conv3d_polyphase(x, w, r: tuple, s: tuple, out_hw: tuple) -> Tensor:
    """One parity term of a same-size 3x3x3 conv3d.

    ``x`` (B, T, C, Hs, Ws) holds the rows ``h % 2 == s[0]`` and columns
    ``w % 2 == s[1]`` of a full-resolution volume; the result (B, T, Co, *out_hw)
    is the contribution of those samples to the outputs at parity ``r``.
    Summing over the four input parities reproduces ``conv3d(...)[..., r[0]::2,
    r[1]::2]`` while only touching taps that connect the two lattices.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.shape[2:] != (3, 3, 3) or x.shape[2] != w.shape[1]:
        raise DimensionError(f"conv3d_polyphase expects (B,T,C,H,W) and (Co,C,3,3,3); got {x.shape}, {w.shape}")
    (sh_h, oh), (sh_w, ow) = _phase_taps(r[0], s[0]), _phase_taps(r[1], s[1])
    xd, wd = x.data, w.data
    wsub = np.ascontiguousarray(wd[:, :, :, sh_h, sh_w])
    kh, kw = wsub.shape[3:]
    B, T, C, H, W = xd.shape
    Hu, Wv = out_hw
    lo_h, lo_w = -oh, -ow
    hi_h = max(0, max(Hu, 1) - 1 + oh + kh - H)
    hi_w = max(0, max(Wv, 1) - 1 + ow + kw - W)
    if wsub.shape[0] < C:
        return _polyphase_narrow(x, w, xd, wsub, (sh_h, sh_w), (lo_h, hi_h, lo_w, hi_w), (Hu, Wv))
    xp = np.pad(xd, ((0, 0), (1, 1), (0, 0), (lo_h, hi_h), (lo_w, hi_w)))
    v = sliding_window_view(xp, (3, kh, kw), axis=(1, 3, 4))[:, :, :, :Hu, :Wv]
    out = np.ascontiguousarray(np.tensordot(v, wsub, axes=([2, 5, 6, 7], [1, 2, 3, 4])).transpose(0, 1, 4, 2, 3))

    def fn(g):
        dw = None
        if w.requires_grad:
            dw = np.zeros_like(wd)
            dw[:, :, :, sh_h, sh_w] = np.tensordot(g, v, axes=([0, 1, 3, 4], [0, 1, 3, 4]))
        dx = None
        if x.requires_grad:
            cols = np.tensordot(g, wsub, axes=([2], [0]))  # (B, T, Hu, Wv, C, 3, kh, kw)
            dxp = np.zeros((B, T + 2, xp.shape[3], xp.shape[4], C), dtype=g.dtype)
            for a in range(3):
                for b in range(kh):
                    for c in range(kw):
                        dxp[:, a:a + T, b:b + Hu, c:c + Wv] += cols[..., a, b, c]
            dx = np.ascontiguousarray(dxp[:, 1:T + 1, lo_h:lo_h + H, lo_w:lo_w + W].transpose(0, 1, 4, 2, 3))
        return dx, dw

    return _result(out, [x, w], fn)


def _depthwise2d(x, w, bias):
    x, w = as_tensor(x), as_tensor(w)
    T, C, H, W = x.shape
    k = w.shape[-1]
    p = k // 2
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(xd)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + H, j:j + W] * wd[:, 0, i, j].reshape(1, C, 1, 1)
    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)

    def fn(g):
        dw = np.empty_like(wd)
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
        dx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                dw[:, 0, i, j] = np.einsum("tchw,tchw->c", g, xp[:, :, i:i + H, j:j + W])
                dx += gp[:, :, k - 1 - i:k - 1 - i + H, k - 1 - j:k - 1 - j + W] * wd[:, 0, i, j].reshape(1, C, 1, 1)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, inputs, fn)


def conv2d(x, w, bias=None, groups: int = 1) -> Tensor:
    """Per-frame same-size 2D cross-correlation, zero padded.

    ``x`` is (T, C, H, W); ``w`` is (Co, C // groups, k, k). Only ``groups=1``
    and depthwise (``groups == C == Co``) are supported.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (T,C,H,W) and (Co,Ci,k,k); got {x.shape}, {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError("conv2d kernel must be square")
    _odd(w.shape[2], "conv2d")
    C = x.shape[1]
    if groups == 1:
        if w.shape[1] != C:
            raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {w.shape[1]}")
        return conv3d(x, reshape(w, (w.shape[0], C, 1, w.shape[2], w.shape[3])), bias)
    if groups == C and w.shape[0] == C and w.shape[1] == 1:
        return _depthwise2d(x, w, bias)
    raise DimensionError(f"unsupported conv2d grouping: groups={groups}, kernel {w.shape}, channels {C}")


def conv1d_temporal(x, w, bias=None) -> Tensor:
    """Cross-correlation along T only, independently per pixel; ``w`` is (Co, C, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3:
        raise DimensionError(f"conv1d_temporal kernel must be (Co,C,k), got {w.shape}")
    return conv3d(x, reshape(w, (w.shape[0], w.shape[1], w.shape[2], 1, 1)), bias)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x expects (T,C,H,W), got {x.shape}")
    T, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(T, C, H, 2, W, 2).sum(axis=(3, 5)),))


def block_expand(x, block: tuple, extents: tuple) -> Tensor:
    """Nearest-expand per-block values (nT, C, nH, nW) to (T, C, H, W).

    Block ``(i, j, k)`` covers ``[i*bt, (i+1)*bt) x [j*bh, ...) x [k*bw, ...)``;
    edge blocks are clipped to ``extents``.
    """
    x = as_tensor(x)
    bt, bh, bw = block
    T, H, W = extents
    nT, C, nH, nW = x.shape
    if nT * bt < T or nH * bh < H or nW * bw < W:
        raise DimensionError(f"blocks {x.shape} x {block} do not cover {extents}")
    full = np.repeat(np.repeat(np.repeat(x.data, bt, axis=0), bh, axis=2), bw, axis=3)
    out = np.ascontiguousarray(full[:T, :, :H, :W])

    def fn(g):
        gp = np.zeros((nT * bt, C, nH * bh, nW * bw), dtype=g.dtype)
        gp[:T, :, :H, :W] = g
        return (gp.reshape(nT, bt, C, nH, bh, nW, bw).sum(axis=(1, 4, 6)),)

    return _result(out, (x,), fn)


# ----------------------------------------------------------------------------
# quantization and rate


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Exact round-half-away-from-zero (``floor(|v| + 0.5)`` misrounds 0.49999999999999994)."""
    r = np.trunc(v)
    return r + np.sign(v) * (np.abs(v - r) >= 0.5)


def ste_round(x, lo: float = -255, hi: float = 255) -> Tensor:
    """Round half away from zero and clamp; the gradient passes straight through."""
    x = as_tensor(x)
    xd = x.data
    out = np.clip(round_half_away(xd), lo, hi).astype(xd.dtype)
    return _result(out, (x,), lambda g: (g,))


def _phi(z):
    return np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def gaussian_bits(y, mu, sigma) -> Tensor:
    """Bits of ``y`` under a unit-bin Gaussian: ``-log2 max(P(y-.5 < X < y+.5), 2^-16)``.

    The gradient is that of the unfloored mass divided by the floored mass, so
    symbols deep in the tail still pull the distribution towards themselves.
    """
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    yd, md, sd = y.data, mu.data, sigma.data
    a = (yd - 0.5 - md) / sd
    b = (yd + 0.5 - md) / sd
    p = bin_mass(yd, md, sd)
    pf = np.maximum(p, PROB_FLOOR)
    out = -np.log2(pf)
    dtype = np.result_type(yd, md, sd)
    out = out.astype(dtype, copy=False)

    def fn(g):
        pa, pb = _phi(a), _phi(b)
        scale = -g / (pf * _LN2)
        dpdy = (pb - pa) / sd
        dpds = -(b * pb - a * pa) / sd
        return (scale * dpdy, -scale * dpdy, scale * dpds)

    return _result(out, (y, mu, sigma), fn)
