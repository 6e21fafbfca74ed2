"""Uniform scalar quantisation with block-wise or per-tensor step sizes.

Grids are stored as ``[T, C, H, W]`` and get one step per (16x16x16 block,
channel); network weights and the auxiliary latent get a single step.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParameterError
from .gaussian import ALPHABET_BOUND

GRID_BLOCK = 16


def block_counts(extents: tuple, block: tuple) -> tuple:
    """Number of (edge-clipped) blocks along each axis."""
    return tuple(-(-e // b) for e, b in zip(extents, block))


def block_absmax(x, block: Optional[tuple]) -> np.ndarray:
    """``max |x|`` per step-field cell: one value, or one per (block, channel) of a ``[T, C, H, W]`` tensor."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    if block is None:
        return np.float64(a.max()) if a.size else np.float64(0.0)
    T, C, H, W = a.shape
    nT, nH, nW = block_counts((T, H, W), block)
    bt, bh, bw = block
    padded = np.zeros((nT * bt, C, nH * bh, nW * bw))
    padded[:T, :, :H, :W] = a
    return padded.reshape(nT, bt, C, nH, bh, nW, bw).max(axis=(1, 4, 6))


@dataclass
class StepField:
    """Positive step sizes tiling a tensor.

    ``block=None`` means one step for the whole tensor (``steps`` is 0-d).
    Otherwise the tensor is ``[T, C, H, W]`` and ``steps`` has shape
    ``[nT, C, nH, nW]``, one step per block of ``block = (bt, bh, bw)`` and
    channel.
    """

    steps: np.ndarray
    block: Optional[tuple] = None

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.block is not None:
            self.block = tuple(int(b) for b in self.block)

    @classmethod
    def uniform(cls, shape: tuple, step: float, block: Optional[tuple] = None) -> "StepField":
        if block is None:
            return cls(np.float64(step))
        T, C, H, W = shape
        nT, nH, nW = block_counts((T, H, W), block)
        return cls(np.full((nT, C, nH, nW), float(step)), block)

    def check(self, shape: tuple) -> None:
        if not np.all(self.steps > 0) or not np.all(np.isfinite(self.steps)):
            raise ParameterError("quantisation steps must be positive and finite")
        if self.block is None:
            if self.steps.ndim != 0:
                raise DimensionError("per-tensor step field must hold a single step")
            return
        if len(shape) != 4:
            raise DimensionError(f"block-wise steps need a [T, C, H, W] tensor, got {shape}")
        T, C, H, W = shape
        nT, nH, nW = block_counts((T, H, W), self.block)
        want = (nT, C, nH, nW)
        if self.steps.shape != want:
            raise DimensionError(f"step field {self.steps.shape} does not tile {shape} (need {want})")

    def expand(self, shape: tuple) -> np.ndarray:
        """Per-element steps broadcastable against a tensor of ``shape``."""
        self.check(shape)
        if self.block is None:
            return self.steps
        T, _, H, W = shape
        return ad.block_expand(self.steps, self.block, (T, H, W)).data

    def to_half(self) -> "StepField":
        """Steps rounded to IEEE half precision, as they are stored in a stream."""
        return StepField(self.steps.astype(np.float16).astype(np.float64), self.block)


def quantize(x, steps: StepField, bound: int = ALPHABET_BOUND, return_clamps: bool = False):
    """``round(x / step)`` half away from zero, clamped to ``[-bound, bound]``.

    With ``return_clamps`` the number of clamped elements is returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    v = x / steps.expand(x.shape)
    r = ad.round_half_away(v)
    clamps = int(np.count_nonzero(np.abs(r) > bound))
    q = np.clip(r, -bound, bound).astype(np.int32)
    return (q, clamps) if return_clamps else q


def dequantize(q, steps: StepField) -> np.ndarray:
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise ContractError("dequantize expects integer symbols")
    return q * steps.expand(q.shape)


def proxy_symbols(x, step, mode: str, rng: Optional[np.random.Generator] = None,
                  bound: int = ALPHABET_BOUND) -> tuple:
    """Differentiable quantisation surrogate returning ``(y, x_hat)``.

    ``y`` lives in symbol units (what the entropy model scores) and
    ``x_hat = y * step`` is the value the network sees. ``step`` is a Tensor or
    array already broadcast against ``x``.

    noise: ``x_hat = x + u * step`` with ``u ~ U[-0.5, 0.5]``.
    ste:   ``y = round(x / step)`` with an identity gradient.
    """
    x = ad.as_tensor(x)
    step = ad.as_tensor(step, like=x)
    if mode == "noise":
        if rng is None:
            raise ContractError("noise mode needs a random generator")
        u = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
        x_hat = ad.add(x, ad.mul(step, u))
        return ad.div(x_hat, step), x_hat
    if mode == "ste":
        y = ad.ste_round(ad.div(x, step), -bound, bound)
        return y, ad.mul(y, step)
    raise ContractError(f"unknown proxy mode {mode!r}")


def quant_proxy(x, steps: StepField, mode: str, rng: Optional[np.random.Generator] = None):
    """Differentiable stand-in for ``dequantize(quantize(x))`` used in training."""
    x = ad.as_tensor(x)
    return proxy_symbols(x, steps.expand(x.shape), mode, rng)[1]
