"""Octree-scheduled conditional Gaussian entropy model for feature grids.

A grid ``[T, C, H, W]`` is coded in four steps. Step ``k`` covers the spatial
parity class ``SPATIAL_ORDER[k]`` at every frame, so each 2x2x2 sub-block
contributes two positions per step. Within a step, even channels (group A) are
coded first and odd channels (group B) second, which lets group B condition
on its already decoded even partner.

The context network is shared by every channel of every grid. Its input for
channel ``c`` is ``[z_c * m_c, m_c, z_p * m_p, m_p, aux]`` where ``p = c ^ 1``
is the partner channel and ``aux`` the upsampled block-wise auxiliary latent.
Two 3x3x3 conv layers (ReLU, 16 hidden channels) output ``mu`` and
``log sigma``.

Coding runs the network in fixed point: weights are snapped to multiples of
2^-16 and activations to 2^-12, so every convolution sum is an integer below
2^53 and float64 evaluates it exactly in any order. That is what makes the
incremental decoder, the parallel encoder and the reference ``predict``
agree bit for bit.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParameterError, StreamError
from .gaussian import (ALPHABET_BOUND, SIGMA_MAX, SIGMA_MIN, bin_probability, clamp_sigma, mu_code,
                       sigma_index)
from .rangecoder import (RangeDecoder, cdf_matrix, decode_indexed, encode_indexed, lattice_tables,
                         pack_chunks, read_varint, unpack_chunks, write_varint)

SPATIAL_ORDER = ((0, 0), (1, 1), (1, 0), (0, 1))
HIDDEN = 16
AUX_CHANNELS = 4
AUX_BLOCK = 16
SIGMA_INIT = 1.0
CONTEXT_INPUTS = 4 + AUX_CHANNELS

_W_ONE = 2.0 ** 16   # weight fixed-point unit
_A_ONE = 2.0 ** 12   # activation fixed-point unit
_ACC_ONE = _W_ONE * _A_ONE
_W_CLIP = 2.0 ** 20
_A_CLIP = 2.0 ** 22


# ----------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class MaskSchedule:
    """Four parity-class steps over a ``(T, H, W)`` lattice."""

    extents: tuple

    @property
    def num_steps(self) -> int:
        return 4

    def step_mask(self, k: int) -> np.ndarray:
        """Boolean ``(T, H, W)`` mask of the positions coded at step ``k`` (0-based)."""
        T, H, W = self.extents
        sh, sw = SPATIAL_ORDER[k]
        m = np.zeros((T, H, W), dtype=bool)
        m[:, sh::2, sw::2] = True
        return m

    def positions(self, k: int) -> np.ndarray:
        """Step-``k`` coordinates ``(n, 3)`` in raster order."""
        return np.argwhere(self.step_mask(k))

    def decoded_before(self, k: int) -> np.ndarray:
        m = np.zeros(self.extents, dtype=bool)
        for i in range(k):
            m |= self.step_mask(i)
        return m

    def nonempty_steps(self) -> list:
        return [k for k in range(4) if self.step_mask(k).any()]


def build_schedule(extents: tuple) -> MaskSchedule:
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 1:
        raise DimensionError(f"schedule extents must be three positive ints, got {extents}")
    return MaskSchedule(extents)


def channel_groups(channels: int) -> list:
    """Even channels then odd channels; a single group when there is one channel."""
    if channels == 1:
        return [np.array([0])]
    return [np.arange(0, channels, 2), np.arange(1, channels, 2)]


def coding_passes(channels: int) -> list:
    """``(step, group_index, channel_indices)`` in coding order."""
    groups = channel_groups(channels)
    return [(k, g, groups[g]) for k in range(4) for g in range(len(groups))]


def pass_mask(extents: tuple, channels: int, k: int, g: int) -> np.ndarray:
    """``[T, C, H, W]`` mask of everything decoded before pass ``(k, g)``."""
    sched = build_schedule(extents)
    before = sched.decoded_before(k)
    upto = before | sched.step_mask(k)
    m = np.empty((extents[0], channels) + tuple(extents[1:]), dtype=bool)
    for c in range(channels):
        done = channels > 1 and c % 2 == 0 and g == 1
        m[:, c] = upto if done else before
    return m


def _cells(extents: tuple) -> np.ndarray:
    sched = build_schedule(extents)
    return np.stack([sched.step_mask(k) for k in range(4)]).astype(np.float64)


# ----------------------------------------------------------------------------
# distributions and rates


@dataclass
class GaussianField:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = clamp_sigma(np.asarray(self.sigma, dtype=np.float64))


def estimate_rate(q, field: GaussianField) -> float:
    """``-sum log2 p(q)`` in bits under the (floored) unit-bin Gaussian."""
    q = np.asarray(q)
    if q.shape != field.mu.shape:
        raise DimensionError(f"symbols {q.shape} and field {field.mu.shape} differ")
    return float(-np.log2(bin_probability(field.mu, field.sigma, q)).sum())


def estimate_bpp(q, field: GaussianField, num_pixels: int) -> float:
    return estimate_rate(q, field) / num_pixels


# ----------------------------------------------------------------------------
# context model parameters


def context_param_shapes(kind: str = "octree") -> "OrderedDict[str, tuple]":
    if kind == "octree":
        return OrderedDict([("ctx.w1", (HIDDEN, CONTEXT_INPUTS, 3, 3, 3)), ("ctx.b1", (HIDDEN,)),
                            ("ctx.w2", (2, HIDDEN, 3, 3, 3)), ("ctx.b2", (2,))])
    if kind == "ar":
        return OrderedDict([("ar.w1z", (HIDDEN, 1, 3, 3, 3)), ("ar.w1a", (HIDDEN, AUX_CHANNELS, 3, 3, 3)),
                            ("ar.b1", (HIDDEN,)), ("ar.w2", (2, HIDDEN, 3, 3, 3)), ("ar.b2", (2,))])
    raise ContractError(f"unknown entropy model {kind!r}")


def init_context_params(kind: str, rng: np.random.Generator, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """Fan-in uniform first layer; zero final layer so every field starts at (0, SIGMA_INIT)."""
    out = OrderedDict()
    for name, shape in context_param_shapes(kind).items():
        if name.endswith((".w1", ".w1z", ".w1a")):
            fan = (CONTEXT_INPUTS if kind == "octree" else 1 + AUX_CHANNELS) * 27
            out[name] = rng.uniform(-1, 1, shape).astype(dtype) / np.sqrt(fan).astype(dtype)
        else:
            out[name] = np.zeros(shape, dtype=dtype)
    return out


def aux_shape(extents: tuple) -> tuple:
    T, H, W = extents
    return (-(-T // AUX_BLOCK), AUX_CHANNELS, -(-H // AUX_BLOCK), -(-W // AUX_BLOCK))


def aux_upsample(aux, extents: tuple):
    return ad.block_expand(aux, (AUX_BLOCK,) * 3, extents)


def _sigma_from_log(logs):
    return np.clip(SIGMA_INIT * np.exp(logs), SIGMA_MIN, SIGMA_MAX)


# ----------------------------------------------------------------------------
# fixed-point evaluation


def _fx(x, one, clip):
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * one), -clip, clip)


def _requant(acc):
    """ReLU, then rescale an accumulator (units 2^-28) to activation units (2^-12)."""
    return np.minimum(np.floor(np.maximum(acc, 0.0) / _W_ONE + 0.5), _A_CLIP)


def _conv(x, w, phase=None):
    return ad._conv3d_data(x, w, phase)[0]


class _FixedContext:
    """Context network weights in fixed point, split by input role."""

    def __init__(self, params: dict):
        w1 = _fx(params["ctx.w1"], _W_ONE, _W_CLIP)
        self.w1 = w1
        self.w_val = np.concatenate([w1[:, 0:1], w1[:, 2:3]], axis=0)
        self.w_mask = np.concatenate([w1[:, 1:2], w1[:, 3:4]], axis=0)
        self.w_aux = np.ascontiguousarray(w1[:, 4:])
        self.b1 = _fx(params["ctx.b1"], _ACC_ONE, 2.0 ** 50)
        self.w2 = _fx(params["ctx.w2"], _W_ONE, _W_CLIP)
        self.b2 = _fx(params["ctx.b2"], _ACC_ONE, 2.0 ** 50)

    def base(self, aux_up: np.ndarray) -> np.ndarray:
        """Aux branch plus bias, ``[T, 16, H, W]``."""
        return _conv(_fx(aux_up, _A_ONE, _A_CLIP)[None], self.w_aux)[0] + self.b1.reshape(1, -1, 1, 1)

    def head(self, acc1: np.ndarray, phase=None) -> tuple:
        acc2 = _conv(_requant(acc1), self.w2, phase) + self.b2.reshape(1, 1, -1, 1, 1)
        out = acc2 / _ACC_ONE
        return out[:, :, 0], _sigma_from_log(out[:, :, 1])


def _check_grid_inputs(zhat, aux_up):
    if zhat.ndim != 4:
        raise DimensionError(f"grid must be [T, C, H, W], got {zhat.shape}")
    T, _, H, W = zhat.shape
    if aux_up.shape != (T, AUX_CHANNELS, H, W):
        raise DimensionError(f"aux must be {(T, AUX_CHANNELS, H, W)}, got {aux_up.shape}")


def predict(params: dict, zhat, mask, aux_up, step: int, group: int = 0) -> GaussianField:
    """Reference context-model evaluation for pass ``(step, group)``.

    ``zhat`` holds dequantised grid values ``[T, C, H, W]``; entries outside
    ``mask`` are ignored (zeroed). ``mask`` must equal the set decoded before
    the pass. Returns ``(mu, sigma)`` at every position; callers consume only
    the positions coded in this pass.
    """
    zhat = np.asarray(zhat, dtype=np.float64)
    aux_up = np.asarray(aux_up, dtype=np.float64)
    _check_grid_inputs(zhat, aux_up)
    T, C, H, W = zhat.shape
    mask = np.asarray(mask, dtype=bool)
    if not 0 <= step < 4 or not 0 <= group < len(channel_groups(C)):
        raise ContractError(f"no pass ({step}, {group}) for {C} channels")
    if mask.shape != zhat.shape or not np.array_equal(mask, pass_mask((T, H, W), C, step, group)):
        raise ContractError("mask does not match the positions decoded before this pass")
    fc = _FixedContext(params)
    m = mask.astype(np.float64)
    zfx = _fx(zhat, _A_ONE, _A_CLIP) * m
    auxfx = _fx(aux_up, _A_ONE, _A_CLIP)
    partner = np.array([c ^ 1 if (c ^ 1) < C else -1 for c in range(C)])
    inp = np.zeros((C, T, CONTEXT_INPUTS, H, W))
    for c in range(C):
        inp[c, :, 0] = zfx[:, c]
        inp[c, :, 1] = m[:, c] * _A_ONE
        if partner[c] >= 0:
            inp[c, :, 2] = zfx[:, partner[c]]
            inp[c, :, 3] = m[:, partner[c]] * _A_ONE
        inp[c, :, 4:] = auxfx
    acc1 = _conv(inp, fc.w1) + fc.b1.reshape(1, 1, -1, 1, 1)
    mu, sigma = fc.head(acc1)
    return GaussianField(mu.transpose(1, 0, 2, 3), sigma.transpose(1, 0, 2, 3))


class PassRunner:
    """Incremental fixed-point context evaluation shared by encoder and decoder.

    Layer-1 pre-activations are linear in the revealed cells, so each pass
    adds the convolution of the newly decoded cell to running accumulators
    instead of re-running the network on the whole masked grid.
    """

    def __init__(self, params: dict, extents: tuple, channels: int, aux_up, step_values):
        T, H, W = extents
        self.extents, self.channels = (T, H, W), channels
        aux_up = np.asarray(aux_up, dtype=np.float64)
        _check_grid_inputs(np.zeros((T, channels, H, W)), aux_up)
        self.fc = _FixedContext(params)
        self.steps = np.broadcast_to(np.asarray(step_values, dtype=np.float64), (T, channels, H, W))
        self.passes = coding_passes(channels)
        self.base = self.fc.base(aux_up)
        cells = _cells((T, H, W))
        self.mask_terms = _conv(cells[:, :, None] * _A_ONE, self.fc.w_mask)
        self.acc_own = np.zeros((channels, T, HIDDEN, H, W))
        self.acc_partner = np.zeros((channels, T, HIDDEN, H, W))
        self.q = np.zeros((T, channels, H, W), dtype=np.int32)
        self.zfx = np.zeros((T, channels, H, W))
        self.done = 0

    def context_state(self) -> tuple:
        """Everything the next prediction reads (for lockstep comparisons)."""
        return self.zfx.copy(), self.acc_own.copy(), self.acc_partner.copy()

    def field(self, j: int) -> tuple:
        """``(mu, sigma)`` for pass ``j`` shaped ``[n_channels, T, Hk, Wk]``."""
        if j != self.done:
            raise ContractError(f"pass {j} requested but {self.done} passes are decoded")
        k, _, chs = self.passes[j]
        acc1 = self.base[None] + self.acc_own[chs] + self.acc_partner[chs]
        return self.fc.head(acc1, SPATIAL_ORDER[k])

    def commit(self, j: int, symbols: np.ndarray) -> None:
        k, _, chs = self.passes[j]
        sh, sw = SPATIAL_ORDER[k]
        T, H, W = self.extents
        sig = np.zeros((len(chs), T, 1, H, W))
        for n, c in enumerate(chs):
            self.q[:, c, sh::2, sw::2] = symbols[n]
            val = _fx(symbols[n] * self.steps[:, c, sh::2, sw::2], _A_ONE, _A_CLIP)
            self.zfx[:, c, sh::2, sw::2] = val
            sig[n, :, 0, sh::2, sw::2] = val
        contrib = _conv(sig, self.fc.w_val) + self.mask_terms[k][None]
        for n, c in enumerate(chs):
            self.acc_own[c] += contrib[n, :, :HIDDEN]
            p = c ^ 1
            if p < self.channels:
                self.acc_partner[p] += contrib[n, :, HIDDEN:]
        self.done += 1

    def class_symbols(self, q: np.ndarray, j: int) -> np.ndarray:
        k, _, chs = self.passes[j]
        sh, sw = SPATIAL_ORDER[k]
        return np.ascontiguousarray(q[:, chs, sh::2, sw::2].transpose(1, 0, 2, 3))


def _bound(q) -> int:
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise ContractError("symbols must be integers")
    a = int(np.abs(q).max()) if q.size else 0
    if a > ALPHABET_BOUND:
        raise ContractError(f"symbol magnitude {a} exceeds alphabet bound {ALPHABET_BOUND}")
    return a


def grid_field(params: dict, q, step_values, aux_up) -> GaussianField:
    """The exact ``(mu, sigma)`` the coder uses for every symbol of ``q``."""
    q = np.asarray(q)
    T, C, H, W = q.shape
    run = PassRunner(params, (T, H, W), C, aux_up, step_values)
    mu, sigma = np.zeros(q.shape), np.ones(q.shape)
    for j, (k, _, chs) in enumerate(run.passes):
        m, s = run.field(j)
        sh, sw = SPATIAL_ORDER[k]
        for n, c in enumerate(chs):
            mu[:, c, sh::2, sw::2], sigma[:, c, sh::2, sw::2] = m[n], s[n]
        run.commit(j, run.class_symbols(q, j))
    return GaussianField(mu, sigma)


def _code_pass(symbols, mu, sigma, bound) -> bytes:
    if symbols.size == 0:
        return b""
    matrix, rows = lattice_tables(mu, sigma, bound)
    return encode_indexed(symbols.ravel().astype(np.int64) + bound, rows, matrix)


def _decode_pass(body, mu, sigma, bound) -> np.ndarray:
    if mu.size == 0:
        if body:
            raise StreamError("data in an empty pass")
        return np.zeros(mu.shape, dtype=np.int32)
    matrix, rows = lattice_tables(mu, sigma, bound)
    return (decode_indexed(body, rows, matrix) - bound).astype(np.int32).reshape(mu.shape)


def encode_grid(q, step_values, params: dict, aux_up) -> bytes:
    """Payload ``varint(A) + per pass (varint length + range-coded body)``.

    ``A = max |q|`` bounds the alphabet; ``A = 0`` needs no passes at all.
    """
    q = np.asarray(q)
    if q.ndim != 4:
        raise DimensionError(f"grid must be [T, C, H, W], got {q.shape}")
    bound = _bound(q)
    if bound == 0:
        return write_varint(0)
    T, C, H, W = q.shape
    run = PassRunner(params, (T, H, W), C, aux_up, step_values)
    bodies = []
    for j in range(len(run.passes)):
        mu, sigma = run.field(j)
        syms = run.class_symbols(q, j)
        bodies.append(_code_pass(syms, mu, sigma, bound))
        run.commit(j, syms)
    return write_varint(bound) + pack_chunks(bodies)


def decode_grid(payload: bytes, step_values, params: dict, aux_up, extents: tuple, lockstep=None) -> np.ndarray:
    """Inverse of :func:`encode_grid`; ``extents = (T, H, W, C)``.

    ``lockstep(j, runner)`` is called before each pass is predicted.
    """
    T, H, W, C = extents
    bound, pos = read_varint(payload, 0)
    if bound > ALPHABET_BOUND:
        raise StreamError(f"alphabet bound {bound} exceeds {ALPHABET_BOUND}")
    if bound == 0:
        if pos != len(payload):
            raise StreamError("stray bytes after an all-zero grid")
        return np.zeros((T, C, H, W), dtype=np.int32)
    run = PassRunner(params, (T, H, W), C, aux_up, step_values)
    bodies = unpack_chunks(payload, pos, len(run.passes))
    for j in range(len(run.passes)):
        if lockstep is not None:
            lockstep(j, run)
        mu, sigma = run.field(j)
        run.commit(j, _decode_pass(bodies[j], mu, sigma, bound))
    return run.q


# ----------------------------------------------------------------------------
# factorised model for weights and auxiliary latents


def _check_sigma_w(sigma_w: float) -> None:
    if not np.isfinite(sigma_w) or sigma_w <= 0:
        raise ParameterError(f"sigma_w must be positive, got {sigma_w}")


def encode_weights(q, sigma_w: float) -> bytes:
    """Zero-mean Gaussian with scale ``sigma_w`` for every symbol: ``varint(A) + body``."""
    _check_sigma_w(sigma_w)
    q = np.asarray(q)
    bound = _bound(q)
    if bound == 0:
        return write_varint(0)
    matrix = cdf_matrix(np.zeros(1, dtype=np.int64), sigma_index(np.array([sigma_w])), bound)
    body = encode_indexed(q.ravel().astype(np.int64) + bound, np.zeros(q.size, dtype=np.int64), matrix)
    return write_varint(bound) + body


def decode_weights(payload: bytes, sigma_w: float, shape: tuple) -> np.ndarray:
    _check_sigma_w(sigma_w)
    bound, pos = read_varint(payload, 0)
    if bound > ALPHABET_BOUND:
        raise StreamError(f"alphabet bound {bound} exceeds {ALPHABET_BOUND}")
    n = int(np.prod(shape))
    if bound == 0:
        if pos != len(payload):
            raise StreamError("stray bytes after an all-zero tensor")
        return np.zeros(shape, dtype=np.int32)
    matrix = cdf_matrix(np.zeros(1, dtype=np.int64), sigma_index(np.array([sigma_w])), bound)
    out = decode_indexed(payload[pos:], np.zeros(n, dtype=np.int64), matrix) - bound
    return out.astype(np.int32).reshape(shape)


def weight_rate(q, sigma_w: float) -> float:
    q = np.asarray(q)
    return estimate_rate(q, GaussianField(np.zeros(q.shape), np.full(q.shape, sigma_w)))


# ----------------------------------------------------------------------------
# autoregressive reference


def _raster_masks() -> tuple:
    order = np.arange(27).reshape(3, 3, 3)
    return order < 13, order <= 13


MASK_A, MASK_B = _raster_masks()


class _FixedAR:
    def __init__(self, params: dict):
        self.w1z = _fx(params["ar.w1z"], _W_ONE, _W_CLIP) * MASK_A
        self.w1a = _fx(params["ar.w1a"], _W_ONE, _W_CLIP)
        self.b1 = _fx(params["ar.b1"], _ACC_ONE, 2.0 ** 50)
        self.w2 = _fx(params["ar.w2"], _W_ONE, _W_CLIP) * MASK_B
        self.b2 = _fx(params["ar.b2"], _ACC_ONE, 2.0 ** 50)

    def base(self, aux_up):
        return _conv(_fx(aux_up, _A_ONE, _A_CLIP)[None], self.w1a)[0] + self.b1.reshape(1, -1, 1, 1)


def ar_field(params: dict, q, step_values, aux_up) -> GaussianField:
    """Parallel (teacher-forced) evaluation of the raster-order model."""
    q = np.asarray(q)
    T, C, H, W = q.shape
    _check_grid_inputs(np.zeros(q.shape), np.asarray(aux_up))
    fa = _FixedAR(params)
    zfx = _fx(q * np.broadcast_to(step_values, q.shape), _A_ONE, _A_CLIP)
    acc1 = _conv(zfx.transpose(1, 0, 2, 3)[:, :, None], fa.w1z) + fa.base(aux_up)[None]
    acc2 = _conv(_requant(acc1), fa.w2) + fa.b2.reshape(1, 1, -1, 1, 1)
    out = acc2 / _ACC_ONE
    return GaussianField(out[:, :, 0].transpose(1, 0, 2, 3), _sigma_from_log(out[:, :, 1]).transpose(1, 0, 2, 3))


def encode_grid_autoregressive(q, step_values, params: dict, aux_up) -> bytes:
    """Raster order per channel (channel-major): ``varint(A) + body``."""
    q = np.asarray(q)
    bound = _bound(q)
    if bound == 0:
        return write_varint(0)
    f = ar_field(params, q, step_values, aux_up)
    order = (1, 0, 2, 3)
    return write_varint(bound) + _code_pass(q.transpose(order), f.mu.transpose(order), f.sigma.transpose(order), bound)


def decode_grid_autoregressive(payload: bytes, step_values, params: dict, aux_up, extents: tuple) -> np.ndarray:
    """Sequential decode, one position per coding step."""
    T, H, W, C = extents
    bound, pos = read_varint(payload, 0)
    if bound > ALPHABET_BOUND:
        raise StreamError(f"alphabet bound {bound} exceeds {ALPHABET_BOUND}")
    q = np.zeros((T, C, H, W), dtype=np.int32)
    if bound == 0:
        if pos != len(payload):
            raise StreamError("stray bytes after an all-zero grid")
        return q
    fa = _FixedAR(params)
    steps = np.broadcast_to(np.asarray(step_values, dtype=np.float64), q.shape)
    base = fa.base(np.asarray(aux_up, dtype=np.float64)).transpose(0, 2, 3, 1)
    w1 = fa.w1z[:, 0][:, MASK_A]                                   # (16, 13)
    w2 = fa.w2.transpose(0, 2, 3, 4, 1)[:, MASK_B].reshape(2, -1)   # (2, 14 * 16)
    b2 = fa.b2
    idx_a, idx_b = np.flatnonzero(MASK_A), np.flatnonzero(MASK_B)
    dec = RangeDecoder(payload[pos:])
    tables = {}
    for c in range(C):
        zpad = np.zeros((T + 2, H + 2, W + 2))
        hpad = np.zeros((T + 2, H + 2, W + 2, HIDDEN))
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    zn = zpad[t:t + 3, h:h + 3, w:w + 3].reshape(27)[idx_a]
                    hq = _requant(base[t, h, w] + w1 @ zn)
                    hpad[t + 1, h + 1, w + 1] = hq
                    out = (w2 @ hpad[t:t + 3, h:h + 3, w:w + 3].reshape(27, HIDDEN)[idx_b].ravel() + b2) / _ACC_ONE
                    key = (int(mu_code(out[0], bound)), int(sigma_index(_sigma_from_log(out[1]))))
                    row = tables.get(key)
                    if row is None:
                        row = tables[key] = cdf_matrix(np.array([key[0]]), np.array([key[1]]), bound)[0]
                    s = dec.decode(row) - bound
                    q[t, c, h, w] = s
                    zpad[t + 1, h + 1, w + 1] = _fx(s * steps[t, c, h, w], _A_ONE, _A_CLIP)
    dec.finish()
    return q


# ----------------------------------------------------------------------------
# differentiable training-time rates


def _lattice(n: int, p: int) -> int:
    return len(range(p, n, 2))


def _swap_pairs(t, C: int):
    """Channel ``c`` (leading axis) receives the value of channel ``c ^ 1``; zero when absent."""
    if C % 2:
        t = ad.concat([t, np.zeros((1,) + t.shape[1:], dtype=t.dtype)], axis=0)
    n = t.shape[0]
    swapped = ad.reshape(ad.getitem(ad.reshape(t, (n // 2, 2) + t.shape[1:]), (slice(None), slice(None, None, -1))),
                         t.shape)
    return ad.getitem(swapped, slice(0, C)) if C % 2 else swapped


def octree_rate_bits(params: dict, xhat, y, aux_up):
    """Differentiable bits of symbols ``y`` (``[T, C, H, W]``) under the octree model.

    ``xhat`` are the dequantised values fed to the context network. Every
    full-resolution conv is split into parity-lattice terms, so step ``k`` reuses
    the layer-1 contributions of the cells decoded before it and each tap is
    evaluated only where it connects two lattices.
    """
    xhat, y, aux_up = ad.as_tensor(xhat), ad.as_tensor(y), ad.as_tensor(aux_up)
    T, C, H, W = xhat.shape
    dtype = xhat.dtype
    w1 = ad.as_tensor(params["ctx.w1"])
    w_val = ad.concat([w1[:, 0:1], w1[:, 2:3]], axis=0)
    w_mask = ad.concat([w1[:, 1:2], w1[:, 3:4]], axis=0)
    base = ad.conv3d(aux_up, w1[:, 4:], params["ctx.b1"])                   # (T, 16, H, W)
    xc = ad.reshape(ad.transpose(xhat, (1, 0, 2, 3)), (C, T, 1, H, W))
    yc = ad.transpose(y, (1, 0, 2, 3))
    cells = [p for p in SPATIAL_ORDER if p[0] < H and p[1] < W]
    size = {p: (_lattice(H, p[0]), _lattice(W, p[1])) for p in cells}
    even = ((np.arange(C) % 2) == 0).astype(dtype).reshape(C, 1, 1, 1, 1)

    # contrib[s][r]: layer-1 pre-activation at parity r from the samples of cell s (own | partner halves)
    contrib = []
    for s in cells:
        xs = ad.getitem(xc, (Ellipsis, slice(s[0], None, 2), slice(s[1], None, 2)))
        ones = np.ones((1, T, 1) + size[s], dtype=dtype)
        contrib.append({r: ad.add(ad.conv3d_polyphase(xs, w_val, r, s, size[r]),
                                  ad.conv3d_polyphase(ones, w_mask, r, s, size[r])) for r in cells})
    base_r = {r: ad.reshape(ad.getitem(base, (Ellipsis, slice(r[0], None, 2), slice(r[1], None, 2))),
                            (1, T, HIDDEN) + size[r]) for r in cells}

    bits = None
    prefix = {r: None for r in cells}
    for k, sk in enumerate(cells):
        out = None
        for r in cells:
            pre = base_r[r]
            if prefix[r] is not None:
                pre = ad.add(pre, prefix[r][:, :, :HIDDEN])
            if C > 1:
                part = ad.mul(contrib[k][r][:, :, HIDDEN:], even)
                if prefix[r] is not None:
                    part = ad.add(part, prefix[r][:, :, HIDDEN:])
                pre = ad.add(pre, _swap_pairs(part, C))
            term = ad.conv3d_polyphase(ad.relu(pre), params["ctx.w2"], sk, r, size[sk])
            out = term if out is None else ad.add(out, term)
        for r in cells if k + 1 < len(cells) else ():
            prefix[r] = contrib[k][r] if prefix[r] is None else ad.add(prefix[r], contrib[k][r])
        out = ad.add(out, ad.reshape(ad.as_tensor(params["ctx.b2"]), (1, 1, 2, 1, 1)))
        sigma = ad.clamp(ad.mul(ad.exp(out[:, :, 1]), SIGMA_INIT), SIGMA_MIN, SIGMA_MAX)
        b = ad.sum(ad.gaussian_bits(yc[:, :, sk[0]::2, sk[1]::2], out[:, :, 0], sigma))
        bits = b if bits is None else ad.add(bits, b)
    return bits


def ar_rate_bits(params: dict, xhat, y, aux_up):
    """Differentiable bits under the raster-order reference model (teacher forced)."""
    xhat, y, aux_up = ad.as_tensor(xhat), ad.as_tensor(y), ad.as_tensor(aux_up)
    T, C, H, W = xhat.shape
    dtype = xhat.dtype
    w1z = ad.mul(params["ar.w1z"], MASK_A.astype(dtype))
    w2 = ad.mul(params["ar.w2"], MASK_B.astype(dtype))
    xc = ad.reshape(ad.transpose(xhat, (1, 0, 2, 3)), (C, T, 1, H, W))
    base = ad.conv3d(aux_up, params["ar.w1a"], params["ar.b1"])
    hidden = ad.relu(ad.add(ad.conv3d(xc, w1z), ad.reshape(base, (1, T, HIDDEN, H, W))))
    out = ad.conv3d(hidden, w2, params["ar.b2"])
    sigma = ad.clamp(ad.mul(ad.exp(out[:, :, 1]), SIGMA_INIT), SIGMA_MIN, SIGMA_MAX)
    return ad.sum(ad.gaussian_bits(ad.transpose(y, (1, 0, 2, 3)), out[:, :, 0], sigma))


def factorized_rate_bits(y, sigma_w):
    """Differentiable bits of symbols ``y`` under ``N(0, sigma_w)``."""
    y = ad.as_tensor(y)
    return ad.sum(ad.gaussian_bits(y, np.zeros(1, dtype=y.dtype), sigma_w))
