"""Integer range coder over 16-bit cumulative frequency tables.

The coder keeps a 32-bit ``low``/``range`` window, renormalises one byte at a
time so that ``range >= 2**24``, and propagates carries into bytes already
written. A flush writes the fewest bytes that pin a value inside the final
interval; the decoder reads zeros past the end, so trailing zero bytes are
dropped as well. Everything inside the coder is integer arithmetic.

The per-symbol loops are plain Python over numpy arrays and are compiled with
numba when it is importable.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, StreamError
from .gaussian import ALPHABET_BOUND, MU_SCALE, SIGMA_LEVELS, bin_mass, mu_code, sigma_index

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK = (1 << 32) - 1


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts ``cdf[0] = 0 < cdf[1] < ... < cdf[M] = 2**16``.

    Index ``i`` codes the symbol ``offset + i``.
    """

    offset: int
    cdf: np.ndarray

    @property
    def size(self) -> int:
        return len(self.cdf) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.cdf)

    def index_of(self, symbol: int) -> int:
        idx = int(symbol) - self.offset
        if not 0 <= idx < self.size:
            raise ContractError(f"symbol {symbol} outside alphabet [{self.offset}, {self.offset + self.size - 1}]")
        return idx


def _counts_from_probs(p: np.ndarray) -> np.ndarray:
    """Integer counts per row: >= 1 each, proportional to ``p``, rows summing to 2**16."""
    p = np.maximum(np.atleast_2d(p), 1e-300)
    n, m = p.shape
    if m > TOTAL:
        raise ContractError(f"alphabet of {m} symbols does not fit {PRECISION}-bit tables")
    share = p / p.sum(axis=1, keepdims=True) * (TOTAL - m)
    base = np.floor(share)
    counts = base.astype(np.int64) + 1
    short = TOTAL - counts.sum(axis=1)
    frac = share - base
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(n)[:, None]
    rank[rows, order] = np.arange(m)[None, :]
    counts += rank < short[:, None]
    return counts


def build_cdf(mu: float, sigma: float, alphabet: tuple = (-ALPHABET_BOUND, ALPHABET_BOUND)) -> CdfTable:
    """Quantised Gaussian table over the inclusive ``alphabet`` range.

    Counts follow the unit-bin Gaussian mass. The one-count minimum per symbol
    is the 2**-16 probability floor in integer form, so it is applied once here
    rather than on top of an already floored probability. Largest-remainder
    rounding makes the total exactly 2**16.
    """
    lo, hi = int(alphabet[0]), int(alphabet[1])
    q = np.arange(lo, hi + 1, dtype=np.float64)
    counts = _counts_from_probs(bin_mass(q, mu, sigma)[None, :])[0]
    return CdfTable(lo, np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))


def cdf_matrix(mu_codes: np.ndarray, sigma_idx: np.ndarray, bound: int) -> np.ndarray:
    """Tables for lattice parameters, one row per ``(mu_code, sigma_idx)`` pair.

    The alphabet is ``[-bound, bound]``; row ``r`` is the CDF for mean
    ``mu_codes[r] / 64`` and scale ``SIGMA_LEVELS[sigma_idx[r]]``.
    """
    q = np.arange(-bound, bound + 1, dtype=np.float64)[None, :]
    mu = (np.asarray(mu_codes, dtype=np.float64) / MU_SCALE)[:, None]
    sigma = SIGMA_LEVELS[np.asarray(sigma_idx)][:, None]
    counts = _counts_from_probs(bin_mass(q, mu, sigma))
    out = np.zeros((counts.shape[0], counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=out[:, 1:])
    return out


def lattice_tables(mu: np.ndarray, sigma: np.ndarray, bound: int) -> tuple:
    """Snap ``(mu, sigma)`` to the shared lattice and build the distinct tables.

    Returns ``(matrix, row_of_symbol)`` where ``matrix[row_of_symbol[i]]`` is
    the CDF for the i-th parameter pair.
    """
    mc = mu_code(np.ravel(mu), bound)
    si = sigma_index(np.ravel(sigma))
    key = (mc + MU_SCALE * bound) * len(SIGMA_LEVELS) + si
    uniq, inverse = np.unique(key, return_inverse=True)
    ucode = uniq // len(SIGMA_LEVELS) - MU_SCALE * bound
    usig = uniq % len(SIGMA_LEVELS)
    return cdf_matrix(ucode, usig, bound), inverse.reshape(-1)


# ----------------------------------------------------------------------------
# core loops


@njit(cache=True)
def _encode_core(c_lo, freq, out):
    low = 0
    rng = _MASK
    n = 0
    for i in range(c_lo.shape[0]):
        r = rng >> 16
        lo = c_lo[i]
        f = freq[i]
        low += r * lo
        if lo + f == TOTAL:
            rng -= r * lo
        else:
            rng = r * f
        if low > _MASK:
            low &= _MASK
            j = n - 1
            while out[j] == 255:
                out[j] = 0
                j -= 1
            out[j] += 1
        while rng < _TOP:
            out[n] = low >> 24
            n += 1
            low = (low << 8) & _MASK
            rng <<= 8
    # flush: shortest byte string whose zero extension lies in [low, low + rng)
    for nb in range(5):
        unit = 1 << (32 - 8 * nb)
        v = ((low + unit - 1) // unit) * unit
        if v < low + rng:
            if v > _MASK:
                v &= _MASK
                j = n - 1
                while out[j] == 255:
                    out[j] = 0
                    j -= 1
                out[j] += 1
            for k in range(nb):
                out[n] = (v >> (24 - 8 * k)) & 255
                n += 1
            break
    while n > 0 and out[n - 1] == 0:
        n -= 1
    return n


@njit(cache=True)
def _byte_at(data, pos):
    if pos < data.shape[0]:
        return data[pos]
    return 0


@njit(cache=True)
def _decoder_init(state, data):
    code = 0
    for i in range(4):
        code = (code << 8) | _byte_at(data, i)
    state[0] = code
    state[1] = _MASK
    state[2] = 4


@njit(cache=True)
def _decode_one(state, data, cdf):
    code = state[0]
    rng = state[1]
    pos = state[2]
    r = rng >> 16
    cnt = code // r
    if cnt >= TOTAL:
        cnt = TOTAL - 1
    lo_i = 0
    hi_i = cdf.shape[0] - 1
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) >> 1
        if cdf[mid] <= cnt:
            lo_i = mid
        else:
            hi_i = mid
    c_lo = cdf[lo_i]
    c_hi = cdf[lo_i + 1]
    code -= r * c_lo
    if c_hi == TOTAL:
        rng -= r * c_lo
    else:
        rng = r * (c_hi - c_lo)
    while rng < _TOP:
        code = ((code << 8) | _byte_at(data, pos)) & _MASK
        pos += 1
        rng <<= 8
    state[0] = code
    state[1] = rng
    state[2] = pos
    return lo_i


@njit(cache=True)
def _decode_rows(data, matrix, rows, out):
    state = np.zeros(3, dtype=np.int64)
    _decoder_init(state, data)
    if state[0] >= state[1]:
        return -1
    for i in range(rows.shape[0]):
        out[i] = _decode_one(state, data, matrix[rows[i]])
    return state[2]


def encode_indexed(symbol_idx: np.ndarray, rows: np.ndarray, matrix: np.ndarray) -> bytes:
    """Code table indices ``symbol_idx[i]`` under ``matrix[rows[i]]``."""
    symbol_idx = np.ascontiguousarray(symbol_idx, dtype=np.int64).reshape(-1)
    rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    m = matrix.shape[1] - 1
    if symbol_idx.size and (symbol_idx.min() < 0 or symbol_idx.max() >= m):
        raise ContractError("symbol outside table alphabet")
    c_lo = matrix[rows, symbol_idx]
    freq = matrix[rows, symbol_idx + 1] - c_lo
    out = np.zeros(2 * symbol_idx.size + 16, dtype=np.uint8)
    n = _encode_core(c_lo, freq, out)
    return out[:n].tobytes()


def decode_indexed(data: bytes, rows: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_indexed`; returns table indices."""
    rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    out = np.zeros(rows.size, dtype=np.int64)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    pos = _decode_rows(buf, np.ascontiguousarray(matrix, dtype=np.int64), rows, out)
    if pos < 0:
        raise StreamError("range decoder state out of bounds: corrupt payload")
    if pos < buf.size:
        raise StreamError(f"{buf.size - pos} unread bytes after the last symbol")
    return out


class RangeDecoder:
    """Symbol-at-a-time decoder for sequential (autoregressive) coding."""

    def __init__(self, data: bytes):
        self._buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self._state = np.zeros(3, dtype=np.int64)
        _decoder_init(self._state, self._buf)
        if self._state[0] >= self._state[1]:
            raise StreamError("range decoder state out of bounds: corrupt payload")

    def decode(self, cdf: np.ndarray) -> int:
        return int(_decode_one(self._state, self._buf, cdf))

    def finish(self) -> None:
        """Check that the stream held nothing beyond the decoded symbols."""
        if self._state[2] < self._buf.size:
            raise StreamError(f"{self._buf.size - self._state[2]} unread bytes after the last symbol")


def encode_symbols(symbols: Sequence[int], tables: Sequence[CdfTable]) -> bytes:
    """Range-code ``symbols[i]`` with ``tables[i]``; deterministic bytes."""
    if len(symbols) != len(tables):
        raise ContractError("need exactly one table per symbol")
    c_lo = np.empty(len(symbols), dtype=np.int64)
    freq = np.empty(len(symbols), dtype=np.int64)
    for i, (s, t) in enumerate(zip(symbols, tables)):
        idx = t.index_of(s)
        c_lo[i] = t.cdf[idx]
        freq[i] = t.cdf[idx + 1] - t.cdf[idx]
    out = np.zeros(2 * len(symbols) + 16, dtype=np.uint8)
    n = _encode_core(c_lo, freq, out)
    return out[:n].tobytes()


def decode_symbols(data: bytes, tables: Sequence[CdfTable]) -> list:
    """Recover the symbols coded by :func:`encode_symbols` with the same tables."""
    dec = RangeDecoder(data)
    out = [t.offset + dec.decode(t.cdf) for t in tables]
    dec.finish()
    return out


def ideal_bits(symbols: Sequence[int], tables: Sequence[CdfTable]) -> float:
    """Information content of ``symbols`` under the integer tables."""
    total = 0.0
    for s, t in zip(symbols, tables):
        i = t.index_of(s)
        total -= np.log2((t.cdf[i + 1] - t.cdf[i]) / TOTAL)
    return float(total)


# ----------------------------------------------------------------------------
# payload framing: unsigned LEB128 varints and length-prefixed chunks


def write_varint(value: int) -> bytes:
    if value < 0:
        raise ContractError("varints are unsigned")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def read_varint(data: bytes, pos: int) -> tuple:
    """Return ``(value, new_pos)``; raises StreamError on a truncated varint."""
    value = shift = 0
    while True:
        if pos >= len(data):
            raise StreamError("truncated varint")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 35:
            raise StreamError("varint too long")


def pack_chunks(chunks: Sequence[bytes]) -> bytes:
    return b"".join(write_varint(len(c)) + c for c in chunks)


def unpack_chunks(data: bytes, pos: int, count: int) -> list:
    """Split ``count`` length-prefixed chunks that must exactly fill ``data[pos:]``."""
    out = []
    for _ in range(count):
        n, pos = read_varint(data, pos)
        if pos + n > len(data):
            raise StreamError("chunk runs past the end of the payload")
        out.append(bytes(data[pos:pos + n]))
        pos += n
    if pos != len(data):
        raise StreamError(f"{len(data) - pos} stray bytes after the last chunk")
    return out
