"""The ``.nvrl`` stream format.

Layout (all integers little-endian)::

    "NVRL"  version:u8  T:u16 H:u16 W:u16
    num_stages:u8  base_channels:u16  grid_channels:u8*N  kernel:u8
    temporal_kernel:u8  t_stride:u8  seed:u32  entropy_model:u8
    num_records:u16
    record*  (id:u16 ndim:u8 extents:u16*ndim  side info  length:u32  payload)
    crc32:u32 over every preceding byte

A record's id indexes the tensor catalogue implied by the header. Grid records
carry one half-precision step per (16^3 block, channel); every other tensor
carries its step and its factorised-model scale ``sigma_w``, both as halves.
"""

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ChecksumError, ContractError, StreamError
from .octree import aux_shape, context_param_shapes
from .quantizer import GRID_BLOCK, block_counts
from .synthesis import SynthesisConfig, param_shapes

MAGIC = b"NVRL"
VERSION = 1
ENTROPY_MODELS = ("octree", "ar")
CRC_BYTES = 4


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple
    kind: str  # "grid" (block-wise steps, context-coded) or "factorized"


def tensor_catalogue(config: SynthesisConfig, dims: tuple, entropy_model: str = "octree") -> "OrderedDict[str, TensorSpec]":
    """Every tensor a stream for ``config`` must hold, in id order."""
    if entropy_model not in ENTROPY_MODELS:
        raise ContractError(f"unknown entropy model {entropy_model!r}")
    specs = OrderedDict()

    def put(name, shape, kind="factorized"):
        specs[name] = TensorSpec(name, tuple(int(s) for s in shape), kind)

    for name, shape in param_shapes(config).items():
        put(name, shape)
    for name, shape in context_param_shapes(entropy_model).items():
        put(name, shape)
    for n, ext in enumerate(config.grid_extents(dims)):
        if ext is not None:
            put(f"aux{n}", aux_shape(ext[:3]))
    for n, ext in enumerate(config.grid_extents(dims)):
        if ext is not None:
            Tg, Hg, Wg, Cg = ext
            put(f"grid{n}", (Tg, Cg, Hg, Wg), "grid")
    return specs


def grid_step_shape(shape: tuple) -> tuple:
    T, C, H, W = shape
    nT, nH, nW = block_counts((T, H, W), (GRID_BLOCK,) * 3)
    return (nT, C, nH, nW)


@dataclass
class StreamHeader:
    dims: tuple
    config: SynthesisConfig
    entropy_model: str = "octree"
    version: int = VERSION

    def catalogue(self) -> "OrderedDict[str, TensorSpec]":
        return tensor_catalogue(self.config, self.dims, self.entropy_model)


@dataclass
class TensorRecord:
    name: str
    shape: tuple
    steps: np.ndarray           # half-representable; 0-d for factorised tensors
    payload: bytes
    sigma_w: Optional[float] = None

    def __eq__(self, other):
        return (isinstance(other, TensorRecord) and self.name == other.name and self.shape == other.shape
                and np.array_equal(self.steps, other.steps) and self.payload == other.payload
                and self.sigma_w == other.sigma_w)


@dataclass
class CodedStream:
    header: StreamHeader
    records: "OrderedDict[str, TensorRecord]" = field(default_factory=OrderedDict)

    def record(self, name: str) -> TensorRecord:
        try:
            return self.records[name]
        except KeyError:
            raise StreamError(f"stream has no tensor {name!r}") from None


# ----------------------------------------------------------------------------
# writing


def _u(fmt: str, *vals) -> bytes:
    try:
        return struct.pack("<" + fmt, *vals)
    except struct.error as e:
        raise ContractError(f"value does not fit the stream format: {e}") from None


def _half(values) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    h = v.astype("<f2")
    if not np.all(np.isfinite(h)) or not np.all(h > 0):
        raise ContractError("steps and scales must be positive and finite in half precision")
    return h.tobytes()


def _header_bytes(h: StreamHeader, num_records: int) -> bytes:
    c = h.config
    if h.entropy_model not in ENTROPY_MODELS:
        raise ContractError(f"unknown entropy model {h.entropy_model!r}")
    out = MAGIC + _u("B", h.version) + _u("3H", *h.dims)
    out += _u("BH", c.num_stages, c.base_channels) + _u(f"{c.num_stages}B", *c.grid_channels)
    out += _u("BBBIB", c.kernel, c.temporal_kernel, c.t_stride, c.seed, ENTROPY_MODELS.index(h.entropy_model))
    return out + _u("H", num_records)


def _record_bytes(idx: int, spec: TensorSpec, rec: TensorRecord) -> bytes:
    if tuple(rec.shape) != spec.shape:
        raise ContractError(f"{rec.name}: shape {rec.shape} but the config implies {spec.shape}")
    out = _u("HB", idx, len(spec.shape)) + _u(f"{len(spec.shape)}H", *spec.shape)
    if spec.kind == "grid":
        steps = np.asarray(rec.steps)
        if steps.shape != grid_step_shape(spec.shape):
            raise ContractError(f"{rec.name}: step field {steps.shape}, expected {grid_step_shape(spec.shape)}")
        out += _half(steps.ravel())
    else:
        if rec.sigma_w is None:
            raise ContractError(f"{rec.name}: factorised tensors need sigma_w")
        out += _half([float(rec.steps), rec.sigma_w])
    return out + _u("I", len(rec.payload)) + rec.payload


def write_stream(stream: CodedStream) -> bytes:
    """Serialise; every catalogue tensor must be present exactly once."""
    cat = stream.header.catalogue()
    extra = set(stream.records) - set(cat)
    if extra:
        raise ContractError(f"tensors not in the catalogue: {sorted(extra)}")
    missing = [n for n in cat if n not in stream.records]
    if missing:
        raise ContractError(f"missing tensors: {missing}")
    body = _header_bytes(stream.header, len(cat))
    for idx, (name, spec) in enumerate(cat.items()):
        body += _record_bytes(idx, spec, stream.records[name])
    return body + _u("I", zlib.crc32(body))


# ----------------------------------------------------------------------------
# reading


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise StreamError(f"truncated stream at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def halves(self, n: int) -> np.ndarray:
        v = np.frombuffer(self.take(2 * n), dtype="<f2").astype(np.float64)
        if not np.all(np.isfinite(v)) or not np.all(v > 0):
            raise StreamError("non-positive or non-finite step/scale in stream")
        return v


def read_stream(data: bytes) -> CodedStream:
    return _parse(data)[0]


def split_stream(data: bytes) -> tuple:
    """``(header, records, crc)`` section lengths in bytes; they sum to the file size."""
    return _parse(data)[1]


def _parse(data: bytes) -> tuple:
    data = bytes(data)
    if len(data) < len(MAGIC) + 1 + CRC_BYTES:
        raise StreamError("stream too short")
    if data[:4] != MAGIC:
        raise StreamError("bad magic")
    body_end = len(data) - CRC_BYTES
    (crc,) = struct.unpack("<I", data[body_end:])
    if zlib.crc32(data[:body_end]) != crc:
        raise ChecksumError("CRC mismatch")
    r = _Reader(data, body_end)
    r.take(4)
    (version,) = r.unpack("B")
    if version != VERSION:
        raise StreamError(f"unsupported stream version {version}")
    dims = r.unpack("3H")
    N, C = r.unpack("BH")
    gc = r.unpack(f"{N}B")
    k, kt, ts, seed, em = r.unpack("BBBIB")
    if em >= len(ENTROPY_MODELS):
        raise StreamError(f"unknown entropy model id {em}")
    try:
        cfg = SynthesisConfig(num_stages=N, base_channels=C, grid_channels=gc, kernel=k, temporal_kernel=kt,
                              t_stride=ts, seed=seed)
        header = StreamHeader(tuple(dims), cfg, ENTROPY_MODELS[em], version)
        cat = header.catalogue()
    except (ValueError, ArithmeticError) as e:
        raise StreamError(f"invalid header: {e}") from None
    (count,) = r.unpack("H")
    if count != len(cat):
        raise StreamError(f"stream holds {count} tensors, the header implies {len(cat)}")
    header_len = r.pos
    names = list(cat)
    records = OrderedDict()
    for _ in range(count):
        idx, ndim = r.unpack("HB")
        if idx >= len(names):
            raise StreamError(f"tensor id {idx} outside the catalogue")
        spec = cat[names[idx]]
        if spec.name in records:
            raise StreamError(f"duplicate tensor id {idx}")
        shape = r.unpack(f"{ndim}H")
        if tuple(shape) != spec.shape:
            raise StreamError(f"{spec.name}: extents {shape}, expected {spec.shape}")
        if spec.kind == "grid":
            steps = r.halves(int(np.prod(grid_step_shape(spec.shape)))).reshape(grid_step_shape(spec.shape))
            sigma_w = None
        else:
            step, sigma_w = r.halves(2)
            steps = np.float64(step)
        (length,) = r.unpack("I")
        records[spec.name] = TensorRecord(spec.name, spec.shape, steps, r.take(length), sigma_w)
    if r.pos != body_end:
        raise StreamError(f"{body_end - r.pos} unexpected bytes before the CRC")
    return CodedStream(header, records), (header_len, body_end - header_len, CRC_BYTES)


def bits_per_pixel(data: bytes, dims: tuple) -> float:
    T, H, W = dims
    return 8.0 * len(data) / (T * H * W)


def header_bpp(data: bytes) -> float:
    """Bits per pixel spent outside tensor records (fixed header plus CRC)."""
    stream, (head, _, crc) = _parse(data)
    T, H, W = stream.header.dims
    return 8.0 * (head + crc) / (T * H * W)
