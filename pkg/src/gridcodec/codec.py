"""Model state <-> coded stream.

A :class:`ModelState` holds everything training produces: synthesis kernels,
entropy-model parameters, auxiliary latents and feature grids, plus their
quantisation steps and factorised-model scales. Encoding quantises each tensor
with half-precision steps and codes it; decoding returns the dequantised
state, from which :func:`reconstruct` renders the video. The trainer evaluates
through the same :func:`dequantized` path, so train-time quantised quality and
decoded quality coincide.
"""

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import octree
from .container import CodedStream, StreamHeader, TensorRecord, read_stream, tensor_catalogue, write_stream
from .errors import ContractError, DimensionError
from .gaussian import SIGMA_MAX, SIGMA_MIN
from .quantizer import GRID_BLOCK, StepField, dequantize, quantize
from .synthesis import SynthesisConfig, param_shapes, synthesize_video


@dataclass
class ModelState:
    config: SynthesisConfig
    dims: tuple
    tensors: "OrderedDict[str, np.ndarray]"       # every catalogue tensor by name
    steps: dict                                   # name -> StepField
    sigma_w: dict = field(default_factory=dict)   # factorised tensors: name -> scale in symbol units
    entropy_model: str = "octree"

    def catalogue(self):
        return tensor_catalogue(self.config, self.dims, self.entropy_model)

    def synthesis_params(self) -> OrderedDict:
        return OrderedDict((k, self.tensors[k]) for k in param_shapes(self.config))

    def context_params(self) -> OrderedDict:
        return OrderedDict((k, self.tensors[k]) for k in octree.context_param_shapes(self.entropy_model))

    def grids(self) -> OrderedDict:
        return OrderedDict((k, v) for k, v in self.tensors.items() if k.startswith("grid"))

    def check(self) -> None:
        cat = self.catalogue()
        if set(cat) != set(self.tensors):
            raise ContractError(f"tensor set differs from the catalogue: {sorted(set(cat) ^ set(self.tensors))}")
        for name, spec in cat.items():
            if tuple(self.tensors[name].shape) != spec.shape:
                raise DimensionError(f"{name}: {self.tensors[name].shape}, expected {spec.shape}")
            if name not in self.steps:
                raise ContractError(f"{name}: no quantisation step")
            self.steps[name].check(spec.shape)
            if spec.kind != "grid" and name not in self.sigma_w:
                raise ContractError(f"{name}: no sigma_w")


def default_steps(config: SynthesisConfig, dims: tuple, entropy_model: str = "octree",
                  grid_step: float = 2.0 ** -6, weight_step: float = 2.0 ** -10) -> tuple:
    """Initial ``(steps, sigma_w)`` for every catalogue tensor."""
    steps, sigma = {}, {}
    for name, spec in tensor_catalogue(config, dims, entropy_model).items():
        if spec.kind == "grid":
            steps[name] = StepField.uniform(spec.shape, grid_step, (GRID_BLOCK,) * 3)
        else:
            steps[name] = StepField(weight_step)
            sigma[name] = 1.0
    return steps, sigma


def half_sigma(s: float) -> float:
    return float(np.float16(np.clip(s, SIGMA_MIN, SIGMA_MAX)))


def quantized(state: ModelState) -> tuple:
    """``(symbols, half_steps, half_sigma_w)`` exactly as a stream stores them."""
    state.check()
    steps = {k: f.to_half() for k, f in state.steps.items()}
    sigma = {k: half_sigma(v) for k, v in state.sigma_w.items()}
    symbols = OrderedDict((k, quantize(v, steps[k])) for k, v in state.tensors.items())
    return symbols, steps, sigma


def _from_symbols(template: ModelState, symbols, steps, sigma, dtype=np.float32) -> ModelState:
    tensors = OrderedDict((k, dequantize(q, steps[k]).astype(dtype)) for k, q in symbols.items())
    return replace(template, tensors=tensors, steps=steps, sigma_w=sigma)


def dequantized(state: ModelState) -> ModelState:
    """The state a decoder reconstructs from ``encode(state)``."""
    symbols, steps, sigma = quantized(state)
    return _from_symbols(state, symbols, steps, sigma)


def _grid_coding_inputs(deq: ModelState, name: str, shape: tuple) -> tuple:
    n = name[len("grid"):]
    ctx = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in deq.context_params().items())
    T, C, H, W = shape
    aux_up = octree.aux_upsample(np.asarray(deq.tensors[f"aux{n}"], dtype=np.float64), (T, H, W)).data
    return ctx, aux_up, deq.steps[name].expand((T, C, H, W))


def encode(state: ModelState) -> bytes:
    symbols, steps, sigma = quantized(state)
    deq = _from_symbols(state, symbols, steps, sigma, np.float64)
    records = OrderedDict()
    for name, spec in state.catalogue().items():
        q = symbols[name]
        if spec.kind == "grid":
            ctx, aux_up, step_values = _grid_coding_inputs(deq, name, spec.shape)
            coder = octree.encode_grid if state.entropy_model == "octree" else octree.encode_grid_autoregressive
            payload = coder(q, step_values, ctx, aux_up)
            records[name] = TensorRecord(name, spec.shape, steps[name].steps, payload)
        else:
            payload = octree.encode_weights(q, sigma[name])
            records[name] = TensorRecord(name, spec.shape, steps[name].steps, payload, sigma[name])
    header = StreamHeader(tuple(state.dims), state.config, state.entropy_model)
    return write_stream(CodedStream(header, records))


def decode(data: bytes, dtype=np.float32) -> ModelState:
    """Parse and entropy-decode a stream into its dequantised state."""
    stream = read_stream(data)
    h = stream.header
    cat = h.catalogue()
    symbols, steps, sigma = OrderedDict(), {}, {}
    for name, spec in cat.items():
        rec = stream.record(name)
        if spec.kind != "grid":
            steps[name] = StepField(rec.steps)
            sigma[name] = rec.sigma_w
            symbols[name] = octree.decode_weights(rec.payload, rec.sigma_w, spec.shape)
    state = ModelState(h.config, tuple(h.dims), OrderedDict(), steps, sigma, h.entropy_model)
    deq64 = _from_symbols(state, symbols, steps, sigma, np.float64)
    for name, spec in cat.items():
        if spec.kind == "grid":
            rec = stream.record(name)
            steps[name] = StepField(rec.steps, (GRID_BLOCK,) * 3)
            ctx, aux_up, step_values = _grid_coding_inputs(deq64, name, spec.shape)
            T, C, H, W = spec.shape
            decoder = octree.decode_grid if h.entropy_model == "octree" else octree.decode_grid_autoregressive
            symbols[name] = decoder(rec.payload, step_values, ctx, aux_up, (T, H, W, C))
    symbols = OrderedDict((k, symbols[k]) for k in cat)
    return _from_symbols(state, symbols, steps, sigma, dtype)


def reconstruct(state: ModelState, batch: int = 4) -> np.ndarray:
    """Video ``(T, H, W, 3)`` in [0, 1] rendered from a (dequantised) state."""
    return synthesize_video(state.synthesis_params(), state.grids(), state.config, state.dims[0], batch)
