"""Two-stage rate-distortion overfitting of one video.

Every stored tensor (synthesis kernels, context-model kernels, auxiliary
latents, feature grids) is trained together with its log quantisation step
and, for factorised tensors, its log scale ``sigma_w``. Stage 1 replaces
quantisation by additive uniform noise; stage 2 freezes the steps at their
half-precision values and uses rounding with a straight-through gradient.
The loss is ``R_bpp + lambda * MSE`` where ``R`` covers every coded tensor.
"""

import sys
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import codec, octree
from .container import grid_step_shape, tensor_catalogue
from .data import check_video
from .errors import ClosureError, ConfigError, DimensionError, TrainingDiverged
from .gaussian import SIGMA_MAX, SIGMA_MIN
from .metrics import RDPoint, psnr
from .gaussian import ALPHABET_BOUND
from .quantizer import GRID_BLOCK, StepField, block_absmax, proxy_symbols
from .synthesis import SynthesisConfig, build_model, count_macs, forward, param_shapes

LOG_SIGMA_BOUNDS = (float(np.log(SIGMA_MIN)), float(np.log(SIGMA_MAX)))


@dataclass
class TrainConfig:
    lam: float = 1000.0
    stage1_steps: int = 2000
    stage2_steps: int = 200
    batch: int = 4
    lr_grid: float = 1e-2
    lr_kernel: float = 1e-3
    lr_context: float = 1e-2
    lr_step: float = 5e-2
    stage2_lr_scale: float = 0.1
    seed: int = 0
    entropy_model: str = "octree"
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    verbose: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ConfigError("both stages need at least one step")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if min(self.lr_grid, self.lr_kernel, self.lr_context, self.lr_step, self.stage2_lr_scale) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.entropy_model not in ("octree", "ar"):
            raise ConfigError(f"unknown entropy model {self.entropy_model!r}")


@dataclass
class StepRecord:
    step: int
    stage: int
    loss: float
    distortion: float
    rate_bpp: float

    def line(self) -> str:
        return (f"step={self.step} stage={self.stage} loss={self.loss:.6g} D={self.distortion:.6g} "
                f"R_bpp={self.rate_bpp:.6g}")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    final: Optional[RDPoint] = None
    quantized_psnr: Optional[float] = None
    estimated_bpp: Optional[float] = None

    def stage_losses(self, stage: int) -> list:
        return [r.loss for r in self.records if r.stage == stage]


@dataclass
class TrainResult:
    state: codec.ModelState
    stream: bytes
    log: TrainLog


def rd_loss(recon, target, rate_bits, lam: float, num_pixels: int):
    """``R_bpp + lam * MSE``; ``recon`` and ``target`` must share a shape."""
    recon, target = ad.as_tensor(recon), ad.as_tensor(target)
    if recon.shape != target.shape:
        raise DimensionError(f"reconstruction {recon.shape} and target {target.shape} differ")
    d = ad.mse_loss(recon, target)
    r = ad.mul(ad.as_tensor(rate_bits), 1.0 / num_pixels)
    return ad.add(r, ad.mul(d, float(lam))), d, r


class Adam:
    def __init__(self, lrs: dict, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lrs, self.b1, self.b2, self.eps = lrs, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def reset(self):
        self.m, self.v, self.t = {}, {}, 0

    def step(self, values: dict, grads: dict, scale: float) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            upd = self.lrs[k] * scale * (m / c1) / (np.sqrt(v / c2) + self.eps)
            values[k] = (values[k] - upd).astype(values[k].dtype)


def cosine(t: int, total: int) -> float:
    return 0.5 * (1.0 + np.cos(np.pi * t / total))


def _initial_log_step(x: np.ndarray) -> float:
    peak = float(np.abs(x).max())
    return float(np.log(peak / 64.0)) if peak > 0 else float(np.log(2.0 ** -6))


class _Problem:
    """Trainable variables and the differentiable loss."""

    def __init__(self, video: np.ndarray, cfg: TrainConfig):
        self.video = video.astype(np.float32)
        self.cfg = cfg
        T, H, W, _ = video.shape
        self.dims = (T, H, W)
        self.num_pixels = T * H * W
        scfg = cfg.synthesis
        self.catalogue = tensor_catalogue(scfg, self.dims, cfg.entropy_model)
        params, grids = build_model(scfg, self.dims)
        rng = np.random.default_rng(scfg.seed + 1)
        ctx = octree.init_context_params(cfg.entropy_model, rng)
        self.values, self.lrs = OrderedDict(), {}
        for name, spec in self.catalogue.items():
            if name in params:
                x, lr = params[name], cfg.lr_kernel
            elif name in ctx:
                x, lr = ctx[name], cfg.lr_context
            elif name in grids:
                x, lr = grids[name], cfg.lr_grid
            else:
                x, lr = np.zeros(spec.shape, dtype=np.float32), cfg.lr_grid
            self.values[name], self.lrs[name] = x, lr
            ls = _initial_log_step(x)
            if spec.kind == "grid":
                shape = grid_step_shape(spec.shape)
                self.values["logstep:" + name] = np.full(shape, np.log(2.0 ** -6), dtype=np.float32)
            else:
                self.values["logstep:" + name] = np.array(ls, dtype=np.float32)
                self.values["logsigma:" + name] = np.array(np.log(8.0), dtype=np.float32)
            self.lrs["logstep:" + name] = cfg.lr_step
            self.lrs["logsigma:" + name] = cfg.lr_step
        self.frozen_steps = self.frozen_sigma = None

    # -- quantities shared with the codec

    def step_fields(self) -> dict:
        out = {}
        for name, spec in self.catalogue.items():
            s = np.exp(self.values["logstep:" + name].astype(np.float64))
            out[name] = StepField(s, (GRID_BLOCK,) * 3 if spec.kind == "grid" else None)
        return out

    def sigma_w(self) -> dict:
        return {name: float(np.exp(self.values["logsigma:" + name])) for name, spec in self.catalogue.items()
                if spec.kind != "grid"}

    def state(self) -> codec.ModelState:
        tensors = OrderedDict((k, self.values[k]) for k in self.catalogue)
        steps = self.frozen_steps or self.step_fields()
        sigma = self.frozen_sigma or self.sigma_w()
        return codec.ModelState(self.cfg.synthesis, self.dims, tensors, steps, sigma, self.cfg.entropy_model)

    def fit_steps_to_alphabet(self) -> None:
        """Raise any step too fine for its values, so quantisation never clamps."""
        for name, spec in self.catalogue.items():
            key = "logstep:" + name
            peak = block_absmax(self.values[name], (GRID_BLOCK,) * 3 if spec.kind == "grid" else None)
            with np.errstate(divide="ignore"):
                floor = np.log(peak / (ALPHABET_BOUND - 1.0))
            self.values[key] = np.maximum(self.values[key], floor).astype(np.float32)

    def freeze_steps(self) -> None:
        """Snap steps and scales to their stored half-precision values."""
        self.frozen_steps = {k: f.to_half() for k, f in self.step_fields().items()}
        self.frozen_sigma = {k: codec.half_sigma(s) for k, s in self.sigma_w().items()}

    # -- loss

    def loss(self, frames: np.ndarray, stage: int, rng: np.random.Generator) -> tuple:
        leaves = OrderedDict((k, ad.Tensor(v, requires_grad=self._trainable(k, stage)))
                             for k, v in self.values.items())
        mode = "noise" if stage == 1 else "ste"
        T, H, W = self.dims
        xhat, bits = {}, None
        for name, spec in self.catalogue.items():
            if stage == 1:
                step = ad.exp(leaves["logstep:" + name])
            else:
                step = self.frozen_steps[name].steps.astype(np.float32)
            if spec.kind == "grid":
                Tg, _, Hg, Wg = spec.shape
                step = ad.block_expand(step, (GRID_BLOCK,) * 3, (Tg, Hg, Wg))
            y, xhat[name] = proxy_symbols(leaves[name], step, mode, rng)
            if spec.kind != "grid":
                if stage == 1:
                    sigma = ad.exp(ad.clamp(leaves["logsigma:" + name], *LOG_SIGMA_BOUNDS))
                else:
                    sigma = np.float32(self.frozen_sigma[name])
                b = octree.factorized_rate_bits(y, sigma)
                bits = b if bits is None else ad.add(bits, b)
            else:
                xhat["sym:" + name] = y
        ctx = {k: xhat[k] for k in octree.context_param_shapes(self.cfg.entropy_model)}
        rate_fn = octree.octree_rate_bits if self.cfg.entropy_model == "octree" else octree.ar_rate_bits
        for name, spec in self.catalogue.items():
            if spec.kind == "grid":
                Tg, _, Hg, Wg = spec.shape
                aux_up = octree.aux_upsample(xhat["aux" + name[len("grid"):]], (Tg, Hg, Wg))
                bits = ad.add(bits, rate_fn(ctx, xhat[name], xhat["sym:" + name], aux_up))
        scfg = self.cfg.synthesis
        params = {k: xhat[k] for k in self.catalogue if k in _synthesis_names(scfg)}
        grids = {k: xhat[k] for k, s in self.catalogue.items() if s.kind == "grid"}
        recon = forward(params, grids, scfg, frames)
        target = np.ascontiguousarray(self.video[frames].transpose(0, 3, 1, 2))
        loss, d, r = rd_loss(recon, target, bits, self.cfg.lam, self.num_pixels)
        return loss, d, r, leaves

    def _trainable(self, key: str, stage: int) -> bool:
        return not (stage == 2 and key.startswith(("logstep:", "logsigma:")))


def _synthesis_names(scfg: SynthesisConfig) -> set:
    return set(param_shapes(scfg))


def _frame_batches(T: int, batch: int, rng: np.random.Generator):
    """Endless shuffled passes over the frames, ``batch`` at a time."""
    b = min(batch, T)
    while True:
        order = rng.permutation(T)
        for i in range(0, T - b + 1, b):
            yield np.sort(order[i:i + b])


def train(video, config: TrainConfig, out=None) -> TrainResult:
    """Fit, encode, decode and cross-check one video."""
    video = check_video(video)
    out = out or sys.stdout
    prob = _Problem(video, config)
    rng = np.random.default_rng(config.seed)
    batches = _frame_batches(video.shape[0], config.batch, rng)
    opt = Adam(prob.lrs)
    log = TrainLog()
    step = 0
    for stage, n_steps in ((1, config.stage1_steps), (2, config.stage2_steps)):
        if stage == 2:
            prob.freeze_steps()
            opt.reset()
        base = 1.0 if stage == 1 else config.stage2_lr_scale
        for i in range(n_steps):
            frames = next(batches)
            with ad.Tape() as tape:
                loss, d, r, leaves = prob.loss(frames, stage, rng)
            rec = StepRecord(step, stage, loss.item(), d.item(), r.item())
            if not np.isfinite(rec.loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (stage {stage}): D={rec.distortion}, "
                                       f"R_bpp={rec.rate_bpp}; try a smaller learning rate or lambda")
            log.records.append(rec)
            if config.verbose:
                print(rec.line(), file=out, flush=True)
            keys = [k for k, t in leaves.items() if t.requires_grad]
            grads = ad.backward(tape, loss, [leaves[k] for k in keys])
            opt.step(prob.values, dict(zip(keys, grads)), base * cosine(i, n_steps))
            if stage == 1:
                prob.fit_steps_to_alphabet()
            step += 1
    return finish(prob, video, config, log)


def finish(prob: _Problem, video: np.ndarray, config: TrainConfig, log: TrainLog) -> TrainResult:
    state = prob.state()
    deq = codec.dequantized(state)
    log.quantized_psnr = psnr(codec.reconstruct(deq), video)
    t0 = time.perf_counter()
    stream = codec.encode(state)
    enc_s = time.perf_counter() - t0
    point = evaluate(stream, video)
    point.lam, point.enc_s = config.lam, enc_s
    point.kmacs_px = count_macs(config.synthesis, prob.dims).kmacs_per_pixel
    log.final = point
    log.estimated_bpp = log.records[-1].rate_bpp if log.records else None
    if abs(point.psnr_db - log.quantized_psnr) > 0.01:
        raise ClosureError(f"decoded PSNR {point.psnr_db:.4f} dB differs from train-time "
                             f"{log.quantized_psnr:.4f} dB")
    return TrainResult(deq, stream, log)


def evaluate(stream: bytes, video) -> RDPoint:
    """Decode ``stream`` and score it against ``video``; bpp counts the whole file."""
    video = np.asarray(video, dtype=np.float64)
    t0 = time.perf_counter()
    state = codec.decode(stream)
    recon = codec.reconstruct(state)
    dec_s = time.perf_counter() - t0
    if recon.shape != video.shape:
        raise DimensionError(f"stream decodes to {recon.shape}, reference is {video.shape}")
    T, H, W, _ = video.shape
    return RDPoint(lam=float("nan"), bpp=8.0 * len(stream) / (T * H * W), psnr_db=psnr(recon, video),
                   dec_s=dec_s)
