"""Multi-scale grid-fed synthesis network.

Stage ``n`` runs at ``1 / 2**(N-1-n)`` of the output resolution with
``C / 2**n`` channels and receives its own learned feature grid. Stage 0 is a
2D + 1D (temporal) convolutional stem on the first grid. Every later stage adds
a 1x1 projection of its grid to the upsampled features and applies one
residual depthwise-separable block. A pointwise head and a sigmoid produce RGB.

Parameters and grids are plain ``float32`` arrays keyed by name; all forward
computation goes through :mod:`gridcodec.autodiff` so the same code trains and
decodes.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class SynthesisConfig:
    num_stages: int = 3
    base_channels: int = 32
    grid_channels: tuple = (4, 2, 1)
    kernel: int = 3
    temporal_kernel: int = 3
    t_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_channels", tuple(int(c) for c in self.grid_channels))
        N, C = self.num_stages, self.base_channels
        if N < 1:
            raise ConfigError("need at least one stage")
        if C < 1 or C % (1 << (N - 1)):
            raise ConfigError(f"base channels {C} must be divisible by 2^(N-1) = {1 << (N - 1)}")
        if len(self.grid_channels) != N:
            raise ConfigError(f"expected {N} grid channel counts, got {len(self.grid_channels)}")
        if self.grid_channels[0] < 1 or min(self.grid_channels) < 0:
            raise ConfigError("stage 0 needs a grid; later stages need >= 0 grid channels")
        if self.kernel % 2 == 0 or self.temporal_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.t_stride < 1:
            raise ConfigError("temporal stride must be >= 1")

    @property
    def stage_channels(self) -> tuple:
        return tuple(self.base_channels >> n for n in range(self.num_stages))

    def stage_resolution(self, n: int, height: int, width: int) -> tuple:
        f = 1 << (self.num_stages - 1 - n)
        return height // f, width // f

    def grid_extents(self, video_dims: tuple) -> list:
        """``(Tg, Hg, Wg, Cg)`` per stage (``None`` where a stage has no grid)."""
        T, H, W = self.check_dims(video_dims)
        Tg = -(-T // self.t_stride)
        out = []
        for n, cg in enumerate(self.grid_channels):
            out.append((Tg, *self.stage_resolution(n, H, W), cg) if cg else None)
        return out

    def check_dims(self, video_dims: tuple) -> tuple:
        T, H, W = (int(d) for d in video_dims)
        f = 1 << (self.num_stages - 1)
        if min(T, H, W) < 1 or H % f or W % f:
            raise ConfigError(f"video {T}x{H}x{W} incompatible with {self.num_stages} stages (H, W multiple of {f})")
        return T, H, W

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: SynthesisConfig) -> "OrderedDict[str, tuple]":
    """Network parameter names and shapes in canonical (serialisation) order."""
    ch, cg, k, kt = config.stage_channels, config.grid_channels, config.kernel, config.temporal_kernel
    shapes = OrderedDict()
    shapes["stem2d.w"] = (ch[0], cg[0], k, k)
    shapes["stem2d.b"] = (ch[0],)
    shapes["stem1d.w"] = (ch[0], cg[0], kt)
    for n in range(1, config.num_stages):
        cin, cout = ch[n - 1], ch[n]
        if cg[n]:
            shapes[f"proj{n}.w"] = (cin, cg[n], 1, 1)
        shapes[f"dw{n}.w"] = (cin, 1, k, k)
        shapes[f"dw{n}.b"] = (cin,)
        shapes[f"pw{n}a.w"] = (cout, cin, 1, 1)
        shapes[f"pw{n}a.b"] = (cout,)
        shapes[f"pw{n}b.w"] = (cout, cout, 1, 1)
        shapes[f"pw{n}b.b"] = (cout,)
    shapes["head.w"] = (3, ch[-1], 1, 1)
    shapes["head.b"] = (3,)
    return shapes


def grid_names(config: SynthesisConfig) -> list:
    return [f"grid{n}" for n, c in enumerate(config.grid_channels) if c]


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(".b"):
        return 0
    return int(np.prod(shape[1:]))


def build_model(config: SynthesisConfig, video_dims: tuple, dtype=np.float32) -> tuple:
    """Seeded initialisation: ``(params, grids)``.

    Kernels are uniform in ``+-1/sqrt(fan_in)``, biases zero and grids uniform
    in ``+-1e-2``. Grids are ``[Tg, Cg, Hg, Wg]`` arrays keyed ``grid{n}``.
    """
    extents = config.grid_extents(video_dims)
    rng = np.random.default_rng(config.seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        fan = _fan_in(name, shape)
        if fan:
            bound = 1.0 / np.sqrt(fan)
            params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    grids = OrderedDict()
    for n, ext in enumerate(extents):
        if ext is not None:
            Tg, Hg, Wg, Cg = ext
            grids[f"grid{n}"] = rng.uniform(-1e-2, 1e-2, (Tg, Cg, Hg, Wg)).astype(dtype)
    return params, grids


def _pair_mean(x):
    """Halve channels by averaging neighbouring pairs (parameter-free shortcut)."""
    T, C, H, W = x.shape
    return ad.mul(ad.sum(ad.reshape(x, (T, C // 2, 2, H, W)), axis=2), 0.5)


def _temporal_stem(g0, w, frames: np.ndarray, stride: int, Tg: int):
    """1D temporal conv over grid frames, evaluated only at the requested frames.

    Gathering taps per output frame keeps the result independent of how the
    frames are batched.
    """
    kt = w.shape[2]
    p = kt // 2
    gidx = frames // stride
    out = None
    for i in range(kt):
        src = gidx + i - p
        valid = (src >= 0) & (src < Tg)
        tap = ad.getitem(g0, np.clip(src, 0, Tg - 1))
        if not valid.all():
            tap = ad.mul(tap, valid.astype(tap.dtype)[:, None, None, None])
        wi = ad.reshape(ad.getitem(w, (slice(None), slice(None), slice(i, i + 1))), (w.shape[0], w.shape[1], 1, 1))
        term = ad.conv2d(tap, wi)
        out = term if out is None else ad.add(out, term)
    return out


def forward(params: dict, grids: dict, config: SynthesisConfig, frames: Sequence[int]):
    """Reconstruction ``[B, 3, H, W]`` (a Tensor) for the given frame indices."""
    frames = np.asarray(frames, dtype=np.int64).reshape(-1)
    g0 = grids["grid0"]
    Tg = g0.shape[0]
    stride = config.t_stride
    if frames.size == 0:
        raise DimensionError("no frames requested")
    if frames.min() < 0 or (frames.max() // stride) >= Tg:
        raise DimensionError(f"frame indices outside [0, {Tg * stride})")
    gidx = frames // stride
    out = ad.add(ad.conv2d(ad.getitem(g0, gidx), params["stem2d.w"], params["stem2d.b"]),
                 _temporal_stem(g0, params["stem1d.w"], frames, stride, Tg))
    for n in range(1, config.num_stages):
        a = ad.upsample_nearest2x(out)
        if config.grid_channels[n]:
            g = ad.getitem(grids[f"grid{n}"], gidx)
            if g.shape[2:] != a.shape[2:]:
                raise DimensionError(f"grid{n} extents {g.shape[2:]} do not match stage resolution {a.shape[2:]}")
            a = ad.add(a, ad.conv2d(g, params[f"proj{n}.w"]))
        h = ad.conv2d(a, params[f"dw{n}.w"], params[f"dw{n}.b"], groups=a.shape[1])
        h = ad.gelu(ad.conv2d(h, params[f"pw{n}a.w"], params[f"pw{n}a.b"]))
        h = ad.conv2d(h, params[f"pw{n}b.w"], params[f"pw{n}b.b"])
        out = ad.add(_pair_mean(a), h)
    return ad.sigmoid(ad.conv2d(out, params["head.w"], params["head.b"]))


def synthesize(params: dict, grids: dict, config: SynthesisConfig, frames: Sequence[int]) -> np.ndarray:
    """Frames ``(B, H, W, 3)`` in (0, 1)."""
    return np.transpose(forward(params, grids, config, frames).data, (0, 2, 3, 1))


def synthesize_video(params: dict, grids: dict, config: SynthesisConfig, num_frames: int,
                     batch: int = 4) -> np.ndarray:
    parts = [synthesize(params, grids, config, range(t, min(t + batch, num_frames)))
             for t in range(0, num_frames, batch)]
    return np.concatenate(parts, axis=0)


@dataclass
class MacsReport:
    layers: list = field(default_factory=list)  # (name, stage, kind, macs)
    pixels: int = 0

    @property
    def total(self) -> int:
        return int(sum(m for *_, m in self.layers))

    @property
    def kmacs_per_pixel(self) -> float:
        return self.total / self.pixels / 1000.0

    def stage_pointwise(self) -> dict:
        """Pointwise (block) MACs per stage."""
        out = {}
        for name, stage, kind, macs in self.layers:
            if kind == "pointwise":
                out[stage] = out.get(stage, 0) + macs
        return out


def count_macs(config: SynthesisConfig, video_dims: tuple) -> MacsReport:
    """Multiply-accumulate counts from shape arithmetic (biases excluded)."""
    T, H, W = config.check_dims(video_dims)
    ch, cg, k, kt = config.stage_channels, config.grid_channels, config.kernel, config.temporal_kernel
    rep = MacsReport(pixels=T * H * W)

    def add(name, stage, kind, per_px, n):
        h, w = config.stage_resolution(n, H, W)
        rep.layers.append((name, stage, kind, int(T * h * w * per_px)))

    add("stem2d", 0, "stem", cg[0] * ch[0] * k * k, 0)
    add("stem1d", 0, "stem", cg[0] * ch[0] * kt, 0)
    for n in range(1, config.num_stages):
        cin, cout = ch[n - 1], ch[n]
        if cg[n]:
            add(f"proj{n}", n, "projection", cg[n] * cin, n)
        add(f"dw{n}", n, "depthwise", cin * k * k, n)
        add(f"pw{n}a", n, "pointwise", cin * cout, n)
        add(f"pw{n}b", n, "pointwise", cout * cout, n)
    add("head", config.num_stages - 1, "head", ch[-1] * 3, config.num_stages - 1)
    return rep
