"""Video sources: the synthetic test clip and raw / Y4M file IO.

Videos are ``(T, H, W, 3)`` float arrays in [0, 1]. Files hold 8-bit samples.
"""

from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, StreamError


def synthetic_video(frames: int = 8, height: int = 64, width: int = 64) -> np.ndarray:
    """A horizontally drifting colour gradient with a disc moving diagonally across it."""
    t = np.arange(frames, dtype=np.float64)[:, None, None]
    y = np.arange(height, dtype=np.float64)[None, :, None]
    x = np.arange(width, dtype=np.float64)[None, None, :]
    phase = (x + 2.0 * t) / width
    r = 0.5 + 0.4 * np.sin(2 * np.pi * phase)
    g = 0.2 + 0.6 * y / max(height - 1, 1) + 0 * t
    b = 0.5 + 0.3 * np.cos(2 * np.pi * (phase + y / height) / 2)
    video = np.stack(np.broadcast_arrays(r, g, b), axis=-1)
    radius = 0.18 * min(height, width)
    cy = 0.3 * height + 1.5 * t
    cx = 0.3 * width + 2.0 * t
    dist = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    alpha = np.clip(radius - dist + 0.5, 0.0, 1.0)[..., None]  # one-pixel soft edge
    disc = np.array([0.95, 0.85, 0.1])
    return (1 - alpha) * video + alpha * disc


def to_uint8(video) -> np.ndarray:
    return np.clip(np.rint(np.asarray(video, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def check_video(video) -> np.ndarray:
    v = np.asarray(video, dtype=np.float64)
    if v.ndim != 4 or v.shape[-1] != 3 or min(v.shape) < 1:
        raise DimensionError(f"video must be a nonempty (T, H, W, 3) array, got {v.shape}")
    if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise ContractError("video values must lie in [0, 1]")
    return v


def read_raw(path, width: int, height: int, frames: int) -> np.ndarray:
    """Frame-major interleaved 8-bit RGB."""
    data = Path(path).read_bytes()
    frame_bytes = width * height * 3
    if min(width, height, frames) < 1:
        raise DimensionError("width, height and frames must be positive")
    if len(data) % frame_bytes:
        raise DimensionError(f"file size {len(data)} is not a multiple of a {width}x{height} RGB frame")
    if frames * frame_bytes > len(data):
        raise DimensionError(f"requested {frames} frames but the file holds {len(data) // frame_bytes}")
    raw = np.frombuffer(data[:frames * frame_bytes], dtype=np.uint8)
    return raw.reshape(frames, height, width, 3).astype(np.float64) / 255.0


def write_raw(path, video) -> None:
    Path(path).write_bytes(to_uint8(video).tobytes())


# BT.601 full-range YCbCr <-> RGB
_RGB2YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def read_y4m(path) -> np.ndarray:
    """YUV4MPEG2 with 8-bit 4:4:4 sampling, converted to RGB."""
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if not data.startswith(b"YUV4MPEG2") or end < 0:
        raise StreamError("not a YUV4MPEG2 file")
    tokens = data[:end].split()[1:]
    fields = {t[:1]: t[1:] for t in tokens}
    try:
        width, height = int(fields[b"W"]), int(fields[b"H"])
    except (KeyError, ValueError):
        raise StreamError("Y4M header lacks frame dimensions") from None
    if fields.get(b"C", b"420") != b"444":
        raise ContractError("only 8-bit 4:4:4 Y4M input is supported")
    plane = width * height
    pos, frames = end + 1, []
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0 or not data[pos:nl].startswith(b"FRAME"):
            raise StreamError(f"bad frame marker at byte {pos}")
        pos = nl + 1
        if pos + 3 * plane > len(data):
            raise StreamError("truncated Y4M frame")
        ycc = np.frombuffer(data[pos:pos + 3 * plane], dtype=np.uint8).reshape(3, height, width).astype(np.float64)
        pos += 3 * plane
        ycc[1:] -= 128.0
        frames.append(np.clip(np.einsum("ij,jhw->hwi", _YCC2RGB, ycc) / 255.0, 0.0, 1.0))
    if not frames:
        raise StreamError("Y4M file has no frames")
    return np.stack(frames)


def write_y4m(path, video, fps: int = 25) -> None:
    v = check_video(video) * 255.0
    T, H, W, _ = v.shape
    out = [f"YUV4MPEG2 W{W} H{H} F{fps}:1 Ip A1:1 C444\n".encode()]
    for frame in v:
        ycc = np.einsum("ij,hwj->ihw", _RGB2YCC, frame)
        ycc[1:] += 128.0
        out.append(b"FRAME\n" + np.clip(np.rint(ycc), 0, 255).astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_video(path, width: int = None, height: int = None, frames: int = None) -> np.ndarray:
    """Y4M by extension or magic, raw RGB otherwise (dimensions required)."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(9)
    if head == b"YUV4MPEG2":
        video = read_y4m(path)
        if frames is not None:
            if frames > video.shape[0]:
                raise DimensionError(f"requested {frames} frames but the file holds {video.shape[0]}")
            video = video[:frames]
        return video
    if None in (width, height, frames):
        raise ContractError("raw input needs --width, --height and --frames")
    return read_raw(path, width, height, frames)
