"""Quality and rate bookkeeping."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError

PSNR_CAP = 100.0
CSV_COLUMNS = ("lambda", "bpp", "psnr_db", "enc_s", "dec_s", "kmacs_px")


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"videos differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float) -> float:
    if m <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(m)))


def psnr(a, b) -> float:
    """PSNR in dB for signals in [0, 1], capped at 100 dB."""
    return psnr_from_mse(mse(a, b))


@dataclass
class RDPoint:
    lam: float
    bpp: float
    psnr_db: float
    enc_s: float = 0.0
    dec_s: float = 0.0
    kmacs_px: float = 0.0

    def row(self) -> list:
        return [self.lam, self.bpp, self.psnr_db, self.enc_s, self.dec_s, self.kmacs_px]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row) -> "RDPoint":
        return cls(*(float(v) for v in row))
