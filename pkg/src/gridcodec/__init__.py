"""Learned video coding with multi-scale feature grids and an octree context model."""

from .codec import ModelState, decode, encode, reconstruct
from .data import load_video, synthetic_video
from .estimator import GridVideoCodec
from .metrics import RDPoint, psnr
from .synthesis import SynthesisConfig
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
__all__ = ["GridVideoCodec", "ModelState", "RDPoint", "SynthesisConfig", "TrainConfig", "decode", "encode",
           "evaluate", "load_video", "psnr", "reconstruct", "synthetic_video", "train"]
