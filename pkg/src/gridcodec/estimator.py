"""scikit-learn style front end: one fitted estimator per video."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import codec
from .data import check_video
from .metrics import psnr
from .synthesis import SynthesisConfig
from .trainer import TrainConfig, evaluate, train


class GridVideoCodec(BaseEstimator):
    """Overfit a multi-scale grid representation to a video and code it.

    ``fit(X)`` takes the video itself, ``(T, H, W, 3)`` in [0, 1]. After
    fitting, ``stream_`` holds the encoded bytes, ``predict()`` the decoded
    frames and ``log_`` the training trace.
    """

    def __init__(self, lam=1000.0, stage1_steps=2000, stage2_steps=200, batch=4, lr_grid=1e-2, lr_kernel=1e-3,
                 lr_context=1e-2, lr_step=5e-2, num_stages=3, base_channels=32, grid_channels=(4, 2, 1), entropy_model="octree", seed=0,
                 verbose=False):
        self.lam = lam
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.batch = batch
        self.lr_grid = lr_grid
        self.lr_kernel = lr_kernel
        self.lr_context = lr_context
        self.lr_step = lr_step
        self.num_stages = num_stages
        self.base_channels = base_channels
        self.grid_channels = grid_channels
        self.entropy_model = entropy_model
        self.seed = seed
        self.verbose = verbose

    def train_config(self) -> TrainConfig:
        synth = SynthesisConfig(num_stages=self.num_stages, base_channels=self.base_channels,
                                grid_channels=tuple(self.grid_channels), seed=self.seed)
        return TrainConfig(lam=self.lam, stage1_steps=self.stage1_steps, stage2_steps=self.stage2_steps,
                           batch=self.batch, lr_grid=self.lr_grid, lr_kernel=self.lr_kernel,
                           lr_context=self.lr_context, lr_step=self.lr_step, seed=self.seed,
                           entropy_model=self.entropy_model, synthesis=synth, verbose=self.verbose)

    def fit(self, X, y=None):
        video = check_video(X)
        result = train(video, self.train_config())
        self.stream_ = result.stream
        self.state_ = result.state
        self.log_ = result.log
        self.rd_point_ = result.log.final
        self.video_shape_ = video.shape
        return self

    def _check_fitted(self):
        if not hasattr(self, "stream_"):
            raise NotFittedError("call fit() first")

    def predict(self, X=None) -> np.ndarray:
        """Decoded frames; ``X`` is ignored (the representation is the video)."""
        self._check_fitted()
        return codec.reconstruct(codec.decode(self.stream_))

    def score(self, X, y=None) -> float:
        """PSNR (dB) of the decoded stream against ``X``."""
        self._check_fitted()
        return psnr(self.predict(), check_video(X))

    def evaluate(self, X):
        self._check_fitted()
        return evaluate(self.stream_, check_video(X))

    def save(self, path) -> None:
        self._check_fitted()
        with open(path, "wb") as f:
            f.write(self.stream_)
