import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gridcodec import codec
from gridcodec.data import synthetic_video
from gridcodec.estimator import GridVideoCodec

SMALL = dict(lam=300.0, stage1_steps=10, stage2_steps=2, batch=2, num_stages=2, base_channels=8,
             grid_channels=(2, 1))


@pytest.fixture(scope="module")
def fitted():
    video = synthetic_video(4, 16, 16)
    return GridVideoCodec(**SMALL).fit(video), video


def test_params_round_trip_through_clone():
    est = GridVideoCodec(**SMALL)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(lam=5.0).lam == 5.0


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        GridVideoCodec().predict()


def test_fit_predict_score(fitted):
    est, video = fitted
    recon = est.predict()
    assert recon.shape == video.shape
    assert est.score(video) == pytest.approx(est.rd_point_.psnr_db, abs=1e-9)
    np.testing.assert_array_equal(recon, codec.reconstruct(codec.decode(est.stream_)))


def test_save_writes_the_stream(fitted, tmp_path):
    est, _ = fitted
    est.save(tmp_path / "v.nvrl")
    assert (tmp_path / "v.nvrl").read_bytes() == est.stream_


def test_evaluate_reports_file_bpp(fitted):
    est, video = fitted
    p = est.evaluate(video)
    assert p.bpp == 8 * len(est.stream_) / np.prod(video.shape[:3])
