import io

import numpy as np
import pytest

from gridcodec import codec
from gridcodec.cli import ABLATION_MODES, entropy_timing, load_config, main, profile_report, read_csv
from gridcodec.data import synthetic_video, to_uint8, write_raw, write_y4m
from gridcodec.metrics import CSV_COLUMNS
from gridcodec.synthesis import SynthesisConfig

FAST = ["--stage1-steps", "8", "--stage2-steps", "2", "--batch", "2"]


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text('{"num_stages": 2, "base_channels": 8, "grid_channels": [2, 1]}')
    return str(path)


@pytest.fixture(scope="module")
def raw_input(tmp_path_factory):
    path = tmp_path_factory.mktemp("in") / "clip.rgb"
    write_raw(path, synthetic_video(8, 64, 64))
    return str(path)


@pytest.fixture(scope="module")
def encoded(tmp_path_factory, tiny_cfg, raw_input):
    out = tmp_path_factory.mktemp("enc") / "clip.nvrl"
    args = ["encode", "--input", raw_input, "--width", "64", "--height", "64", "--frames", "8", "--lambda", "1",
            "--seed", "3", "--out", str(out)] + FAST
    return args, out


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_encode_writes_decodable_stream(encoded, capsys):
    args, out = encoded
    code, stdout, _ = run(args, capsys)
    assert code == 0
    header, row = stdout.strip().splitlines()
    assert header == ",".join(CSV_COLUMNS)
    bpp = float(row.split(",")[1])
    assert 0 < bpp < 24
    state = codec.decode(out.read_bytes())
    assert state.dims == (8, 64, 64)


def test_encode_is_byte_identical_across_runs(encoded, capsys, tmp_path):
    args, out = encoded
    first = out.read_bytes() if out.exists() else None
    if first is None:
        assert run(args, capsys)[0] == 0
        first = out.read_bytes()
    second = tmp_path / "again.nvrl"
    assert run(args[:-len(FAST) - 2] + ["--out", str(second)] + FAST, capsys)[0] == 0
    assert second.read_bytes() == first


def test_decode_emits_rounded_frames(encoded, capsys, tmp_path):
    args, out = encoded
    if not out.exists():
        run(args, capsys)
    dst = tmp_path / "dec.rgb"
    assert run(["decode", "--in", str(out), "--out", str(dst)], capsys)[0] == 0
    data = dst.read_bytes()
    assert len(data) == 8 * 64 * 64 * 3
    expected = to_uint8(codec.reconstruct(codec.decode(out.read_bytes()))).tobytes()
    assert data == expected
    dst2 = tmp_path / "dec2.rgb"
    run(["decode", "--in", str(out), "--out", str(dst2)], capsys)
    assert dst2.read_bytes() == data


def test_decode_corrupt_stream_exits_3(encoded, capsys, tmp_path):
    args, out = encoded
    if not out.exists():
        run(args, capsys)
    data = bytearray(out.read_bytes())
    data[len(data) // 2] ^= 0x40
    bad = tmp_path / "bad.nvrl"
    bad.write_bytes(bytes(data))
    code, _, err = run(["decode", "--in", str(bad), "--out", str(tmp_path / "x.rgb")], capsys)
    assert code == 3 and "CRC" in err


def test_evaluate_round_trips_csv(encoded, capsys, tmp_path, raw_input):
    args, out = encoded
    if not out.exists():
        run(args, capsys)
    code, stdout, _ = run(["evaluate", "--in", str(out), "--reference", raw_input, "--width", "64",
                           "--height", "64", "--frames", "8", "--lambda", "1"], capsys)
    assert code == 0
    (tmp_path / "rd.csv").write_text(stdout)
    [p] = read_csv(tmp_path / "rd.csv")
    assert p.lam == 1.0 and p.bpp == pytest.approx(8 * out.stat().st_size / (8 * 64 * 64), rel=1e-5)


def test_frames_beyond_file_is_usage_error(raw_input, tiny_cfg, capsys, tmp_path):
    code, _, err = run(["encode", "--input", raw_input, "--width", "64", "--height", "64", "--frames", "9",
                        "--config", tiny_cfg, "--out", str(tmp_path / "o.nvrl")] + FAST, capsys)
    assert code == 2 and "frames" in err


def test_unwritable_output_is_usage_error(raw_input, tiny_cfg, capsys):
    code, _, _ = run(["encode", "--input", raw_input, "--width", "64", "--height", "64", "--frames", "8",
                      "--config", tiny_cfg, "--out", "/nonexistent/dir/o.nvrl"] + FAST, capsys)
    assert code == 2


def test_y4m_input(tiny_cfg, capsys, tmp_path):
    write_y4m(tmp_path / "c.y4m", synthetic_video(2, 16, 16))
    code, stdout, _ = run(["encode", "--input", str(tmp_path / "c.y4m"), "--config", tiny_cfg,
                           "--out", str(tmp_path / "c.nvrl")] + FAST, capsys)
    assert code == 0 and (tmp_path / "c.nvrl").exists()


def test_divergence_exit_code(raw_input, tiny_cfg, capsys, tmp_path, monkeypatch):
    from gridcodec import cli
    from gridcodec.errors import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss at step 0")

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(["encode", "--synthetic", "--out", str(tmp_path / "o.nvrl")], capsys)
    assert code == 4 and "diverged" in err


def test_usage_errors(capsys):
    assert run([], capsys)[0] == 2
    assert run(["encode", "--out", "x"], capsys)[0] == 2          # no input
    assert run(["profile", "--config", "nope"], capsys)[0] == 2


def test_profile_canonical(capsys):
    code, stdout, _ = run(["profile"], capsys)
    assert code == 0
    total = float(stdout.strip().splitlines()[-1].split(":")[1])
    assert total < 10.0
    rep, _ = profile_report(load_config("canonical"), (8, 64, 64))
    vals = list(rep.stage_pointwise().values())
    assert len(vals) == 2 and vals[0] == vals[1]


def test_profile_single_stage_hand_count(tmp_path, capsys):
    cfg = tmp_path / "one.json"
    cfg.write_text('{"num_stages": 1, "base_channels": 1, "grid_channels": [1], "kernel": 1, '
                   '"temporal_kernel": 1}')
    code, stdout, _ = run(["profile", "--config", str(cfg), "--width", "1", "--height", "1", "--frames", "1"],
                          capsys)
    assert code == 0
    # stem2d 1 + stem1d 1 + head 3
    assert stdout.strip().endswith("total kMACs/pixel: 0.0050")


def test_ablation_modes_map_to_variants():
    assert load_config(ABLATION_MODES["single-scale"][0]).grid_channels == (4, 0, 0)
    assert ABLATION_MODES["autoregressive"][1] == "ar"


def test_ablate_small_sweep(capsys, tmp_path):
    out = tmp_path / "abl.csv"
    code, stdout, err = run(["ablate", "--mode", "single-scale", "--synthetic", "--frames", "2", "--width", "16",
                             "--height", "16", "--lambdas", "10,100", "--out", str(out), "--timing",
                             "--timing-grid", "2x8x8"] + FAST, capsys)
    assert code == 0
    points = read_csv(out)
    assert [p.lam for p in points] == [10.0, 100.0]
    assert "ratio" in err


def test_entropy_timing_small_grid():
    t = entropy_timing((2, 8, 8))
    assert set(t) == {"octree", "autoregressive"} and min(t.values()) > 0
