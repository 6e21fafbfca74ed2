import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridcodec import rangecoder as rc
from gridcodec.errors import ContractError, StreamError
from gridcodec.gaussian import SIGMA_MIN


def _random_table(rng, size=None):
    m = int(size or rng.integers(1, 40))
    counts = np.ones(m, dtype=np.int64)
    extra = rng.multinomial(rc.TOTAL - m, rng.dirichlet(np.full(m, 0.3)))
    counts += extra
    return rc.CdfTable(int(rng.integers(-20, 20)), np.concatenate([[0], np.cumsum(counts)]))


def _draw(rng, table):
    p = table.counts() / rc.TOTAL
    return table.offset + int(rng.choice(table.size, p=p))


def test_empty_stream_is_flush_only():
    assert len(rc.encode_symbols([], [])) <= 8
    assert rc.decode_symbols(rc.encode_symbols([], []), []) == []


def test_uniform_binary_payload_length():
    rng = np.random.default_rng(0)
    t = rc.CdfTable(0, np.array([0, 32768, 65536]))
    syms = list(rng.integers(0, 2, 1024))
    data = rc.encode_symbols(syms, [t] * 1024)
    assert 128 <= len(data) <= 138
    assert rc.decode_symbols(data, [t] * 1024) == syms


def test_encoding_is_deterministic():
    rng = np.random.default_rng(1)
    tables = [_random_table(rng) for _ in range(200)]
    syms = [_draw(rng, t) for t in tables]
    assert rc.encode_symbols(syms, tables) == rc.encode_symbols(list(syms), list(tables))


def test_roundtrip_1e5_symbols_batch():
    rng = np.random.default_rng(2)
    matrix = np.stack([_random_table(rng, 17).cdf for _ in range(50)])
    rows = rng.integers(0, 50, 100_000)
    idx = np.array([rng.choice(17, p=np.diff(matrix[r]) / rc.TOTAL) for r in rows[:1000]] +
                   list(rng.integers(0, 17, 99_000)))
    data = rc.encode_indexed(idx, rows, matrix)
    np.testing.assert_array_equal(rc.decode_indexed(data, rows, matrix), idx)


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 60))
def test_roundtrip_property(seed, n):
    rng = np.random.default_rng(seed)
    tables = [_random_table(rng) for _ in range(n)]
    # mix typical and worst-case (least probable) symbols
    syms = [_draw(rng, t) if rng.random() < 0.7 else t.offset + int(np.argmin(t.counts())) for t in tables]
    assert rc.decode_symbols(rc.encode_symbols(syms, tables), tables) == syms


def test_single_symbol_alphabet_costs_nothing():
    t = rc.CdfTable(5, np.array([0, rc.TOTAL]))
    data = rc.encode_symbols([5] * 500, [t] * 500)
    assert data == b""
    assert rc.decode_symbols(data, [t] * 500) == [5] * 500


def test_out_of_alphabet_rejected():
    t = rc.build_cdf(0.0, 1.0, (-3, 3))
    with pytest.raises(ContractError):
        rc.encode_symbols([4], [t])
    with pytest.raises(ContractError):
        rc.encode_symbols([0, 1], [t])


def test_trailing_garbage_and_bad_prefix_rejected():
    t = rc.build_cdf(0.0, 1.0, (-3, 3))
    data = rc.encode_symbols([0, 1, -1], [t] * 3)
    with pytest.raises(StreamError):
        rc.decode_symbols(data + b"\x07" * 6, [t] * 3)
    with pytest.raises(StreamError):
        rc.decode_symbols(b"\xff\xff\xff\xff", [t])


@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (3.3, 0.2), (-100.0, 40.0), (0.49, 256.0), (250.0, 0.05)])
def test_build_cdf_counts(mu, sigma):
    t = rc.build_cdf(mu, sigma)
    assert t.cdf[0] == 0 and t.cdf[-1] == 65536
    assert t.counts().min() >= 1
    assert t.size == 511


def test_build_cdf_random_total():
    rng = np.random.default_rng(3)
    for _ in range(100):
        t = rc.build_cdf(rng.normal(0, 50), np.exp(rng.uniform(np.log(0.05), np.log(256))))
        assert t.cdf[-1] == 65536 and np.all(np.diff(t.cdf) >= 1)


def test_build_cdf_sharp_center():
    t = rc.build_cdf(0.0, SIGMA_MIN)
    assert t.counts()[t.index_of(0)] / rc.TOTAL > 0.99


def test_build_cdf_tracks_probabilities():
    # counts share is within one count of the proportional share
    t = rc.build_cdf(0.0, 2.0, (-10, 10))
    from oracles import normal_cdf
    q = np.arange(-10, 11)
    p = np.array([normal_cdf((k + 0.5) / 2) - normal_cdf((k - 0.5) / 2) for k in q])
    share = p / p.sum() * (rc.TOTAL - 21)
    assert np.all(np.abs(t.counts() - 1 - share) <= 1.0)


def test_lattice_tables_match_build_cdf():
    rng = np.random.default_rng(4)
    mu = rng.normal(0, 3, 40)
    sigma = np.exp(rng.uniform(-3, 3, 40))
    matrix, rows = rc.lattice_tables(mu, sigma, 12)
    from gridcodec.gaussian import MU_SCALE, SIGMA_LEVELS, mu_code, sigma_index
    for i in range(40):
        ref = rc.build_cdf(mu_code(mu[i], 12) / MU_SCALE, SIGMA_LEVELS[sigma_index(sigma[i])], (-12, 12))
        np.testing.assert_array_equal(matrix[rows[i]], ref.cdf)


def test_near_optimal_bound():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tables = [rc.build_cdf(rng.normal(0, 5), np.exp(rng.uniform(-2, 4)), (-30, 30)) for _ in range(300)]
        syms = [_draw(rng, t) for t in tables]
        data = rc.encode_symbols(syms, tables)
        assert 8 * len(data) <= rc.ideal_bits(syms, tables) + 64 + 8


def test_sequential_decoder_matches_batch():
    rng = np.random.default_rng(6)
    matrix = np.stack([_random_table(rng, 9).cdf for _ in range(5)])
    rows = rng.integers(0, 5, 300)
    idx = rng.integers(0, 9, 300)
    data = rc.encode_indexed(idx, rows, matrix)
    dec = rc.RangeDecoder(data)
    got = [dec.decode(matrix[r]) for r in rows]
    dec.finish()
    assert got == list(idx)
