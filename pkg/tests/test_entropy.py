import numpy as np
import pytest

from crvcodec import entropy_models as em
from crvcodec import rangecoder as rc
from crvcodec.autodiff import Tensor
from crvcodec import autodiff as ad


def make_laplacian_pmf(scale, width=256, first=-128):
    v = np.arange(first, first + width, dtype=np.float64)
    p = np.exp(-np.abs(v) / scale)
    return p / p.sum()


class TestQuantizePmf:
    def test_total_and_floor(self, rng):
        pmf = rng.random((5, 40))
        cdf = em.quantize_pmf(pmf)
        freqs = np.diff(cdf.astype(np.int64), axis=1)
        assert (freqs >= 1).all()
        assert (cdf[:, -1] == rc.CDF_TOTAL).all()
        assert (cdf[:, 0] == 0).all()
        assert (np.diff(cdf.astype(np.int64), axis=1) > 0).all()

    def test_peaked_pmf_keeps_tail_mass(self):
        pmf = np.zeros(100)
        pmf[50] = 1.0
        cdf = em.quantize_pmf(pmf)
        freqs = np.diff(cdf.astype(np.int64), axis=1)[0]
        assert freqs[0] == 1 and freqs[99] == 1
        assert freqs[50] == rc.CDF_TOTAL - 99


class TestRoundTrip:
    def test_large_random_round_trip(self):
        rng = np.random.default_rng(0)
        model = em.FixedCdfModel(make_laplacian_pmf(12.0), first_symbol=-128)
        syms = rng.integers(-128, 128, size=100_000)
        blob = em.range_encode(syms, model)
        back = em.range_decode(blob, syms.size, model)
        assert np.array_equal(back, syms)

    def test_empty_sequence(self):
        model = em.FixedCdfModel(np.full(16, 1 / 16))
        blob = em.range_encode(np.array([], dtype=np.int64), model)
        assert len(blob) <= 8
        assert em.range_decode(blob, 0, model).size == 0

    def test_single_symbol(self):
        model = em.FixedCdfModel(np.array([0.5, 0.5]))
        for s in (0, 1):
            blob = em.range_encode(np.array([s]), model)
            assert em.range_decode(blob, 1, model)[0] == s

    def test_fuzz_round_trips_exact(self):
        rng = np.random.default_rng(99)
        for _ in range(1500):
            width = int(rng.integers(2, 200))
            pmf = rng.random(width) + 1e-6
            first = int(rng.integers(-100, 100))
            model = em.FixedCdfModel(pmf, first_symbol=first)
            n = int(rng.integers(0, 120))
            syms = rng.integers(first, first + width, size=n)
            back = em.range_decode(em.range_encode(syms, model), n, model)
            assert np.array_equal(back, syms)

    def test_gaussian_model_round_trip(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(0, 5, (4, 8, 8))
        sigma = rng.uniform(0.05, 4.0, (4, 8, 8))
        model = em.ExplicitGaussian(mu, sigma)
        y = rng.normal(mu, sigma)
        plan = model.plan(y.shape, None)
        syms = np.clip(ad.round_half_away(y.astype(np.float32)).astype(np.int64),
                       plan.base.reshape(y.shape) + em.SUPPORT_LO,
                       plan.base.reshape(y.shape) + em.SUPPORT_HI)
        blob = em.range_encode(syms, model)
        back = em.range_decode(blob, syms.size, model, shape=syms.shape)
        assert np.array_equal(back, syms)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        model = em.FixedCdfModel(make_laplacian_pmf(3.0, width=64, first=-32), first_symbol=-32)
        syms = rng.integers(-32, 32, size=5000)
        assert em.range_encode(syms, model) == em.range_encode(syms.copy(), model)


class TestCodelength:
    def test_million_symbols_near_shannon(self):
        rng = np.random.default_rng(7)
        model = em.FixedCdfModel(make_laplacian_pmf(8.0), first_symbol=-128)
        freqs = np.diff(model.cdf.astype(np.int64), axis=1)[0]
        p = freqs / rc.CDF_TOTAL
        syms = rng.choice(np.arange(-128, 128), size=1_000_000, p=p)
        blob = em.range_encode(syms, model)
        # independent oracle: exact -sum log2 p over the sampled symbols
        counts = np.bincount(syms + 128, minlength=256)
        ideal_bits = float(-(counts * np.log2(p)).sum())
        coded_bits = 8 * len(blob)
        assert coded_bits <= ideal_bits * 1.01
        assert coded_bits >= ideal_bits - 8  # no free lunch

    def test_peaked_beats_uniform_on_zeros(self):
        peaked = em.FixedCdfModel(make_laplacian_pmf(0.8, width=64, first=-32), first_symbol=-32)
        uniform = em.FixedCdfModel(np.full(64, 1 / 64), first_symbol=-32)
        zeros = np.zeros(4000, dtype=np.int64)
        assert len(em.range_encode(zeros, peaked)) < len(em.range_encode(zeros, uniform))

    def test_estimate_matches_encoder(self):
        rng = np.random.default_rng(11)
        for trial in range(10):
            width = int(rng.integers(8, 200))
            model = em.FixedCdfModel(rng.random(width) + 1e-5)
            syms = rng.integers(0, width, size=int(rng.integers(200, 3000)))
            ideal = em.estimate_bits(syms, model)
            coded = 8 * len(em.range_encode(syms, model))
            assert coded <= ideal * 1.001 + 16
            assert coded >= ideal - 8

    def test_estimate_uniform_256(self):
        model = em.FixedCdfModel(np.full(256, 1 / 256))
        syms = np.zeros(1000, dtype=np.int64)
        assert em.estimate_bits(syms, model) == pytest.approx(8000.0, abs=1e-9)

    def test_estimate_single_half_probability(self):
        model = em.FixedCdfModel(np.array([0.5, 0.5]))
        assert em.estimate_bits(np.array([1]), model) == pytest.approx(1.0, abs=1e-9)

    def test_short_stream_overhead_small(self):
        model = em.FixedCdfModel(np.full(16, 1 / 16))
        syms = np.zeros(100, dtype=np.int64)  # ideal 400 bits = 50 bytes
        blob = em.range_encode(syms, model)
        assert len(blob) <= 50 * 1.001 + 2


class TestConditioning:
    def test_informative_condition_beats_factorized(self):
        rng = np.random.default_rng(21)
        wins = 0
        trials = 100
        for _ in range(trials):
            c = rng.normal(0, 4.0, (1, 16, 16))
            y = c + rng.normal(0, 0.6, c.shape)
            syms = ad.round_half_away(y.astype(np.float32)).astype(np.int64)
            conditioned = em.ExplicitGaussian(c, np.full(c.shape, 0.8))
            factorized = em.ExplicitGaussian(np.zeros(c.shape), np.full(c.shape, float(y.std())))
            if em.estimate_bits(syms, conditioned) <= em.estimate_bits(syms, factorized):
                wins += 1
        assert wins >= 95

    def test_condition_mismatch_detected_by_checksum(self):
        rng = np.random.default_rng(31)
        net_rng = np.random.default_rng(41)
        model = em.ConditionedGaussian(4, 8, 8, net_rng)
        cond_a = Tensor(rng.normal(0, 1, (8, 16, 16)).astype(np.float32))
        cond_b = Tensor(rng.normal(0, 1, (8, 16, 16)).astype(np.float32))
        plan = model.plan((4, 4, 4), cond_a)
        y = rng.normal(0, 2.0, (4, 4, 4))
        syms, _ = __import__("crvcodec.networks", fromlist=["quantize_inference"]).quantize_inference(
            y.astype(np.float32), plan
        )
        syms = syms + plan.base.reshape(syms.shape)
        blob = em.range_encode(syms, model, cond_a)
        back_good = em.range_decode(blob, syms.size, model, cond_a, shape=syms.shape)
        assert np.array_equal(back_good, syms)
        assert rc.symbols_crc(back_good) == rc.symbols_crc(syms)
        back_bad = em.range_decode(blob, syms.size, model, cond_b, shape=syms.shape)
        assert not np.array_equal(back_bad, syms)
        assert rc.symbols_crc(back_bad) != rc.symbols_crc(syms)


class TestBitIO:
    def test_bit_round_trip(self, rng):
        bits = rng.integers(0, 2, size=203)
        w = rc.BitWriter()
        for b in bits:
            w.write_bit(int(b))
        r = rc.BitReader(w.getvalue())
        assert [r.read_bit() for _ in range(bits.size)] == list(bits)

    def test_multibit_values(self):
        w = rc.BitWriter()
        w.write_bits(0b1011, 4)
        w.write_bits(0xABC, 12)
        r = rc.BitReader(w.getvalue())
        assert r.read_bits(4) == 0b1011
        assert r.read_bits(12) == 0xABC

    def test_read_past_end_raises(self):
        r = rc.BitReader(b"\xff")
        r.read_bits(8)
        with pytest.raises(rc.RangeCoderError):
            r.read_bit()


class TestChunkFraming:
    def test_round_trip(self):
        payload = b"hello range coder"
        blob = rc.frame_chunk(payload, 0xDEADBEEF)
        got, crc, end = rc.read_chunk(blob, 0)
        assert got == payload and crc == 0xDEADBEEF and end == len(blob)

    def test_truncation_reports_offset(self):
        blob = rc.frame_chunk(b"x" * 40, 1)[:20]
        with pytest.raises(rc.ChunkError) as ei:
            rc.read_chunk(blob, 0)
        assert "offset 0" in str(ei.value)

    def test_two_chunks_sequential(self):
        blob = rc.frame_chunk(b"aa", 1) + rc.frame_chunk(b"bbb", 2)
        p1, c1, off = rc.read_chunk(blob, 0)
        p2, c2, off = rc.read_chunk(blob, off)
        assert (p1, c1, p2, c2) == (b"aa", 1, b"bbb", 2)
        assert off == len(blob)
