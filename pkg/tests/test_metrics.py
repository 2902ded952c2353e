import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy.interpolate import pchip_interpolate

from crvcodec import media, metrics
from crvcodec.metrics import RDCurve


class TestPsnr:
    def test_identical_frames_infinite(self, rng):
        f = rng.random((3, 8, 8)).astype(np.float32)
        assert metrics.psnr_rgb(f, f) == math.inf
        assert metrics.cap_psnr(math.inf) == 99.0

    def test_uniform_one_lsb_closed_form(self):
        a = np.full((3, 16, 16), 0.5, np.float32)
        b = a + np.float32(1 / 255)
        assert metrics.psnr_rgb(a, b) == pytest.approx(20 * math.log10(255), abs=1e-4)

    def test_matches_double_precision_formula(self, rng):
        a = rng.random((3, 12, 12)).astype(np.float32)
        b = rng.random((3, 12, 12)).astype(np.float32)
        mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
        want = 10 * math.log10(1 / mse)
        assert metrics.psnr_rgb(a, b) == pytest.approx(want, abs=1e-9)

    def test_symmetry(self, rng):
        a = rng.random((3, 8, 8)).astype(np.float32)
        b = rng.random((3, 8, 8)).astype(np.float32)
        assert metrics.psnr_rgb(a, b) == metrics.psnr_rgb(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(metrics.MetricError):
            metrics.psnr_rgb(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


FIXTURE_ANCHOR = RDCurve("fix", [(0.05, 30.1), (0.11, 32.4), (0.24, 34.9), (0.55, 37.3)])
FIXTURE_TEST = RDCurve("fix", [(0.04, 30.5), (0.08, 32.2), (0.18, 35.1), (0.42, 37.6)])


class TestBdRate:
    def test_identical_curves_zero(self):
        assert metrics.bd_rate(FIXTURE_ANCHOR, FIXTURE_ANCHOR) == 0.0

    def test_rate_doubling_is_plus_100(self):
        doubled = RDCurve("fix", [(2 * b, p) for b, p in FIXTURE_ANCHOR.points])
        assert metrics.bd_rate(FIXTURE_ANCHOR, doubled) == pytest.approx(100.0, abs=1e-6)
        halved = RDCurve("fix", [(0.5 * b, p) for b, p in FIXTURE_ANCHOR.points])
        assert metrics.bd_rate(FIXTURE_ANCHOR, halved) == pytest.approx(-50.0, abs=1e-6)

    def test_matches_dense_trapezoid_oracle(self):
        got = metrics.bd_rate(FIXTURE_ANCHOR, FIXTURE_TEST)
        qa, ra = FIXTURE_ANCHOR.psnr, np.log10(FIXTURE_ANCHOR.bpp)
        qt, rt = FIXTURE_TEST.psnr, np.log10(FIXTURE_TEST.bpp)
        lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
        xs = np.linspace(lo, hi, 10_000)
        va = pchip_interpolate(qa, ra, xs)
        vt = pchip_interpolate(qt, rt, xs)
        avg = np.trapezoid(vt - va, xs) / (hi - lo)
        want = (10 ** avg - 1) * 100
        assert got == pytest.approx(want, rel=5e-4)

    def test_antisymmetry_in_log_domain(self):
        fwd = metrics.bd_rate(FIXTURE_ANCHOR, FIXTURE_TEST)
        rev = metrics.bd_rate(FIXTURE_TEST, FIXTURE_ANCHOR)
        assert (1 + fwd / 100) * (1 + rev / 100) == pytest.approx(1.0, rel=5e-3)

    def test_too_few_points(self):
        short = RDCurve("s", [(0.1, 30.0), (0.2, 32.0), (0.3, 34.0)])
        with pytest.raises(metrics.MetricError):
            metrics.bd_rate(short, short)

    def test_insufficient_overlap_names_ranges(self):
        low = RDCurve("lo", [(0.05, 20.0), (0.1, 21.0), (0.2, 22.0), (0.4, 23.0)])
        high = RDCurve("hi", [(0.05, 30.0), (0.1, 31.0), (0.2, 32.0), (0.4, 33.0)])
        with pytest.raises(metrics.MetricError) as ei:
            metrics.bd_rate(low, high)
        assert "20" in str(ei.value) and "30" in str(ei.value)

    def test_curve_validation(self):
        with pytest.raises(metrics.MetricError):
            RDCurve("x", [(0.1, 30.0), (0.1, 31.0)])  # non-increasing bpp
        with pytest.warns(UserWarning):
            RDCurve("x", [(0.1, 32.0), (0.2, 31.0), (0.3, 33.0), (0.4, 34.0)])
        with pytest.warns(UserWarning):
            RDCurve("x", [(0.1, 30.0), (0.2, math.inf), (0.3, 33.0), (0.4, 34.0)])


class TestDatasetAverage:
    def test_mean(self):
        assert metrics.dataset_average([-10.0, -20.0]) == -15.0
        assert metrics.dataset_average([-7.5]) == -7.5

    def test_empty_rejected(self):
        with pytest.raises(metrics.MetricError):
            metrics.dataset_average([])

    def test_per_sequence_averaging_differs_from_pooling(self):
        # constructed counterexample: pooling RD points across sequences gives
        # a different number than averaging per-sequence BD-rates
        a1 = RDCurve("s1", [(0.10, 30.0), (0.20, 32.0), (0.40, 34.0), (0.80, 36.0)])
        t1 = RDCurve("s1", [(0.05, 30.0), (0.10, 32.0), (0.20, 34.0), (0.40, 36.0)])
        a2 = RDCurve("s2", [(0.12, 30.5), (0.24, 32.5), (0.48, 34.5), (0.96, 36.5)])
        t2 = RDCurve("s2", [(0.12, 30.5), (0.24, 32.5), (0.48, 34.5), (0.96, 36.5)])
        averaged = metrics.dataset_average([metrics.bd_rate(a1, t1), metrics.bd_rate(a2, t2)])
        with pytest.warns(UserWarning):
            pooled_anchor = RDCurve("pool", a1.points + a2.points)
            pooled_test = RDCurve("pool", t1.points + t2.points)
        pooled = metrics.bd_rate(pooled_anchor, pooled_test)
        assert averaged == pytest.approx(-25.0, abs=1e-6)
        assert abs(averaged - pooled) > 1.0


class TestTemporalComplexity:
    def test_static_zero(self):
        f = media.generate_synthetic(media.SyntheticSpec(32, 32, 1, (0, 0), 0.0), 5)
        assert metrics.temporal_complexity(f) == 0.0

    def test_pan_exceeds_static(self):
        static = media.generate_synthetic(media.synthetic_spec("static", 48, 48, 3), 10)
        pan = media.generate_synthetic(media.synthetic_spec("pan", 48, 48, 3), 10)
        assert metrics.temporal_complexity(pan) > metrics.temporal_complexity(static)

    def test_amplitude_linearity(self, rng):
        frames = media.generate_synthetic(media.synthetic_spec("pan", 32, 32, 5), 6)
        full = metrics.temporal_complexity(frames)
        half = metrics.temporal_complexity(0.5 * frames)
        assert half == pytest.approx(0.5 * full, rel=1e-6)

    def test_translation_invariance_within_5pct(self):
        frames = media.generate_synthetic(media.synthetic_spec("pan", 64, 64, 6), 8)
        shifted = np.roll(frames, (5, 3), axis=(2, 3))
        base = metrics.temporal_complexity(frames)
        moved = metrics.temporal_complexity(shifted)
        assert abs(moved - base) / base <= 0.05

    def test_requires_two_frames(self):
        with pytest.raises(metrics.MetricError):
            metrics.temporal_complexity(np.zeros((1, 3, 16, 16), np.float32))


class TestEntropyProbe:
    def test_perfect_predictor(self):
        out = metrics.entropy_ordering_probe(1.0, trials=20, seed=1)
        n = 24 * 24
        assert out["residual_bits"] / n < 0.1  # near-minimal
        assert out["conditional_residual_bits"] / n < 0.1
        assert out["cres_le_conditional_fraction"] >= 0.95

    def test_useless_predictor(self):
        out = metrics.entropy_ordering_probe(0.0, trials=30, seed=2)
        # condition carries nothing: conditional cost matches coding the raw source
        assert out["conditional_bits"] == pytest.approx(out["residual_bits"], rel=0.15)

    def test_zero_variance_source(self):
        out = metrics.entropy_ordering_probe(0.9, trials=5, amplitude=0.0, seed=3)
        n = 24 * 24
        assert out["residual_bits"] / n < 0.01
        assert out["conditional_bits"] / n < 0.01

    def test_orderings_hold_with_bottleneck(self):
        out = metrics.entropy_ordering_probe(0.9, trials=100, bottleneck_sigma=1.0, seed=4)
        assert out["cres_le_residual_fraction"] >= 0.95
        assert out["cres_le_conditional_fraction"] >= 0.95
        assert out["conditional_residual_bits"] <= out["residual_bits"]
        assert out["conditional_residual_bits"] <= out["conditional_bits"]


class TestReports:
    def test_empty_results_header_only(self, tmp_path):
        metrics.emit_reports([], [], [], tmp_path)
        assert (tmp_path / "rd_points.csv").read_text().strip() == ",".join(metrics.RD_POINTS_HEADER)

    def test_csv_round_trip_exact(self, tmp_path):
        rows = [("v1", "seq", 256, 0.12345678901234567, 31.000000001)]
        metrics.emit_reports(rows, [], [], tmp_path)
        with open(tmp_path / "rd_points.csv") as f:
            got = list(csv.DictReader(f))[0]
        assert float(got["bpp"]) == rows[0][3]
        assert float(got["psnr_db"]) == rows[0][4]
        assert int(got["lambda"]) == 256

    def test_plot_structure(self, tmp_path):
        rd_rows = []
        for variant, base in [("a", 0.1), ("b", 0.08)]:
            for i, lmb in enumerate([256, 512, 1024, 2048]):
                rd_rows.append((variant, "seq0", lmb, base * (1 + i), 30.0 + 2 * i))
        written = metrics.emit_reports(rd_rows, [("a", "seq0", -5.0, 1.2)], [], tmp_path)
        svg = (tmp_path / "rd_seq0.svg").read_text()
        root = ET.fromstring(svg)
        ns = "{http://www.w3.org/2000/svg}"
        polylines = root.findall(f"{ns}polyline")
        assert len(polylines) == 2
        for pl in polylines:
            assert len(pl.attrib["points"].split()) == 4
        assert (tmp_path / "bd_vs_temporal_complexity.svg").exists()

    def test_deterministic_bytes(self, tmp_path):
        rows = [("v", "s", 512, 0.25, 33.5)]
        bd = [("v", "s", -3.25, 0.75)]
        prof = [("v", 100.5, 80.25, 0.125, 6)]
        metrics.emit_reports(rows, bd, prof, tmp_path / "a")
        metrics.emit_reports(rows, bd, prof, tmp_path / "b")
        for name in ["rd_points.csv", "bd_rates.csv", "profile.csv", "rd_s.svg"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
