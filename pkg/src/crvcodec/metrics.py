"""Measurement suite: PSNR-RGB, BD-rate, temporal complexity, the
residual/conditional/conditional-residual entropy probe, and report files.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as _fft
from scipy.interpolate import PchipInterpolator

from . import autodiff as ad
from . import entropy_models as em

PSNR_CAP_DB = 99.0


class MetricError(ValueError):
    """Raised on invalid metric inputs."""


def psnr_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over all samples of two [0,1] RGB frames; inf if equal."""
    a = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
    b = b.data if isinstance(b, ad.Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"psnr_rgb: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP_DB)


@dataclass
class RDCurve:
    """(bpp, PSNR) points for one sequence, one per rate point, bpp ascending."""

    sequence: str
    points: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        finite = [(b, p) for b, p in self.points if math.isfinite(p)]
        if len(finite) != len(self.points):
            warnings.warn(f"RDCurve {self.sequence}: dropping non-finite PSNR points")
        self.points = sorted(finite)
        bpps = [b for b, _ in self.points]
        if any(b <= 0 for b in bpps):
            raise MetricError(f"RDCurve {self.sequence}: bpp must be positive")
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise MetricError(f"RDCurve {self.sequence}: bpp values must be strictly increasing")
        psnrs = [p for _, p in self.points]
        if any(p2 < p1 for p1, p2 in zip(psnrs, psnrs[1:])):
            warnings.warn(f"RDCurve {self.sequence}: PSNR not monotonically non-decreasing")

    @property
    def bpp(self) -> np.ndarray:
        return np.array([b for b, _ in self.points], dtype=np.float64)

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p for _, p in self.points], dtype=np.float64)


def _dedupe_quality(q: np.ndarray, r: np.ndarray):
    # PCHIP needs strictly increasing x: sort by PSNR, drop duplicates.
    order = np.argsort(q, kind="stable")
    q, r = q[order], r[order]
    keep = np.concatenate([[True], np.diff(q) > 0])
    if not keep.all():
        warnings.warn("bd_rate: dropping points with duplicate PSNR")
    return q[keep], r[keep]


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Bjontegaard delta-rate of test vs anchor, in percent (negative saves rate).

    Piecewise-cubic-Hermite (monotone) interpolation of log10(bpp) as a
    function of PSNR, integrated exactly over the common PSNR interval.
    """
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise MetricError(f"bd_rate: curve {curve.sequence!r} has {len(curve.points)} < 4 points")
    qa, ra = _dedupe_quality(anchor.psnr, np.log10(anchor.bpp))
    qt, rt = _dedupe_quality(test.psnr, np.log10(test.bpp))
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi - lo < 1.0:
        raise MetricError(
            f"bd_rate: insufficient PSNR overlap: anchor [{qa.min():.3f}, {qa.max():.3f}] dB "
            f"vs test [{qt.min():.3f}, {qt.max():.3f}] dB"
        )
    ia = PchipInterpolator(qa, ra).antiderivative()
    it = PchipInterpolator(qt, rt).antiderivative()
    avg_diff = ((it(hi) - it(lo)) - (ia(hi) - ia(lo))) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


def dataset_average(per_sequence_bd: list[float]) -> float:
    """Mean of per-sequence BD-rates (the protocol averages sequences, not points)."""
    if not per_sequence_bd:
        raise MetricError("dataset_average: empty input")
    return float(np.mean(per_sequence_bd))


def _rgb_to_luma(frame: np.ndarray) -> np.ndarray:
    return 0.2126 * frame[0] + 0.7152 * frame[1] + 0.0722 * frame[2]


def _block_texture_energy(luma: np.ndarray, block: int = 8) -> np.ndarray:
    h, w = luma.shape
    hb, wb = h - h % block, w - w % block
    blocks = luma[:hb, :wb].reshape(hb // block, block, wb // block, block).transpose(0, 2, 1, 3)
    coeffs = _fft.dctn(blocks.astype(np.float64), type=2, norm="ortho", axes=(2, 3))
    mags = np.abs(coeffs)
    return mags.sum(axis=(2, 3)) - mags[:, :, 0, 0]  # drop DC


def temporal_complexity(frames: np.ndarray) -> float:
    """Mean absolute change of blockwise high-frequency texture energy.

    Per frame pair: 8x8 luma blocks, DCT magnitude energy excluding DC,
    averaged |difference| across blocks, then averaged over pairs.
    """
    if len(frames) < 2:
        raise MetricError(f"temporal_complexity needs >= 2 frames, got {len(frames)}")
    energies = np.stack([_block_texture_energy(_rgb_to_luma(np.asarray(f, dtype=np.float64))) for f in frames])
    return float(np.abs(np.diff(energies, axis=0)).mean())


def entropy_ordering_probe(
    predictor_quality: float,
    trials: int,
    bottleneck_sigma: float = 1.0,
    field_hw: tuple[int, int] = (24, 24),
    amplitude: float = 4.0,
    seed: int = 0,
) -> dict[str, float]:
    """Compare coding costs of residual, conditional, and conditional-residual setups.

    Each trial draws a Gaussian source x and a correlated temporal predictor p
    (correlation = predictor_quality).  The codec-visible condition is p
    degraded by bottleneck noise.  Three ideal-model codelengths are measured:
    the residual x-p under its marginal, x under the condition-derived
    posterior, and x-p under the condition-derived posterior.
    """
    if trials < 1:
        raise MetricError("entropy_ordering_probe needs trials >= 1")
    rho = float(np.clip(predictor_quality, 0.0, 1.0))
    a2 = amplitude * amplitude
    nv = bottleneck_sigma * bottleneck_sigma  # bottleneck noise variance / a2
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0BE]))

    var_res = 2.0 * a2 * (1.0 - rho)
    var_cond = a2 * (1.0 - rho * rho / (1.0 + nv))
    var_cres = var_res - a2 * (1.0 - rho) ** 2 / (1.0 + nv)
    k_cond = rho / (1.0 + nv)
    k_cres = (rho - 1.0) / (1.0 + nv)

    res_bits = np.empty(trials)
    cond_bits = np.empty(trials)
    cres_bits = np.empty(trials)
    for t in range(trials):
        x = amplitude * rng.standard_normal(field_hw)
        e = amplitude * rng.standard_normal(field_hw)
        p = rho * x + math.sqrt(max(0.0, 1.0 - rho * rho)) * e
        c = p + amplitude * bottleneck_sigma * rng.standard_normal(field_hw)
        r = x - p
        syms_r = ad.round_half_away(r.astype(np.float32)).astype(np.int64)
        syms_x = ad.round_half_away(x.astype(np.float32)).astype(np.int64)
        m_res = em.ExplicitGaussian(np.zeros(field_hw), np.full(field_hw, math.sqrt(max(var_res, 1e-12))))
        m_cond = em.ExplicitGaussian(k_cond * c, np.full(field_hw, math.sqrt(max(var_cond, 1e-12))))
        m_cres = em.ExplicitGaussian(k_cres * c, np.full(field_hw, math.sqrt(max(var_cres, 1e-12))))
        res_bits[t] = em.estimate_bits(syms_r, m_res)
        cond_bits[t] = em.estimate_bits(syms_x, m_cond)
        cres_bits[t] = em.estimate_bits(syms_r, m_cres)

    return {
        "residual_bits": float(res_bits.mean()),
        "conditional_bits": float(cond_bits.mean()),
        "conditional_residual_bits": float(cres_bits.mean()),
        "cres_le_residual_fraction": float(np.mean(cres_bits <= res_bits + 1e-9)),
        "cres_le_conditional_fraction": float(np.mean(cres_bits <= cond_bits + 1e-9)),
    }


# -- report emission -------------------------------------------------------------

RD_POINTS_HEADER = ["variant", "sequence", "lambda", "bpp", "psnr_db"]
BD_RATES_HEADER = ["variant", "sequence", "bd_rate_pct", "temporal_complexity"]
PROFILE_HEADER = ["variant", "enc_kmacs", "dec_kmacs", "params_m", "buffer_channels"]


def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _svg_header(width, height):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
    )


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def _axis_transform(vals, lo_px, hi_px):
    vmin, vmax = float(min(vals)), float(max(vals))
    span = vmax - vmin if vmax > vmin else 1.0

    def f(v):
        return lo_px + (float(v) - vmin) / span * (hi_px - lo_px)

    return f


def rd_plot_svg(curves: dict[str, list[tuple[float, float]]], title: str) -> str:
    """One polyline per variant over (bpp, PSNR) axes."""
    w, h, m = 640, 480, 60
    all_pts = [pt for pts in curves.values() for pt in pts]
    xs = [p[0] for p in all_pts] or [0, 1]
    ys = [p[1] for p in all_pts] or [0, 1]
    fx = _axis_transform(xs, m, w - m)
    fy = _axis_transform(ys, h - m, m)
    out = [_svg_header(w, h)]
    out.append(f'<text x="{w//2}" y="24" text-anchor="middle" font-size="16">{title}</text>\n')
    out.append(f'<line x1="{m}" y1="{h-m}" x2="{w-m}" y2="{h-m}" stroke="black"/>\n')
    out.append(f'<line x1="{m}" y1="{h-m}" x2="{m}" y2="{m}" stroke="black"/>\n')
    out.append(f'<text x="{w//2}" y="{h-16}" text-anchor="middle" font-size="12">bpp</text>\n')
    out.append(f'<text x="16" y="{h//2}" font-size="12" transform="rotate(-90 16 {h//2})">PSNR-RGB (dB)</text>\n')
    for i, (name, pts) in enumerate(sorted(curves.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{fx(x):.2f},{fy(y):.2f}" for x, y in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>\n')
        out.append(f'<text x="{w-m+4}" y="{m + 14*i + 10}" font-size="11" fill="{color}">{name}</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def scatter_plot_svg(points: list[tuple[float, float, str]], title: str, xlabel: str, ylabel: str) -> str:
    w, h, m = 640, 480, 60
    xs = [p[0] for p in points] or [0, 1]
    ys = [p[1] for p in points] or [0, 1]
    fx = _axis_transform(xs, m, w - m)
    fy = _axis_transform(ys, h - m, m)
    out = [_svg_header(w, h)]
    out.append(f'<text x="{w//2}" y="24" text-anchor="middle" font-size="16">{title}</text>\n')
    out.append(f'<line x1="{m}" y1="{h-m}" x2="{w-m}" y2="{h-m}" stroke="black"/>\n')
    out.append(f'<line x1="{m}" y1="{h-m}" x2="{m}" y2="{m}" stroke="black"/>\n')
    out.append(f'<text x="{w//2}" y="{h-16}" text-anchor="middle" font-size="12">{xlabel}</text>\n')
    out.append(f'<text x="16" y="{h//2}" font-size="12" transform="rotate(-90 16 {h//2})">{ylabel}</text>\n')
    for x, y, label in points:
        out.append(f'<circle cx="{fx(x):.2f}" cy="{fy(y):.2f}" r="4" fill="#1f77b4"/>\n')
        out.append(f'<text x="{fx(x)+6:.2f}" y="{fy(y)-6:.2f}" font-size="10">{label}</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def emit_reports(rd_rows, bd_rows, profile_rows, outdir) -> list[Path]:
    """Write rd_points.csv, bd_rates.csv, profile.csv, RD plots, and the
    BD-rate vs temporal-complexity scatter; returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    p = outdir / "rd_points.csv"
    _write_csv(p, RD_POINTS_HEADER, rd_rows)
    written.append(p)
    p = outdir / "bd_rates.csv"
    _write_csv(p, BD_RATES_HEADER, bd_rows)
    written.append(p)
    p = outdir / "profile.csv"
    _write_csv(p, PROFILE_HEADER, profile_rows)
    written.append(p)

    sequences = sorted({r[1] for r in rd_rows})
    for seq in sequences:
        curves: dict[str, list[tuple[float, float]]] = {}
        for variant, s, _lmb, bpp, psnr in rd_rows:
            if s == seq:
                curves.setdefault(variant, []).append((float(bpp), float(psnr)))
        p = outdir / f"rd_{seq}.svg"
        p.write_text(rd_plot_svg(curves, f"rate-distortion: {seq}"))
        written.append(p)

    scatter = [(float(tc), float(bd), f"{v}:{s}") for v, s, bd, tc in bd_rows]
    p = outdir / "bd_vs_temporal_complexity.svg"
    p.write_text(scatter_plot_svg(scatter, "BD-rate vs temporal complexity", "temporal complexity", "BD-rate (%)"))
    written.append(p)
    return written
