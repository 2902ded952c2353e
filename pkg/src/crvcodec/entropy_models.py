"""Parametric symbol models shared by the motion, intra, and inter codecs.

Two trainable families exist: a factorized Laplacian with per-channel
location/scale, and a conditioned Gaussian whose per-element mean/scale
come from a small conv net applied to a condition feature map.  At coding
time both map each element to a row of a precomputed CDF table indexed by
quantized (scale, mean-fraction) buckets, so encoder, decoder, and
codelength estimates all see the identical 16-bit distribution.

Symbols are coded relative to the rounded predicted mean over the clamped
support [-64, 63]; no codeable symbol ever has zero probability.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

from . import autodiff as ad
from .autodiff import Tensor
from . import rangecoder as rc

SUPPORT_LO = -64
SUPPORT_HI = 63
SUPPORT = SUPPORT_HI - SUPPORT_LO + 1

SCALE_FLOOR = 0.04
_SCALE_HI = 64.0
_N_SCALE_BUCKETS = 64
_N_DELTA_BUCKETS = 33

_LOG2E = float(np.log2(np.e))


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Quantize pmf rows to cumulative uint32 tables totalling 2**16.

    Every bin keeps a frequency of at least 1 (probability 2**-16), so any
    in-support symbol stays codeable.  Deterministic largest-remainder
    rounding distributes the leftover mass.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    n_rows, width = pmf.shape
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    scaled = pmf * (rc.CDF_TOTAL - width)
    freqs = np.floor(scaled).astype(np.int64) + 1
    rem = scaled - np.floor(scaled)
    cdf = np.zeros((n_rows, width + 1), dtype=np.uint32)
    for r in range(n_rows):
        deficit = rc.CDF_TOTAL - int(freqs[r].sum())
        if deficit > 0:
            order = np.argsort(-rem[r], kind="stable")
            freqs[r, order[:deficit]] += 1
        cdf[r, 1:] = np.cumsum(freqs[r])
    return cdf


def _gaussian_edge_cdf(edges: np.ndarray, delta: float, sigma: float) -> np.ndarray:
    return _special.ndtr((edges - delta) / sigma)


def _laplacian_edge_cdf(edges: np.ndarray, delta: float, sigma: float) -> np.ndarray:
    z = (edges - delta) / sigma
    e = 0.5 * np.exp(-np.abs(z))
    return np.where(z < 0, e, 1.0 - e)


_EDGE_CDF = {"gaussian": _gaussian_edge_cdf, "laplacian": _laplacian_edge_cdf}

_table_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _bucket_grid():
    log_ratio = np.log(_SCALE_HI / SCALE_FLOOR)
    scales = SCALE_FLOOR * np.exp(np.arange(_N_SCALE_BUCKETS) / (_N_SCALE_BUCKETS - 1) * log_ratio)
    deltas = -0.5 + np.arange(_N_DELTA_BUCKETS) / (_N_DELTA_BUCKETS - 1)
    return scales, deltas


def coding_tables(kind: str) -> np.ndarray:
    """CDF table with one row per (scale bucket, delta bucket) pair."""
    key = (kind, SCALE_FLOOR, _N_SCALE_BUCKETS, _N_DELTA_BUCKETS)
    if key in _table_cache:
        return _table_cache[key]
    scales, deltas = _bucket_grid()
    edges = np.arange(SUPPORT_LO, SUPPORT_HI + 2, dtype=np.float64) - 0.5
    edge_cdf = _EDGE_CDF[kind]
    pmf = np.empty((_N_SCALE_BUCKETS * _N_DELTA_BUCKETS, SUPPORT), dtype=np.float64)
    for si, s in enumerate(scales):
        for di, d in enumerate(deltas):
            c = edge_cdf(edges, d, s)
            c[0] = 0.0
            c[-1] = 1.0
            pmf[si * _N_DELTA_BUCKETS + di] = np.diff(c)
    table = quantize_pmf(pmf)
    _table_cache[key] = table
    return table


def _bucket_rows(mu: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map per-element (mu, sigma) to (base integer mean, CDF row index)."""
    base = ad.round_half_away(mu.astype(np.float32)).astype(np.int64)
    delta = mu.astype(np.float64) - base
    sig = np.clip(sigma.astype(np.float64), SCALE_FLOOR, _SCALE_HI)
    log_ratio = np.log(_SCALE_HI / SCALE_FLOOR)
    s_idx = np.clip(
        np.rint(np.log(sig / SCALE_FLOOR) / log_ratio * (_N_SCALE_BUCKETS - 1)), 0, _N_SCALE_BUCKETS - 1
    ).astype(np.int64)
    d_idx = np.clip(np.rint((delta + 0.5) * (_N_DELTA_BUCKETS - 1)), 0, _N_DELTA_BUCKETS - 1).astype(np.int64)
    return base, s_idx * _N_DELTA_BUCKETS + d_idx


class CodingPlan:
    """Frozen per-element coding distributions for one symbol batch."""

    __slots__ = ("cdf", "rows", "base", "lo", "hi")

    def __init__(self, cdf, rows, base, lo, hi):
        self.cdf = cdf
        self.rows = rows
        self.base = base
        self.lo = lo
        self.hi = hi

    def to_indices(self, symbols: np.ndarray) -> np.ndarray:
        rel = np.clip(symbols.reshape(-1).astype(np.int64) - self.base, self.lo, self.hi)
        return rel - self.lo

    def from_indices(self, idx: np.ndarray) -> np.ndarray:
        return idx + self.lo + self.base


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _softplus_t(x: Tensor) -> Tensor:
    return ad.add(ad.leaky_relu(x, 0.0), ad.log(ad.add_scalar(ad.exp(ad.scale(ad.absolute(x), -1.0)), 1.0)))


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class FactorizedLaplacian:
    """Per-channel Laplacian over (C,H,W) symbols; parameters are trainable."""

    kind = "laplacian"

    def __init__(self, channels: int, init_scale: float = 1.0):
        self.channels = channels
        self.loc = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.raw_scale = Tensor(
            np.full(channels, _inv_softplus(init_scale), np.float32), requires_grad=True
        )

    def parameters(self):
        return [self.loc, self.raw_scale]

    def named_parameters(self, prefix: str):
        return {f"{prefix}/0/weight": self.loc, f"{prefix}/1/weight": self.raw_scale}

    def _maps(self, shape):
        if len(shape) != 3 or shape[0] != self.channels:
            raise ad.ShapeError(f"symbols shape {shape} incompatible with {self.channels}-channel model")
        mu = np.broadcast_to(self.loc.data[:, None, None], shape)
        sigma = SCALE_FLOOR + _softplus_np(self.raw_scale.data.astype(np.float64))
        sigma = np.broadcast_to(sigma[:, None, None], shape)
        return mu, sigma

    def plan(self, shape, condition=None) -> CodingPlan:
        mu, sigma = self._maps(shape)
        base, rows = _bucket_rows(mu.reshape(-1), sigma.reshape(-1))
        return CodingPlan(coding_tables(self.kind), rows, base, SUPPORT_LO, SUPPORT_HI)

    def bits_tensor(self, noisy: Tensor, condition=None) -> Tensor:
        """Differentiable codelength of noise-quantized values, in bits."""
        scale = ad.add_scalar(_softplus_t(self.raw_scale), SCALE_FLOOR)
        bmap = _broadcast_channels(scale, noisy.shape)
        locmap = _broadcast_channels(self.loc, noisy.shape)
        return _laplacian_bits(ad.sub(noisy, locmap), bmap)


def _broadcast_channels(per_channel: Tensor, shape) -> Tensor:
    """Expand a (C,) tensor to (C,H,W) with gradient summed back per channel."""
    c = shape[0]
    n = int(np.prod(shape[1:]))
    data = np.repeat(per_channel.data[:, None], n, axis=1).reshape(shape)

    def bwd(g):
        if per_channel.requires_grad:
            ad._accum(per_channel, g.reshape(c, -1).sum(axis=1))

    return Tensor._from_op(data, (per_channel,), bwd)


def _laplacian_bits(centered: Tensor, b: Tensor) -> Tensor:
    """-log2 P(centered) under Laplace(0, b) integrated over +-1/2 bins."""
    half = Tensor(np.full(centered.shape, 0.5, np.float32))
    hi = _laplace_cdf(ad.div(ad.add(centered, half), b))
    lo = _laplace_cdf(ad.div(ad.sub(centered, half), b))
    p = ad.clamp(ad.sub(hi, lo), 1e-9, 1.0)
    return ad.scale(ad.tsum(ad.log(p)), -_LOG2E)


def _laplace_cdf(z: Tensor) -> Tensor:
    # F(z) = 0.5 e^z for z<0, 1 - 0.5 e^-z otherwise, via a constant mask.
    pos = Tensor((z.data >= 0).astype(np.float32))
    neg = Tensor((z.data < 0).astype(np.float32))
    e = ad.exp(ad.scale(ad.absolute(z), -1.0))
    return ad.add(pos, ad.mul(ad.sub(neg, pos), ad.scale(e, 0.5)))


def _gaussian_bits(centered: Tensor, sigma: Tensor) -> Tensor:
    half = Tensor(np.full(centered.shape, 0.5, np.float32))
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    hi = ad.erf(ad.scale(ad.div(ad.add(centered, half), sigma), inv_sqrt2))
    lo = ad.erf(ad.scale(ad.div(ad.sub(centered, half), sigma), inv_sqrt2))
    p = ad.clamp(ad.scale(ad.sub(hi, lo), 0.5), 1e-9, 1.0)
    return ad.scale(ad.tsum(ad.log(p)), -_LOG2E)


class ConditionedGaussian:
    """Gaussian whose per-element mean/scale come from a conv net on a condition map.

    The condition enters at full resolution and is pooled down to the latent
    grid inside the net (two 2x pooling stages), then a 3x3 conv stack emits
    2*latent_channels maps interpreted as (mean, raw scale).
    """

    kind = "gaussian"

    def __init__(self, latent_channels: int, cond_channels: int, hidden: int, rng, downsamples: int = 2):
        from .networks import ConvLayer  # deferred: networks imports this module

        self.latent_channels = latent_channels
        self.cond_channels = cond_channels
        self.downsamples = downsamples
        self.l0 = ConvLayer(cond_channels, hidden, 3, 1, rng)
        self.l1 = ConvLayer(hidden, 2 * latent_channels, 1, 1, rng)

    def parameters(self):
        return self.l0.parameters() + self.l1.parameters()

    def named_parameters(self, prefix: str):
        out = {}
        out.update(self.l0.named_parameters(f"{prefix}/0"))
        out.update(self.l1.named_parameters(f"{prefix}/1"))
        return out

    def _net(self, condition: Tensor) -> Tensor:
        h = condition
        for _ in range(self.downsamples):
            h = ad.avg_downsample2x(h)
        h = ad.leaky_relu(self.l0(h))
        return self.l1(h)

    def param_tensors(self, condition: Tensor) -> tuple[Tensor, Tensor]:
        raw = self._net(condition)
        mu = ad.narrow(raw, 0, 0, self.latent_channels)
        sigma = ad.add_scalar(_softplus_t(ad.narrow(raw, 0, self.latent_channels, self.latent_channels)), SCALE_FLOOR)
        return mu, sigma

    def plan(self, shape, condition) -> CodingPlan:
        if condition is None:
            raise ValueError("conditioned model requires a condition feature map")
        with ad.no_grad():
            mu, sigma = self.param_tensors(condition)
        if tuple(mu.shape) != tuple(shape):
            raise ad.ShapeError(f"condition-derived parameter shape {mu.shape} != symbols shape {tuple(shape)}")
        base, rows = _bucket_rows(mu.data.reshape(-1), sigma.data.reshape(-1))
        return CodingPlan(coding_tables(self.kind), rows, base, SUPPORT_LO, SUPPORT_HI)

    def bits_tensor(self, noisy: Tensor, condition: Tensor) -> Tensor:
        mu, sigma = self.param_tensors(condition)
        return _gaussian_bits(ad.sub(noisy, mu), sigma)


class ExplicitGaussian:
    """Gaussian with caller-supplied per-element mean/scale maps (no net)."""

    kind = "gaussian"

    def __init__(self, mu: np.ndarray, sigma: np.ndarray):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)

    def plan(self, shape, condition=None) -> CodingPlan:
        mu = np.broadcast_to(self.mu, shape)
        sigma = np.broadcast_to(self.sigma, shape)
        base, rows = _bucket_rows(mu.reshape(-1), sigma.reshape(-1))
        return CodingPlan(coding_tables(self.kind), rows, base, SUPPORT_LO, SUPPORT_HI)


class FixedCdfModel:
    """Arbitrary-support model built from an explicit pmf (row 0 for all symbols)."""

    def __init__(self, pmf: np.ndarray, first_symbol: int = 0):
        pmf = np.asarray(pmf, dtype=np.float64)
        self.cdf = quantize_pmf(pmf[None, :])
        self.first_symbol = first_symbol
        self.width = pmf.shape[-1]

    def plan(self, shape, condition=None) -> CodingPlan:
        n = int(np.prod(shape))
        rows = np.zeros(n, dtype=np.int64)
        base = np.full(n, self.first_symbol, dtype=np.int64)
        return CodingPlan(self.cdf, rows, base, 0, self.width - 1)


# -- spec-level operations ------------------------------------------------------


def range_encode(symbols: np.ndarray, model, condition=None) -> bytes:
    """Encode integer symbols under the model; deterministic bytes out."""
    symbols = np.asarray(symbols)
    plan = model.plan(symbols.shape, condition)
    idx = plan.to_indices(symbols)
    return rc.encode_indices(idx, plan.rows, plan.cdf)


def range_decode(data: bytes, count: int, model, condition=None, shape=None) -> np.ndarray:
    """Decode ``count`` symbols; exact inverse of range_encode for in-support input."""
    shape = (count,) if shape is None else tuple(shape)
    plan = model.plan(shape, condition)
    idx = rc.decode_indices(data, count, plan.rows, plan.cdf)
    return plan.from_indices(idx).reshape(shape)


def estimate_bits(symbols: np.ndarray, model, condition=None) -> float:
    """Ideal codelength -sum log2 p under the model's quantized tables."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return 0.0
    plan = model.plan(symbols.shape, condition)
    idx = plan.to_indices(symbols)
    freqs = plan.cdf[plan.rows, idx + 1].astype(np.int64) - plan.cdf[plan.rows, idx].astype(np.int64)
    return float(-np.sum(np.log2(freqs / rc.CDF_TOTAL)))
