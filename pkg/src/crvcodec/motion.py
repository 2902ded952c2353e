"""Motion estimation, motion coding, and backward warping.

Flow maps are 2xHxW float32: channel 0 horizontal, channel 1 vertical, in
pixels, positive pointing right/down into the reference.  Estimation is
block matching over the channel-averaged frames (integer displacements,
deterministic tie-breaking), smoothed to a dense per-pixel field.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*a, **k):
        if a and callable(a[0]):
            return a[0]
        return lambda f: f

from . import autodiff as ad
from .autodiff import Tensor


@njit(cache=True)
def _warp_gather(f2, i00, i01, i10, i11, wts, out):
    c, n = f2.shape
    for ch in range(c):
        row = f2[ch]
        orow = out[ch]
        for p in range(n):
            orow[p] = (
                row[i00[p]] * wts[0, p]
                + row[i01[p]] * wts[1, p]
                + row[i10[p]] * wts[2, p]
                + row[i11[p]] * wts[3, p]
            )


@njit(cache=True)
def _sad_all_candidates(cur, ref_pad, dys, dxs, block, r, out):
    hp, wp = cur.shape
    nby = hp // block
    nbx = wp // block
    for i in range(dys.shape[0]):
        oy = r + dys[i]
        ox = r + dxs[i]
        for by in range(nby):
            for bx in range(nbx):
                s = np.float32(0.0)
                for y in range(by * block, (by + 1) * block):
                    for x in range(bx * block, (bx + 1) * block):
                        d = cur[y, x] - ref_pad[oy + y, ox + x]
                        s += d if d >= 0 else -d
                out[i, by, bx] = s


def _block_pad(img: np.ndarray, block: int) -> np.ndarray:
    h, w = img.shape
    ph = (-h) % block
    pw = (-w) % block
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    return img


def estimate_flow(current, reference, block: int = 8, search_range: int = 8) -> np.ndarray:
    """Dense flow from block matching current against reference.

    Per block the integer displacement minimizing the SAD of the
    channel-averaged frames wins; ties go to the smallest |dx|+|dy| and
    then raster scan order.  Block vectors are bilinearly interpolated
    from block centers to every pixel.
    """
    cur = current.data if isinstance(current, Tensor) else np.asarray(current)
    ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    if cur.shape != ref.shape:
        raise ad.ShapeError(f"estimate_flow: frame shapes differ {cur.shape} vs {ref.shape}")
    cur_g = _block_pad(cur.mean(axis=0, dtype=np.float64).astype(np.float32), block)
    ref_g = _block_pad(ref.mean(axis=0, dtype=np.float64).astype(np.float32), block)
    hp, wp = cur_g.shape
    nby, nbx = hp // block, wp // block
    r = search_range
    ref_pad = np.pad(ref_g, r, mode="edge")

    # candidate displacements in priority order: cost |dx|+|dy|, then raster
    dys, dxs = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    dys, dxs = dys.ravel(), dxs.ravel()
    order = np.lexsort((np.arange(dys.size), np.abs(dys) + np.abs(dxs)))
    dys, dxs = dys[order], dxs[order]

    sads = np.empty((dys.size, nby, nbx), dtype=np.float32)
    _sad_all_candidates(
        np.ascontiguousarray(cur_g), np.ascontiguousarray(ref_pad),
        np.ascontiguousarray(dys, dtype=np.int64), np.ascontiguousarray(dxs, dtype=np.int64),
        block, r, sads,
    )
    best = sads.reshape(dys.size, -1).argmin(axis=0)  # first occurrence = best priority
    bvx = dxs[best].reshape(nby, nbx).astype(np.float32)
    bvy = dys[best].reshape(nby, nbx).astype(np.float32)

    h, w = cur.shape[1], cur.shape[2]
    fx = _block_grid_to_dense(bvx, block, h, w)
    fy = _block_grid_to_dense(bvy, block, h, w)
    return np.stack([fx, fy]).astype(np.float32)


def _block_grid_to_dense(grid: np.ndarray, block: int, h: int, w: int) -> np.ndarray:
    """Bilinear interpolation from block centers to the pixel grid."""
    nby, nbx = grid.shape
    cy = (np.arange(h) - (block - 1) / 2.0) / block
    cx = (np.arange(w) - (block - 1) / 2.0) / block
    cy = np.clip(cy, 0, nby - 1)
    cx = np.clip(cx, 0, nbx - 1)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, nby - 1)
    x1 = np.minimum(x0 + 1, nbx - 1)
    fy = (cy - y0).astype(np.float32)[:, None]
    fx = (cx - x0).astype(np.float32)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def warp(features: Tensor, flow) -> Tensor:
    """Backward bilinear warp with border clamp.

    out(c, y, x) samples features at (y + fy(y,x), x + fx(y,x)); fractional
    positions are bilinearly blended.  Differentiable in the features and,
    when the flow is a graph tensor, in the flow as well (zero gradient
    where sampling clamps at the border).
    """
    flow_t = flow if isinstance(flow, Tensor) else None
    fl = flow_t.data if flow_t is not None else np.asarray(flow)
    f = features.data
    c, h, w = f.shape
    if fl.shape != (2, h, w):
        raise ad.ShapeError(f"warp: flow shape {fl.shape} must be (2, {h}, {w})")
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx_raw = gx + fl[0]
    sy_raw = gy + fl[1]
    sx = np.clip(sx_raw, 0, w - 1)
    sy = np.clip(sy_raw, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (sx - x0).astype(np.float32)
    ay = (sy - y0).astype(np.float32)
    w00 = (1 - ay) * (1 - ax)
    w01 = (1 - ay) * ax
    w10 = ay * (1 - ax)
    w11 = ay * ax
    f2 = np.ascontiguousarray(f.reshape(c, h * w))
    i00 = np.ascontiguousarray((y0 * w + x0).reshape(-1))
    i01 = np.ascontiguousarray((y0 * w + x1).reshape(-1))
    i10 = np.ascontiguousarray((y1 * w + x0).reshape(-1))
    i11 = np.ascontiguousarray((y1 * w + x1).reshape(-1))
    wts = np.ascontiguousarray(np.stack([w00, w01, w10, w11]).reshape(4, -1))
    out = np.empty((c, h * w), dtype=np.float32)
    _warp_gather(f2, i00, i01, i10, i11, wts, out)
    out = out.reshape(c, h, w)

    idx = np.stack([i00, i01, i10, i11])
    inside_x = ((sx_raw > 0) & (sx_raw < w - 1)).astype(np.float32)
    inside_y = ((sy_raw > 0) & (sy_raw < h - 1)).astype(np.float32)
    parents = (features,) if flow_t is None else (features, flow_t)

    def bwd(g):
        if features.requires_grad:
            # one bincount over (channel, corner, pixel) triples
            chan_off = (np.arange(c, dtype=np.int64) * (h * w))[:, None, None]
            flat_idx = (idx[None, :, :] + chan_off).reshape(-1)
            contrib = (g.reshape(c, 1, -1) * wts[None, :, :]).reshape(-1)
            grad = np.bincount(flat_idx, weights=contrib, minlength=c * h * w)
            ad._accum(features, grad.reshape(c, h, w).astype(np.float32))
        if flow_t is not None and flow_t.requires_grad:
            g00 = np.take(f2, i00, axis=1).reshape(c, h, w)
            g01 = np.take(f2, i01, axis=1).reshape(c, h, w)
            g10 = np.take(f2, i10, axis=1).reshape(c, h, w)
            g11 = np.take(f2, i11, axis=1).reshape(c, h, w)
            ddx = (1 - ay) * (g01 - g00) + ay * (g11 - g10)
            ddy = (1 - ax) * (g10 - g00) + ax * (g11 - g01)
            gfx = (g * ddx).sum(axis=0) * inside_x
            gfy = (g * ddy).sum(axis=0) * inside_y
            ad._accum(flow_t, np.stack([gfx, gfy]).astype(np.float32))

    return Tensor._from_op(out, parents, bwd)


def code_flow(flow: np.ndarray, motion_codec) -> tuple[bytes, np.ndarray]:
    """Quantize the flow to quarter-pel, code it, return (chunk, decoded flow).

    The decoded flow equals what the decoder reconstructs from the chunk,
    bit for bit, since both sides run the identical synthesis path.
    """
    if not np.isfinite(flow).all():
        raise ValueError("code_flow: flow contains non-finite values")
    fq = ad.round_half_away(flow.astype(np.float32) * 4.0) / np.float32(4.0)
    chunk, recon = motion_codec.code(Tensor(fq))
    return chunk, recon.data
