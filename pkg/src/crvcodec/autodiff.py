"""Minimal dense tensor with reverse-mode automatic differentiation.

Tensors hold float32 numpy arrays in channels-first layout (C,H,W) or
(N,C,H,W).  Forward ops record a graph of backward closures; ``backward``
walks it in reverse topological order.  Convolution reductions accumulate
in float64 and cast the result back to float32, which keeps outputs
reproducible and finite-difference gradient checks tight.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy import special as _special

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*a, **k):
        if a and callable(a[0]):
            return a[0]
        return lambda f: f


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Float32 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward_fn):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        run_backward(self)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad = t.grad + g.astype(np.float32, copy=False)


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; rollout graphs exceed Python's recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def run_backward(loss: Tensor):
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=np.float32)
    for node in reversed(order):
        if node._backward is None:
            continue
        node._backward(node.grad)
        # Free closure references so intermediate buffers can be collected.
        node._backward = None
        node._parents = ()


def gradients(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Return d(loss)/d(param) for each param; disconnected params get zeros."""
    params = list(params)
    run_backward(loss)
    out = {}
    for p in params:
        out[p] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# -- elementwise arithmetic ----------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return Tensor._from_op(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return Tensor._from_op(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out_data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * bd)
        if b.requires_grad:
            _accum(b, g * ad)

    return Tensor._from_op(out_data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out_data = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / bd)
        if b.requires_grad:
            _accum(b, -g * ad / (bd * bd))

    return Tensor._from_op(out_data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * np.float32(s)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.float32(s))

    return Tensor._from_op(out_data, (a,), bwd)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out_data = a.data + np.float32(s)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)

    return Tensor._from_op(out_data, (a,), bwd)


@njit(cache=True)
def _leaky_fwd(x, slope, out):
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = v if v > 0 else v * slope


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    flat = a.data.reshape(-1)
    out_data = np.empty_like(flat)
    _leaky_fwd(flat, np.float32(slope), out_data)
    out_data = out_data.reshape(a.data.shape)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(a.data > 0, g, g * np.float32(slope)))

    return Tensor._from_op(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return Tensor._from_op(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / ad)

    return Tensor._from_op(out_data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)
    sign = np.sign(a.data).astype(np.float32)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * sign)

    return Tensor._from_op(out_data, (a,), bwd)


def erf(a: Tensor) -> Tensor:
    out_data = _special.erf(a.data).astype(np.float32)
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (2.0 / np.sqrt(np.pi)) * np.exp(-(ad.astype(np.float64) ** 2)).astype(np.float32))

    return Tensor._from_op(out_data, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(mask, g, 0.0).astype(np.float32))

    return Tensor._from_op(out_data, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(dtype=np.float64), dtype=np.float32)
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, shape))

    return Tensor._from_op(out_data, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean(dtype=np.float64), dtype=np.float32)
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / np.float32(n), shape))

    return Tensor._from_op(out_data, (a,), bwd)


# -- structural ops -------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = [t.data.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, sz in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + sz)
                _accum(t, g[tuple(idx)])
            offset += sz

    return Tensor._from_op(out_data, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx].copy()
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            full = np.zeros(shape, dtype=np.float32)
            full[idx] = g
            _accum(a, full)

    return Tensor._from_op(out_data, (a,), bwd)


def _up2_axis(d: np.ndarray, axis: int) -> np.ndarray:
    # Half-pixel-centered x2: out[2i] = .75 d[i] + .25 d[i-1], out[2i+1] =
    # .75 d[i] + .25 d[i+1], edges clamped.
    d = np.moveaxis(d, axis, -1)
    prev = np.concatenate([d[..., :1], d[..., :-1]], axis=-1)
    nxt = np.concatenate([d[..., 1:], d[..., -1:]], axis=-1)
    out = np.empty(d.shape[:-1] + (2 * d.shape[-1],), dtype=np.float32)
    out[..., 0::2] = 0.75 * d + 0.25 * prev
    out[..., 1::2] = 0.75 * d + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    gd = 0.75 * (ge + go)
    # out[2i] pulls .25 from d[i-1] (clamped to d[0] at i=0)
    gd[..., :-1] += 0.25 * ge[..., 1:]
    gd[..., 0] += 0.25 * ge[..., 0]
    # out[2i+1] pulls .25 from d[i+1] (clamped to d[-1] at the end)
    gd[..., 1:] += 0.25 * go[..., :-1]
    gd[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gd.astype(np.float32), -1, axis)


def bilinear_upsample2x(a: Tensor) -> Tensor:
    """Double both spatial dims of a (...,H,W) tensor with bilinear filtering."""
    out_data = _up2_axis(_up2_axis(a.data, -2), -1)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _up2_axis_adjoint(_up2_axis_adjoint(g, -1), -2))

    return Tensor._from_op(out_data, (a,), bwd)


def avg_downsample2x(a: Tensor) -> Tensor:
    """Halve both spatial dims of a (...,H,W) tensor by 2x2 mean pooling."""
    d = a.data
    H, W = d.shape[-2], d.shape[-1]
    if H % 2 or W % 2:
        raise ShapeError(f"avg_downsample2x requires even spatial dims, got {d.shape}")
    lead = d.shape[:-2]
    out_data = d.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1)).astype(np.float32)

    def bwd(g):
        if a.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * np.float32(0.25)
            _accum(a, gx)

    return Tensor._from_op(out_data, (a,), bwd)


# -- convolution -----------------------------------------------------------------


def _acc_dtype():
    # float64 accumulation whenever gradients are being recorded (keeps
    # finite-difference checks tight); float32 GEMM on the inference path,
    # where only determinism matters and memory traffic dominates runtime
    return np.float64 if _grad_enabled else np.float32


def _im2col(x: np.ndarray, k: int, stride: int, dtype=np.float64):
    # x: padded (N, C, Hp, Wp).  Returns (N*Ho*Wo, C*k*k) patch matrix.
    n, c, hp, wp = x.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    v = v[:, :, ::stride, ::stride, :, :]
    v = v.transpose(0, 2, 3, 1, 4, 5)  # (N, Ho, Wo, C, k, k)
    patches = v.astype(dtype).reshape(n * ho * wo, c * k * k)
    return patches, ho, wo


def _patches_cmajor(x3: np.ndarray, k: int, stride: int, padding: int, dtype):
    """(C*k*k, Ho*Wo) patch matrix of one image; rows copy near-contiguously."""
    xp = np.pad(x3, ((0, 0), (padding, padding), (padding, padding))) if padding else x3
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    v = v[:, ::stride, ::stride]  # (C, Ho, Wo, k, k)
    ho, wo = v.shape[1], v.shape[2]
    v = v.transpose(0, 3, 4, 1, 2)  # (C, k, k, Ho, Wo)
    return v.astype(dtype, copy=False).reshape(-1, ho * wo), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int, dtype):
    n, c, h, wdt = x.shape
    cout, cin, k, _ = w.shape
    if n == 1:
        if k == 1 and stride == 1:
            xm = x.reshape(cin, h * wdt).astype(dtype, copy=False)
            out = w.reshape(cout, cin).astype(dtype, copy=False) @ xm
            ho, wo = h, wdt
        else:
            patches, ho, wo = _patches_cmajor(x[0], k, stride, padding, dtype)
            out = w.reshape(cout, cin * k * k).astype(dtype, copy=False) @ patches
        out += b.astype(dtype, copy=False)[:, None]
        return np.ascontiguousarray(out.reshape(1, cout, ho, wo), dtype=np.float32)
    if k == 1 and stride == 1:
        xm = x.reshape(n, cin, h * wdt).astype(dtype, copy=False)
        out = np.matmul(w.reshape(cout, cin).astype(dtype)[None], xm)
        out += b.astype(dtype)[None, :, None]
        return np.ascontiguousarray(out.reshape(n, cout, h, wdt), dtype=np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    patches, ho, wo = _im2col(xp, k, stride, dtype)
    out = patches @ w.reshape(cout, cin * k * k).astype(dtype).T
    out += b.astype(dtype)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=np.float32)


def _conv_input_grad(dy: np.ndarray, w: np.ndarray, stride: int, padding: int, in_shape):
    # full correlation of the (dilated) output gradient with flipped weights
    n, cin, h, wdt = in_shape
    cout, _, k, _ = w.shape
    if stride > 1:
        ho, wo = dy.shape[2], dy.shape[3]
        dyd = np.zeros((n, cout, stride * (ho - 1) + 1, stride * (wo - 1) + 1), np.float32)
        dyd[:, :, ::stride, ::stride] = dy
    else:
        dyd = dy
    ah = (h + 2 * padding - k) % stride
    aw = (wdt + 2 * padding - k) % stride
    p0 = k - 1 - padding
    dyp = np.pad(dyd, ((0, 0), (0, 0), (p0, p0 + ah), (p0, p0 + aw)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (Cin, Cout, k, k)
    dx = _conv_forward(dyp, wf, np.zeros(cin, np.float32), 1, 0, np.float64)
    return np.ascontiguousarray(dx[:, :, :h, :wdt], dtype=np.float32)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over a (C,H,W) or (N,C,H,W) tensor.

    ``k`` must be odd, ``stride`` 1 or 2, and stride-1 calls must use
    same-padding ``(k-1)//2``.  Accumulation happens in float64.
    """
    cout, cin, k, k2 = weights.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {weights.data.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if stride == 1 and padding != (k - 1) // 2:
        raise ShapeError(f"conv2d: stride-1 padding must be {(k - 1) // 2} for k={k}, got {padding}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3D or 4D, got shape {x.data.shape}")
    if xd.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input channels {xd.shape[1]} (input shape {x.data.shape}) do not match "
            f"weight C_in {cin} (weight shape {weights.data.shape})"
        )
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} must be ({cout},)")

    out_data = _conv_forward(xd, weights.data, bias.data, stride, padding, _acc_dtype())
    in_shape = xd.shape

    def bwd(g):
        gd = g[None] if squeeze else g
        pointwise = k == 1 and stride == 1
        if weights.requires_grad:
            if pointwise:
                xm = xd.reshape(xd.shape[0], cin, -1).astype(np.float64)
                dy = gd.reshape(gd.shape[0], cout, -1).astype(np.float64)
                dw = np.matmul(dy, xm.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, 1, 1)
            elif xd.shape[0] == 1:
                patches, ho, wo = _patches_cmajor(xd[0], k, stride, padding, np.float64)
                dy2 = gd.reshape(cout, -1).astype(np.float64)
                dw = (dy2 @ patches.T).reshape(cout, cin, k, k)
            else:
                xp = (
                    np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                    if padding
                    else xd
                )
                patches, ho, wo = _im2col(xp, k, stride)
                dy2 = gd.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
                dw = (dy2.T @ patches).reshape(cout, cin, k, k)
            _accum(weights, dw.astype(np.float32))
        if bias.requires_grad:
            _accum(bias, gd.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        if x.requires_grad:
            if pointwise:
                dy = gd.reshape(gd.shape[0], cout, -1).astype(np.float64)
                dx = np.matmul(weights.data.reshape(cout, cin).astype(np.float64).T[None], dy)
                dx = np.ascontiguousarray(dx.reshape(in_shape), dtype=np.float32)
            else:
                dx = _conv_input_grad(gd, weights.data, stride, padding, in_shape)
            _accum(x, dx[0] if squeeze else dx)

    return Tensor._from_op(out_data[0] if squeeze else out_data, (x, weights, bias), bwd)


# -- quantization helpers ---------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (fixed global convention)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(x.dtype)


# -- weight container -------------------------------------------------------------

_WEIGHT_MAGIC = b"CRVW"
_WEIGHT_VERSION = 1


class WeightFormatError(ValueError):
    """Raised on malformed weight containers."""


def save_weights(path, tensors: dict[str, np.ndarray]):
    """Write a named-tensor container; round-trips bit-exactly via load_weights."""
    with open(path, "wb") as f:
        f.write(_WEIGHT_MAGIC)
        f.write(struct.pack("<HI", _WEIGHT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}, expected {_WEIGHT_MAGIC!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported weight container version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        out[name] = arr.astype(np.float32)
    if pos != len(blob):
        raise WeightFormatError(f"trailing bytes in weight container: {len(blob) - pos}")
    return out
