"""Sequence ingestion: raw YUV420 planar files, BT.709 conversion to RGB,
PPM output, and a deterministic synthetic sequence generator.

Frames are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


class MediaError(ValueError):
    """Raised on malformed media inputs."""


def read_yuv420_frame(raw: bytes, width: int, height: int, index: int):
    """Slice frame ``index`` out of a planar 8-bit YUV420 buffer.

    Returns (Y, U, V) uint8 planes of shapes (H,W), (H/2,W/2), (H/2,W/2).
    """
    if width % 2 or height % 2:
        raise MediaError(f"yuv420 requires even dimensions, got {width}x{height}")
    frame_len = width * height * 3 // 2
    need = (index + 1) * frame_len
    if len(raw) < need:
        raise MediaError(
            f"yuv buffer too short for frame {index}: need {need} bytes, have {len(raw)}"
        )
    base = index * frame_len
    buf = np.frombuffer(raw, dtype=np.uint8, count=frame_len, offset=base)
    y = buf[: width * height].reshape(height, width)
    u = buf[width * height : width * height * 5 // 4].reshape(height // 2, width // 2)
    v = buf[width * height * 5 // 4 :].reshape(height // 2, width // 2)
    return y, u, v


def _chroma_upsample(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear 2x upsample of a chroma plane, samples co-sited top-left."""
    p = plane.astype(np.float64)
    ch, cw = p.shape
    cy = np.clip(np.arange(height) / 2.0, 0, ch - 1)
    cx = np.clip(np.arange(width) / 2.0, 0, cw - 1)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    fy = (cy - y0)[:, None]
    fx = (cx - x0)[None, :]
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def yuv420_to_rgb444_bt709(yuv) -> np.ndarray:
    """Limited-range BT.709 conversion of one YUV420 frame to a [0,1] RGB frame.

    Chroma is bilinearly upsampled to full resolution first.  The matrix is
    evaluated in double precision and cast to float32 at the end.
    """
    y, u, v = yuv
    h, w = y.shape
    yf = y.astype(np.float64) - 16.0
    uf = _chroma_upsample(u, h, w) - 128.0
    vf = _chroma_upsample(v, h, w) - 128.0
    r = 1.164 * yf + 1.793 * vf
    g = 1.164 * yf - 0.213 * uf - 0.533 * vf
    b = 1.164 * yf + 2.112 * uf
    rgb = np.stack([r, g, b]) / 255.0
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def write_ppm(frame: np.ndarray, path):
    """Binary P6 dump of a [0,1] RGB frame for quick inspection."""
    c, h, w = frame.shape
    data = ad.round_half_away(np.clip(frame, 0, 1) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise MediaError(f"not a binary PPM: magic {magic!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise MediaError(f"unsupported PPM maxval {maxval}")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / np.float32(255.0)).astype(np.float32)


_DECODE_MATRIX = np.array(
    [[1.164, 0.0, 1.793], [1.164, -0.213, -0.533], [1.164, 2.112, 0.0]], dtype=np.float64
)
_ENCODE_MATRIX = np.linalg.inv(_DECODE_MATRIX)


def rgb_to_yuv420_bt709(frames: np.ndarray) -> bytes:
    """Inverse conversion to planar limited-range YUV420, for writing .yuv files.

    Chroma is 2x2 box-averaged.  Lossy (8-bit quantization both ways).
    """
    out = bytearray()
    for frame in frames:
        c, h, w = frame.shape
        rgb = np.clip(frame, 0, 1).astype(np.float64).reshape(3, -1) * 255.0
        yuv = (_ENCODE_MATRIX @ rgb).reshape(3, h, w)
        y = np.clip(ad.round_half_away((yuv[0] + 16.0).astype(np.float32)), 16, 235).astype(np.uint8)
        u_full = yuv[1] + 128.0
        v_full = yuv[2] + 128.0
        u = u_full.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        v = v_full.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        u = np.clip(ad.round_half_away(u.astype(np.float32)), 16, 240).astype(np.uint8)
        v = np.clip(ad.round_half_away(v.astype(np.float32)), 16, 240).astype(np.uint8)
        out += y.tobytes() + u.tobytes() + v.tobytes()
    return bytes(out)


# -- sequence sources ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic synthetic test sequence.

    A band-limited random texture drifts by ``motion`` pixels per frame over
    the moving region (the bottom (1 - static_fraction) of the frame, with
    wraparound), the rest stays fixed, and per-frame Gaussian noise of
    strength ``noise_sigma`` is added on top.
    """

    width: int = 64
    height: int = 64
    texture_seed: int = 0
    motion: tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels per frame
    noise_sigma: float = 0.0
    static_fraction: float = 1.0


PRESETS = {
    "static": SyntheticSpec(motion=(0.0, 0.0), noise_sigma=0.008, static_fraction=1.0),
    "pan": SyntheticSpec(motion=(2.0, 1.0), noise_sigma=0.004, static_fraction=0.0),
    "mixed": SyntheticSpec(motion=(2.0, 0.0), noise_sigma=0.006, static_fraction=0.55),
}


def synthetic_spec(preset: str, width: int = 64, height: int = 64, texture_seed: int = 0) -> SyntheticSpec:
    if preset not in PRESETS:
        raise MediaError(f"unknown synthetic preset {preset!r}; have {sorted(PRESETS)}")
    base = PRESETS[preset]
    return SyntheticSpec(width, height, texture_seed, base.motion, base.noise_sigma, base.static_fraction)


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Band-limited [0.05, 0.95] RGB texture: low-res noise, bilinearly upsampled."""
    from .autodiff import Tensor, bilinear_upsample2x

    low = rng.normal(0, 1, (3, max(h // 4, 2), max(w // 4, 2))).astype(np.float32)
    t = Tensor(low)
    t = bilinear_upsample2x(bilinear_upsample2x(t))
    tex = t.data[:, :h, :w]
    tex = 0.5 + 0.22 * tex / max(float(tex.std()), 1e-6)
    return np.clip(tex, 0.05, 0.95).astype(np.float32)


def _wrap_sample(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Sample img at (y+dy, x+dx) with wraparound, bilinear between pixels."""
    c, h, w = img.shape
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.mod(gx + dx, w)
    sy = np.mod(gy + dy, h)
    x0 = np.floor(sx).astype(np.int64) % w
    y0 = np.floor(sy).astype(np.int64) % h
    x1 = (x0 + 1) % w
    y1 = (y0 + 1) % h
    ax = (sx - np.floor(sx)).astype(np.float32)
    ay = (sy - np.floor(sy)).astype(np.float32)
    return (
        img[:, y0, x0] * (1 - ay) * (1 - ax)
        + img[:, y0, x1] * (1 - ay) * ax
        + img[:, y1, x0] * ay * (1 - ax)
        + img[:, y1, x1] * ay * ax
    ).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, count: int) -> np.ndarray:
    """Render ``count`` frames (T, 3, H, W) in [0,1]; bit-identical per spec/seed."""
    if count < 1:
        raise MediaError("generate_synthetic needs count >= 1")
    h, w = spec.height, spec.width
    rng = np.random.default_rng(np.random.SeedSequence([spec.texture_seed, 0x5EED]))
    background = _texture(rng, h, w)
    moving = _texture(rng, h, w)
    static_rows = int(round(spec.static_fraction * h))
    frames = np.empty((count, 3, h, w), dtype=np.float32)
    for t in range(count):
        frame = background.copy()
        if static_rows < h:
            shifted = _wrap_sample(moving, spec.motion[0] * t, spec.motion[1] * t)
            frame[:, static_rows:, :] = shifted[:, static_rows:, :]
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0, spec.noise_sigma, frame.shape).astype(np.float32)
        frames[t] = np.clip(frame, 0.0, 1.0)
    return frames


@dataclass
class SequenceSource:
    """A named frame sequence plus the geometry the codec needs."""

    name: str
    frames: np.ndarray  # (T, 3, H, W) float32 in [0,1]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    def __len__(self) -> int:
        return self.frames.shape[0]


def load_yuv_manifest(manifest_path) -> SequenceSource:
    """Load a raw .yuv described by a JSON sidecar {name,width,height,frames[,file]}."""
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    for key in ("name", "width", "height", "frames"):
        if key not in meta:
            raise MediaError(f"manifest {manifest_path} missing key {key!r}")
    yuv_path = manifest_path.parent / meta.get("file", manifest_path.stem + ".yuv")
    if not yuv_path.exists():
        raise MediaError(f"manifest {manifest_path} points at missing file {yuv_path}")
    raw = yuv_path.read_bytes()
    w, h, n = int(meta["width"]), int(meta["height"]), int(meta["frames"])
    frames = np.stack(
        [yuv420_to_rgb444_bt709(read_yuv420_frame(raw, w, h, i)) for i in range(n)]
    )
    return SequenceSource(str(meta["name"]), frames)


def write_yuv_manifest(dir_path, name: str, yuv_bytes: bytes, width: int, height: int, frames: int):
    dir_path = Path(dir_path)
    (dir_path / f"{name}.yuv").write_bytes(yuv_bytes)
    meta = {"name": name, "width": width, "height": height, "frames": frames, "file": f"{name}.yuv"}
    path = dir_path / f"{name}.json"
    path.write_text(json.dumps(meta, indent=2) + "\n")
    return path
