"""End-to-end codec orchestration: buffers, per-frame encode/decode, GOP
structure, coding-mode variants, and bitstream assembly.

The encoder carries its own decoder-side reconstruction so that, by
induction over frames, encoder and decoder buffer states stay bit-identical
given the same weights and bitstream.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import motion
from . import rangecoder as rc
from .autodiff import Tensor
from .metrics import psnr_rgb
from .networks import NetworkBundle

LAMBDA_SET = (256, 512, 1024, 2048)

MODES = ("conditional", "conditional_residual")
BUFFERINGS = ("explicit_only", "implicit_only", "hybrid")

_MAGIC = b"CRVB"
_VERSION = 1


class ConfigError(ValueError):
    """Raised on invalid codec configuration."""


class BitstreamError(ValueError):
    """Raised when a bitstream cannot be decoded."""


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "conditional_residual"
    buffering: str = "hybrid"
    ib: int = 3
    feature_generator_mode: str = "both"
    lambda_index: int = 0
    intra_period: int = 32
    frames_to_code: int = 96
    block: int = 8
    search_range: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.buffering not in BUFFERINGS:
            raise ConfigError(f"buffering must be one of {BUFFERINGS}, got {self.buffering!r}")
        if self.buffering == "explicit_only":
            if self.ib != 0:
                raise ConfigError(f"explicit_only buffering requires IB=0, got {self.ib}")
        elif self.ib < 1:
            raise ConfigError(f"{self.buffering} buffering requires IB >= 1, got {self.ib}")
        if self.feature_generator_mode not in ("both", "xc_only", "ft_only"):
            raise ConfigError(f"bad feature_generator_mode {self.feature_generator_mode!r}")
        if not 0 <= self.lambda_index < len(LAMBDA_SET):
            raise ConfigError(f"lambda_index must be 0..{len(LAMBDA_SET) - 1}, got {self.lambda_index}")
        if self.intra_period < 1 or self.frames_to_code < 1:
            raise ConfigError("intra_period and frames_to_code must be >= 1")

    def buffer_channels(self) -> int:
        explicit = 3 if self.buffering in ("explicit_only", "hybrid") else 0
        return explicit + self.ib

    def equivalent_frames(self) -> float:
        return self.buffer_channels() / 3.0

    @property
    def lambda_value(self) -> int:
        return LAMBDA_SET[self.lambda_index]

    def variant_name(self) -> str:
        mode = "cond_res" if self.mode == "conditional_residual" else "cond"
        buf = {"explicit_only": "explicit", "implicit_only": "implicit", "hybrid": "hybrid"}[self.buffering]
        name = f"{mode}-{buf}"
        if self.ib > 0:
            name += f"-ib{self.ib}"
        if self.feature_generator_mode != "both":
            name += "-fgxc" if self.feature_generator_mode == "xc_only" else "-fgft"
        return name

    def canonical_string(self) -> str:
        return (
            f"mode={self.mode};buffering={self.buffering};ib={self.ib};"
            f"fg={self.feature_generator_mode};lambda_index={self.lambda_index};"
            f"intra_period={self.intra_period};block={self.block};search={self.search_range}"
        )


def config_from_variant(name: str, **overrides) -> CodecConfig:
    """Parse a variant name like 'cond_res-hybrid-ib3-fgxc' into a config."""
    parts = name.split("-")
    if parts[0] == "cond_res":
        mode = "conditional_residual"
    elif parts[0] == "cond":
        mode = "conditional"
    else:
        raise ConfigError(f"variant {name!r}: unknown mode prefix {parts[0]!r}")
    if len(parts) < 2 or parts[1] not in ("explicit", "implicit", "hybrid"):
        raise ConfigError(f"variant {name!r}: missing buffering element")
    buffering = {"explicit": "explicit_only", "implicit": "implicit_only", "hybrid": "hybrid"}[parts[1]]
    ib = 0
    fg = "both"
    for part in parts[2:]:
        if part.startswith("ib"):
            ib = int(part[2:])
        elif part == "fgxc":
            fg = "xc_only"
        elif part == "fgft":
            fg = "ft_only"
        else:
            raise ConfigError(f"variant {name!r}: unknown element {part!r}")
    return CodecConfig(mode=mode, buffering=buffering, ib=ib, feature_generator_mode=fg, **overrides)


def build_networks(cfg: CodecConfig) -> NetworkBundle:
    return NetworkBundle(cfg.ib, cfg.buffering, cfg.feature_generator_mode, cfg.seed)


def weights_digest(cfg: CodecConfig, nets: NetworkBundle) -> bytes:
    """16-byte digest binding a bitstream to its config and weights."""
    h = hashlib.sha256()
    h.update(cfg.canonical_string().encode())
    for name in sorted(nets.named_parameters()):
        t = nets.named_parameters()[name]
        h.update(name.encode())
        h.update(str(t.data.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.digest()[:16]


@dataclass
class BufferState:
    """Reference state carried between frames; mirrors on both codec sides."""

    explicit: Tensor | None = None
    implicit: Tensor | None = None
    frame_index: int = 0


@dataclass
class FrameRecord:
    frame_type: str  # "I" or "P"
    chunks: list[bytes] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return bytes([0 if self.frame_type == "I" else 1]) + b"".join(self.chunks)

    def bits(self) -> int:
        return 8 * len(self.to_bytes())


@dataclass
class Bitstream:
    width: int
    height: int
    lambda_index: int
    digest: bytes
    records: list[FrameRecord] = field(default_factory=list)

    def header_bytes(self) -> bytes:
        return (
            _MAGIC
            + struct.pack("<H", _VERSION)
            + struct.pack("<II", self.width, self.height)
            + struct.pack("<B", self.lambda_index)
            + struct.pack("<B", len(self.digest))
            + self.digest
            + struct.pack("<I", len(self.records))
        )

    def to_bytes(self) -> bytes:
        return self.header_bytes() + b"".join(r.to_bytes() for r in self.records)


def parse_header(data: bytes):
    if len(data) < 16 or data[:4] != _MAGIC:
        raise BitstreamError(f"bad bitstream magic {data[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _VERSION:
        raise BitstreamError(f"bitstream version {version} unsupported, decoder speaks {_VERSION}")
    w, h = struct.unpack_from("<II", data, 6)
    (lambda_index,) = struct.unpack_from("<B", data, 14)
    (dlen,) = struct.unpack_from("<B", data, 15)
    digest = data[16 : 16 + dlen]
    (n_frames,) = struct.unpack_from("<I", data, 16 + dlen)
    return w, h, lambda_index, digest, n_frames, 20 + dlen


# -- shared per-frame dataflow ---------------------------------------------------


def _reference_features(state: BufferState, cfg: CodecConfig, nets: NetworkBundle) -> Tensor:
    """Derive the 64-channel reference features from the buffered references.

    The first P-frame after an intra frame has no implicit buffer yet, so it
    always routes through the intra-bootstrap extractor; explicit-only mode
    stays on that extractor for every P-frame.
    """
    if state.implicit is None or cfg.buffering == "explicit_only":
        if state.explicit is None:
            raise BitstreamError("P-frame requires an explicit reference in the buffer")
        nets.extractor_calls.append("extractor_i")
        return nets.extractor_i(state.explicit)
    nets.extractor_calls.append("extractor_p")
    if cfg.buffering == "implicit_only":
        return nets.extractor_p(state.implicit)
    if state.explicit is None:
        raise BitstreamError("hybrid buffering lost its explicit reference")
    return nets.extractor_p(ad.concat([state.explicit, state.implicit], axis=0))


def _motion_reference(state: BufferState, x_ref_feats: Tensor, nets: NetworkBundle) -> Tensor:
    """Pixel frame to estimate motion against.

    Implicit-only coding drops the decoded frame after the first P-frame, so
    later frames match against the pixel projection of the buffered features.
    """
    if state.explicit is not None:
        return state.explicit
    proxy, _ = nets.predictor(x_ref_feats)
    return proxy


def _new_state(cfg: CodecConfig, x_hat: Tensor, f_tilde: Tensor | None, index: int) -> BufferState:
    explicit = x_hat.detach() if cfg.buffering in ("explicit_only", "hybrid") else None
    implicit = f_tilde.detach() if f_tilde is not None else None
    return BufferState(explicit=explicit, implicit=implicit, frame_index=index)


def encode_frame_I(x_t: Tensor, cfg: CodecConfig, nets: NetworkBundle):
    """Intra-code one frame; resets the implicit buffer."""
    chunk, recon = nets.intra_codec.code(x_t)
    x_hat = ad.clamp(recon, 0.0, 1.0)
    record = FrameRecord("I", [chunk])
    state = BufferState(explicit=x_hat.detach(), implicit=None, frame_index=1)
    return record, x_hat, state


def encode_frame_P(x_t: Tensor, state: BufferState, cfg: CodecConfig, nets: NetworkBundle):
    with ad.no_grad():
        x_ref = _reference_features(state, cfg, nets)
        me_ref = _motion_reference(state, x_ref, nets)
        flow = motion.estimate_flow(x_t, me_ref, cfg.block, cfg.search_range)
        chunk_m, flow_hat = motion.code_flow(flow, nets.motion_codec)
        x_c = motion.warp(x_ref, flow_hat)
        pred_pixel, cond = nets.predictor(x_c)
        if cfg.mode == "conditional_residual":
            codec_in = ad.sub(x_t, pred_pixel)
        else:
            codec_in = x_t
        chunk_l, dec_feats = nets.inter_codec.code(codec_in, cond=cond)
        f_t, offset = nets.frame_generator(dec_feats, cond)
        if cfg.mode == "conditional_residual":
            x_hat = ad.clamp(ad.add(offset, pred_pixel), 0.0, 1.0)
        else:
            x_hat = ad.clamp(offset, 0.0, 1.0)
        f_tilde = None
        if cfg.ib > 0:
            f_tilde = nets.feature_generator(x_c, f_t)
    record = FrameRecord("P", [chunk_m, chunk_l])
    return record, x_hat, _new_state(cfg, x_hat, f_tilde, state.frame_index + 1)


def decode_frame_P(payload_m, crc_m, payload_l, crc_l, state: BufferState, cfg: CodecConfig, nets: NetworkBundle, hw):
    with ad.no_grad():
        x_ref = _reference_features(state, cfg, nets)
        flow_hat = nets.motion_codec.decode(payload_m, crc_m, hw).data
        x_c = motion.warp(x_ref, flow_hat)
        pred_pixel, cond = nets.predictor(x_c)
        dec_feats = nets.inter_codec.decode(payload_l, crc_l, hw, cond=cond)
        f_t, offset = nets.frame_generator(dec_feats, cond)
        if cfg.mode == "conditional_residual":
            x_hat = ad.clamp(ad.add(offset, pred_pixel), 0.0, 1.0)
        else:
            x_hat = ad.clamp(offset, 0.0, 1.0)
        f_tilde = None
        if cfg.ib > 0:
            f_tilde = nets.feature_generator(x_c, f_t)
    return x_hat, _new_state(cfg, x_hat, f_tilde, state.frame_index + 1)


def decode_frame_I(payload, crc, cfg: CodecConfig, nets: NetworkBundle, hw):
    with ad.no_grad():
        recon = nets.intra_codec.decode(payload, crc, hw)
        x_hat = ad.clamp(recon, 0.0, 1.0)
    return x_hat, BufferState(explicit=x_hat.detach(), implicit=None, frame_index=1)


def code_sequence(frames: np.ndarray, cfg: CodecConfig, nets: NetworkBundle):
    """Encode a (T,3,H,W) sequence; returns (Bitstream, per-frame stats).

    Intra frames sit at indices that are multiples of the intra period.
    Stats carry the coded bits (chunk framing included) and the PSNR of the
    encoder-local reconstruction per frame.
    """
    n = min(len(frames), cfg.frames_to_code)
    if n < 1:
        raise ConfigError("code_sequence needs at least one frame")
    h, w = frames.shape[2], frames.shape[3]
    stream = Bitstream(w, h, cfg.lambda_index, weights_digest(cfg, nets))
    stats = []
    state = None
    for t in range(n):
        x_t = Tensor(frames[t])
        if t % cfg.intra_period == 0:
            record, x_hat, state = encode_frame_I(x_t, cfg, nets)
        else:
            record, x_hat, state = encode_frame_P(x_t, state, cfg, nets)
        stream.records.append(record)
        stats.append({"frame": t, "type": record.frame_type, "bits": record.bits(),
                      "psnr": psnr_rgb(x_t.data, x_hat.data)})
    return stream, stats


def decode_sequence(data: bytes, cfg: CodecConfig, nets: NetworkBundle, on_frame=None):
    """Decode a serialized bitstream; bit-identical to encoder reconstructions.

    ``on_frame(index, frame)`` fires after each decoded frame so callers can
    persist partial output before a later corruption error surfaces.  Raises
    BitstreamError naming the frame index on failure.
    """
    w, h, lambda_index, digest, n_frames, offset = parse_header(data)
    if lambda_index != cfg.lambda_index:
        raise BitstreamError(
            f"bitstream lambda_index {lambda_index} does not match config {cfg.lambda_index}"
        )
    expect = weights_digest(cfg, nets)
    if digest != expect:
        raise BitstreamError(
            f"weights/config digest mismatch: stream {digest.hex()} vs decoder {expect.hex()}"
        )
    frames = []
    state = None
    for i in range(n_frames):
        try:
            if offset >= len(data):
                raise BitstreamError("record header past end of stream")
            ftype = data[offset]
            offset += 1
            if ftype == 0:
                payload, crc, offset = rc.read_chunk(data, offset)
                x_hat, state = decode_frame_I(payload, crc, cfg, nets, (h, w))
            elif ftype == 1:
                if state is None:
                    raise BitstreamError("P-frame before any intra frame")
                payload_m, crc_m, offset = rc.read_chunk(data, offset)
                payload_l, crc_l, offset = rc.read_chunk(data, offset)
                x_hat, state = decode_frame_P(payload_m, crc_m, payload_l, crc_l, state, cfg, nets, (h, w))
            else:
                raise BitstreamError(f"unknown frame type byte {ftype}")
        except (rc.ChunkError, rc.RangeCoderError, BitstreamError) as e:
            raise BitstreamError(f"frame {i}: {e}") from e
        frames.append(x_hat.data)
        if on_frame is not None:
            on_frame(i, x_hat.data)
    return frames
