"""Named neural components of the codec plus MAC/parameter accounting.

Channel-count contracts: reference features, the warped temporal predictor,
the condition signal, and the frame generator's pre-reconstruction feature
are all 64-channel maps; the buffered implicit feature has IB channels; the
fused extractor's first conv accepts the concatenated reference channels
(3+IB in hybrid mode).  Trunk widths are kept deliberately small so a full
coding run stays desk-scale on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy_models import ConditionedGaussian, FactorizedLaplacian

FEATURE_CHANNELS = 64  # reference/condition/pre-reconstruction feature width
TRUNK_HIDDEN = 8
TRANSFORM_HIDDEN = 16
DECODED_FEATURE_CHANNELS = 8
LATENT_INTER = 32
LATENT_MOTION = 16
LATENT_INTRA = 48
LEAKY_SLOPE = 0.01


@dataclass
class LayerSpec:
    """Shape record of one conv layer at a concrete resolution."""

    kernel: int
    c_in: int
    c_out: int
    stride: int
    out_h: int
    out_w: int

    def macs(self) -> int:
        return self.kernel * self.kernel * self.c_in * self.c_out * self.out_h * self.out_w

    def params(self) -> int:
        return self.kernel * self.kernel * self.c_in * self.c_out + self.c_out


@dataclass
class NetworkSpec:
    """Layer list of one named component; feeds the complexity profile."""

    name: str
    layers: list[LayerSpec] = field(default_factory=list)
    extra_params: int = 0  # non-conv parameters (entropy model vectors)

    def params(self) -> int:
        return sum(l.params() for l in self.layers) + self.extra_params

    def macs(self) -> int:
        return sum(l.macs() for l in self.layers)

    def shape_signature(self) -> list[tuple[int, int]]:
        """(kernel, stride) sequence; equal for architecturally-twin nets."""
        return [(l.kernel, l.stride) for l in self.layers]


class ConvLayer:
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, rng: np.random.Generator):
        std = float(np.sqrt(2.0 / (k * k * c_in)))
        self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight, self.bias]

    def named_parameters(self, prefix: str):
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * self.padding - self.k) // self.stride + 1,
            (w + 2 * self.padding - self.k) // self.stride + 1,
        )

    def spec(self, h: int, w: int) -> tuple[LayerSpec, int, int]:
        oh, ow = self.out_hw(h, w)
        return LayerSpec(self.k, self.c_in, self.c_out, self.stride, oh, ow), oh, ow


def _component_params(layers, prefix):
    out = {}
    for i, layer in enumerate(layers):
        out.update(layer.named_parameters(f"{prefix}/{i}"))
    return out


class FeatureExtractor:
    """Maps buffered reference channels to the 64-channel reference features.

    The intra-bootstrap variant takes just the decoded frame (3 channels);
    the fused variant takes the decoded frame concatenated with the buffered
    implicit features (3+IB channels), or IB alone in implicit-only mode.
    Architecture is otherwise identical between the two.
    """

    def __init__(self, c_in: int, rng):
        self.c_in = c_in
        # 1x1 channel mix first: the concatenated reference input can be wide
        # (3+IB channels) and a full-res 3x3 on it would dominate runtime
        self.layers = [
            ConvLayer(c_in, TRUNK_HIDDEN, 1, 1, rng),
            ConvLayer(TRUNK_HIDDEN, TRUNK_HIDDEN, 3, 1, rng),
            ConvLayer(TRUNK_HIDDEN, FEATURE_CHANNELS, 1, 1, rng),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.c_in:
            raise ad.ShapeError(f"extractor expects {self.c_in} input channels, got {x.shape[0]}")
        h = ad.leaky_relu(self.layers[0](x), LEAKY_SLOPE)
        h = ad.leaky_relu(self.layers[1](h), LEAKY_SLOPE)
        return self.layers[2](h)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def named_parameters(self, prefix):
        return _component_params(self.layers, prefix)

    def spec(self, name, h, w) -> NetworkSpec:
        out = NetworkSpec(name)
        for l in self.layers:
            ls, h, w = l.spec(h, w)
            out.layers.append(ls)
        return out


class PredictorHead:
    """Projects the warped temporal predictor into a pixel-domain predictor
    (clamped to [0,1]) and a condition signal for the inter-frame codec."""

    def __init__(self, rng):
        self.trunk = [
            ConvLayer(FEATURE_CHANNELS, TRUNK_HIDDEN, 1, 1, rng),
            ConvLayer(TRUNK_HIDDEN, TRUNK_HIDDEN, 3, 1, rng),
        ]
        self.pixel = ConvLayer(TRUNK_HIDDEN, 3, 1, 1, rng)
        self.cond = ConvLayer(TRUNK_HIDDEN, FEATURE_CHANNELS, 1, 1, rng)

    def __call__(self, x_c: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.leaky_relu(self.trunk[0](x_c), LEAKY_SLOPE)
        h = ad.leaky_relu(self.trunk[1](h), LEAKY_SLOPE)
        return ad.clamp(self.pixel(h), 0.0, 1.0), self.cond(h)

    def parameters(self):
        ps = [p for l in self.trunk for p in l.parameters()]
        return ps + self.pixel.parameters() + self.cond.parameters()

    def named_parameters(self, prefix):
        return _component_params(self.trunk + [self.pixel, self.cond], prefix)

    def spec(self, name, h, w) -> NetworkSpec:
        out = NetworkSpec(name)
        hh, ww = h, w
        for l in self.trunk:
            ls, hh, ww = l.spec(hh, ww)
            out.layers.append(ls)
        out.layers.append(self.pixel.spec(hh, ww)[0])
        out.layers.append(self.cond.spec(hh, ww)[0])
        return out


class FrameGenerator:
    """Turns decoded latent features plus the condition signal into the
    64-channel pre-reconstruction feature and a 3-channel pixel offset."""

    def __init__(self, rng, dec_channels: int = DECODED_FEATURE_CHANNELS):
        self.dec_channels = dec_channels
        self.layers = [
            ConvLayer(dec_channels + FEATURE_CHANNELS, TRUNK_HIDDEN, 1, 1, rng),
            ConvLayer(TRUNK_HIDDEN, TRUNK_HIDDEN, 3, 1, rng),
            ConvLayer(TRUNK_HIDDEN, FEATURE_CHANNELS, 1, 1, rng),
            ConvLayer(FEATURE_CHANNELS, 3, 1, 1, rng),
        ]

    def __call__(self, decoded: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        x = ad.concat([decoded, cond], axis=0)
        h = ad.leaky_relu(self.layers[0](x), LEAKY_SLOPE)
        h = ad.leaky_relu(self.layers[1](h), LEAKY_SLOPE)
        f_t = ad.leaky_relu(self.layers[2](h), LEAKY_SLOPE)
        offset = self.layers[3](f_t)
        return f_t, offset

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def named_parameters(self, prefix):
        return _component_params(self.layers, prefix)

    def spec(self, name, h, w) -> NetworkSpec:
        out = NetworkSpec(name)
        for l in self.layers:
            ls, h, w = l.spec(h, w)
            out.layers.append(ls)
        return out


FEATURE_GENERATOR_MODES = ("both", "xc_only", "ft_only")


class FeatureGenerator:
    """Fuses the warped predictor and/or the pre-reconstruction feature into
    the IB-channel map stored in the implicit buffer.

    Same layer layout as the frame generator except for the channel sizes of
    the first and last convolutions.  In single-input modes the omitted map
    is excluded from the input entirely rather than zeroed.
    """

    def __init__(self, ib: int, mode: str, rng):
        if mode not in FEATURE_GENERATOR_MODES:
            raise ValueError(f"unknown feature generator mode {mode!r}")
        self.ib = ib
        self.mode = mode
        c_in = 2 * FEATURE_CHANNELS if mode == "both" else FEATURE_CHANNELS
        self.layers = [
            ConvLayer(c_in, TRUNK_HIDDEN, 1, 1, rng),
            ConvLayer(TRUNK_HIDDEN, TRUNK_HIDDEN, 3, 1, rng),
            ConvLayer(TRUNK_HIDDEN, FEATURE_CHANNELS, 1, 1, rng),
            ConvLayer(FEATURE_CHANNELS, ib, 1, 1, rng),
        ]

    def __call__(self, x_c: Tensor, f_t: Tensor) -> Tensor:
        if self.mode == "both":
            x = ad.concat([x_c, f_t], axis=0)
        elif self.mode == "xc_only":
            x = x_c
        else:
            x = f_t
        h = ad.leaky_relu(self.layers[0](x), LEAKY_SLOPE)
        h = ad.leaky_relu(self.layers[1](h), LEAKY_SLOPE)
        h = ad.leaky_relu(self.layers[2](h), LEAKY_SLOPE)
        return self.layers[3](h)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def named_parameters(self, prefix):
        return _component_params(self.layers, prefix)

    def spec(self, name, h, w) -> NetworkSpec:
        out = NetworkSpec(name)
        for l in self.layers:
            ls, h, w = l.spec(h, w)
            out.layers.append(ls)
        return out


class TransformCodec:
    """Analysis/synthesis transform pair with a quantizer and entropy model.

    Analysis is two stride-2 convs (latent grid is ceil(H/4) x ceil(W/4));
    synthesis mirrors it with bilinear-upsample-then-conv stages.  Inference
    quantization rounds half away from zero; training uses additive uniform
    noise.
    """

    def __init__(self, c_in: int, latent: int, c_out: int, hidden: int, entropy_model, rng):
        self.c_in, self.latent_channels, self.c_out, self.hidden = c_in, latent, c_out, hidden
        self.analysis = [
            ConvLayer(c_in, hidden, 3, 2, rng),
            ConvLayer(hidden, latent, 3, 2, rng),
        ]
        self.synthesis = [
            ConvLayer(latent, hidden, 3, 1, rng),
            ConvLayer(hidden, c_out, 3, 1, rng),
        ]
        self.entropy = entropy_model

    def analyze(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.analysis[0](x), LEAKY_SLOPE)
        return self.analysis[1](h)

    def synthesize(self, latent: Tensor, out_hw: tuple[int, int]) -> Tensor:
        h = ad.leaky_relu(self.synthesis[0](ad.bilinear_upsample2x(latent)), LEAKY_SLOPE)
        y = self.synthesis[1](ad.bilinear_upsample2x(h))
        th, tw = out_hw
        if y.shape[-2] != th:
            y = ad.narrow(y, y.ndim - 2, 0, th)
        if y.shape[-1] != tw:
            y = ad.narrow(y, y.ndim - 1, 0, tw)
        return y

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (self.latent_channels, -(-h // 4), -(-w // 4))

    def code(self, x: Tensor, cond: Tensor | None = None) -> tuple[bytes, Tensor]:
        """Inference encode: quantize, range-code, and locally reconstruct.

        Returns the framed chunk and the synthesis output the decoder will
        reproduce bit-exactly from the same weights and condition.
        """
        from . import rangecoder as rcio

        with ad.no_grad():
            inp = x if cond is None else ad.concat([x, cond], axis=0)
            y = self.analyze(inp)
            plan = self.entropy.plan(y.shape, cond)
            rel, deq = quantize_inference(y.data, plan)
            payload = rcio.encode_indices((rel.reshape(-1) - plan.lo), plan.rows, plan.cdf)
            chunk = rcio.frame_chunk(payload, rcio.symbols_crc(rel))
            recon = self.synthesize(Tensor(deq), (x.shape[-2], x.shape[-1]))
        return chunk, recon

    def decode(self, payload: bytes, crc: int, out_hw: tuple[int, int], cond: Tensor | None = None) -> Tensor:
        """Inference decode of one chunk payload; verifies the symbol checksum."""
        from . import rangecoder as rcio

        with ad.no_grad():
            shape = self.latent_shape(*out_hw)
            plan = self.entropy.plan(shape, cond)
            n = int(np.prod(shape))
            idx = rcio.decode_indices(payload, n, plan.rows, plan.cdf)
            rel = (idx + plan.lo).reshape(shape)
            if rcio.symbols_crc(rel) != crc:
                raise rcio.ChunkError("decoded symbol checksum mismatch")
            deq = (rel.reshape(-1) + plan.base).astype(np.float32).reshape(shape)
            return self.synthesize(Tensor(deq), out_hw)

    def train_forward(self, x: Tensor, cond: Tensor | None, rng: np.random.Generator):
        """Training path: noise quantization, differentiable bits, reconstruction."""
        inp = x if cond is None else ad.concat([x, cond], axis=0)
        y = self.analyze(inp)
        noisy = quantize_noise(y, rng)
        bits = self.entropy.bits_tensor(noisy, cond)
        recon = self.synthesize(noisy, (x.shape[-2], x.shape[-1]))
        return recon, bits

    def parameters(self):
        ps = [p for l in self.analysis + self.synthesis for p in l.parameters()]
        return ps + self.entropy.parameters()

    def named_parameters(self, analysis_name, synthesis_name, entropy_name):
        out = _component_params(self.analysis, analysis_name)
        out.update(_component_params(self.synthesis, synthesis_name))
        out.update(self.entropy.named_parameters(entropy_name))
        return out

    def analysis_spec(self, name, h, w) -> NetworkSpec:
        out = NetworkSpec(name)
        for l in self.analysis:
            ls, h, w = l.spec(h, w)
            out.layers.append(ls)
        return out

    def synthesis_spec(self, name, h, w) -> NetworkSpec:
        # caller passes the latent grid size; each stage doubles it first
        out = NetworkSpec(name)
        for l in self.synthesis:
            h, w = 2 * h, 2 * w
            ls, h, w = l.spec(h, w)
            out.layers.append(ls)
        return out


def quantize_inference(y: np.ndarray, plan) -> tuple[np.ndarray, np.ndarray]:
    """Round latents, clamp to the plan's support, return (symbols, dequantized)."""
    q = ad.round_half_away(y).reshape(-1).astype(np.int64)
    rel = np.clip(q - plan.base, plan.lo, plan.hi)
    deq = (rel + plan.base).astype(np.float32).reshape(y.shape)
    return rel.reshape(y.shape), deq


def quantize_noise(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Training-time quantizer surrogate: additive uniform noise in [-0.5, 0.5)."""
    noise = Tensor(rng.uniform(-0.5, 0.5, y.shape).astype(np.float32))
    return ad.add(y, noise)


class NetworkBundle:
    """Every trainable component needed by one codec variant."""

    def __init__(self, ib: int, buffering: str, fg_mode: str, seed: int):
        self.ib = ib
        self.buffering = buffering
        self.fg_mode = fg_mode
        self.seed = seed
        self.extractor_calls: list[str] = []  # call-path trace, appended by the pipeline
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DEC]))

        self.motion_codec = TransformCodec(
            2, LATENT_MOTION, 2, TRANSFORM_HIDDEN, FactorizedLaplacian(LATENT_MOTION), rng
        )
        self.intra_codec = TransformCodec(
            3, LATENT_INTRA, 3, 2 * TRANSFORM_HIDDEN, FactorizedLaplacian(LATENT_INTRA), rng
        )
        self.inter_codec = TransformCodec(
            3 + FEATURE_CHANNELS,
            LATENT_INTER,
            DECODED_FEATURE_CHANNELS,
            TRANSFORM_HIDDEN,
            ConditionedGaussian(LATENT_INTER, FEATURE_CHANNELS, TRUNK_HIDDEN, rng),
            rng,
        )
        self.extractor_i = FeatureExtractor(3, rng)
        self.predictor = PredictorHead(rng)
        self.frame_generator = FrameGenerator(rng)

        self.extractor_p = None
        self.feature_generator = None
        if ib > 0:
            fused_in = ib if buffering == "implicit_only" else 3 + ib
            self.extractor_p = FeatureExtractor(fused_in, rng)
            self.feature_generator = FeatureGenerator(ib, fg_mode, rng)

    def components(self) -> dict[str, object]:
        out = {
            "motion_codec": self.motion_codec,
            "intra_codec": self.intra_codec,
            "inter_codec": self.inter_codec,
            "extractor_i": self.extractor_i,
            "predictor": self.predictor,
            "frame_generator": self.frame_generator,
        }
        if self.extractor_p is not None:
            out["extractor_p"] = self.extractor_p
        if self.feature_generator is not None:
            out["feature_generator"] = self.feature_generator
        return out

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for comp in self.components().values():
            ps.extend(comp.parameters())
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.motion_codec.named_parameters("motion_analysis", "motion_synthesis", "motion_entropy"))
        out.update(self.intra_codec.named_parameters("intra_analysis", "intra_synthesis", "intra_entropy"))
        out.update(self.inter_codec.named_parameters("inter_analysis", "inter_synthesis", "inter_entropy"))
        out.update(self.extractor_i.named_parameters("extractor_i"))
        out.update(self.predictor.named_parameters("predictor"))
        out.update(self.frame_generator.named_parameters("frame_generator"))
        if self.extractor_p is not None:
            out.update(self.extractor_p.named_parameters("extractor_p"))
        if self.feature_generator is not None:
            out.update(self.feature_generator.named_parameters("feature_generator"))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ad.ShapeError(
                f"weight set mismatch: missing {missing[:4]}{'...' if len(missing) > 4 else ''}, "
                f"unexpected {extra[:4]}{'...' if len(extra) > 4 else ''}"
            )
        for name, t in params.items():
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise ad.ShapeError(
                    f"weight {name!r}: file shape {arr.shape} does not match model shape {t.data.shape}"
                )
            t.data = arr.astype(np.float32).copy()

    # -- complexity accounting ---------------------------------------------

    def specs(self, h: int, w: int) -> dict[str, NetworkSpec]:
        lh, lw = -(-h // 4), -(-w // 4)  # latent grid after two stride-2 stages
        out = {
            "motion_analysis": self.motion_codec.analysis_spec("motion_analysis", h, w),
            "motion_synthesis": self.motion_codec.synthesis_spec("motion_synthesis", lh, lw),
            "intra_analysis": self.intra_codec.analysis_spec("intra_analysis", h, w),
            "intra_synthesis": self.intra_codec.synthesis_spec("intra_synthesis", lh, lw),
            "inter_analysis": self.inter_codec.analysis_spec("inter_analysis", h, w),
            "inter_synthesis": self.inter_codec.synthesis_spec("inter_synthesis", lh, lw),
            "extractor_i": self.extractor_i.spec("extractor_i", h, w),
            "predictor": self.predictor.spec("predictor", h, w),
            "frame_generator": self.frame_generator.spec("frame_generator", h, w),
        }
        ent = NetworkSpec("inter_entropy")
        hh, ww = h // 2 ** self.inter_codec.entropy.downsamples, w // 2 ** self.inter_codec.entropy.downsamples
        ls, hh, ww = self.inter_codec.entropy.l0.spec(hh, ww)
        ent.layers.append(ls)
        ent.layers.append(self.inter_codec.entropy.l1.spec(hh, ww)[0])
        out["inter_entropy"] = ent
        out["motion_entropy"] = NetworkSpec("motion_entropy", extra_params=2 * LATENT_MOTION)
        out["intra_entropy"] = NetworkSpec("intra_entropy", extra_params=2 * LATENT_INTRA)
        if self.extractor_p is not None:
            out["extractor_p"] = self.extractor_p.spec("extractor_p", h, w)
        if self.feature_generator is not None:
            out["feature_generator"] = self.feature_generator.spec("feature_generator", h, w)
        return out


# components executed per P-frame, by role; analysis-side nets only run on
# the encoder, everything else runs on both sides
_DECODE_COMPONENTS = (
    "motion_synthesis",
    "inter_synthesis",
    "inter_entropy",
    "predictor",
    "frame_generator",
)
_ENCODE_ONLY = ("motion_analysis", "inter_analysis")


def profile(specs: dict[str, NetworkSpec], role: str, h: int, w: int) -> tuple[float, float]:
    """(kMACs/pixel, params in millions) for the encoder or decoder path.

    MACs follow the steady-state P-frame path: the fused extractor when an
    implicit buffer exists, the intra-bootstrap extractor otherwise.  The
    parameter count covers every tensor in the variant's weight file.
    """
    if role not in ("encode", "decode"):
        raise ValueError(f"role must be 'encode' or 'decode', got {role!r}")
    params_m = sum(s.params() for s in specs.values()) / 1e6
    active = list(_DECODE_COMPONENTS)
    if role == "encode":
        active += list(_ENCODE_ONLY)
    active.append("extractor_p" if "extractor_p" in specs else "extractor_i")
    if "feature_generator" in specs:
        active.append("feature_generator")
    macs = sum(specs[name].macs() for name in active)
    return macs / (h * w) / 1e3, params_m
