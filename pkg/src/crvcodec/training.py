"""Desk-scale end-to-end rate-distortion training on synthetic sequences.

Schedule: a short motion-codec warm-up (flow round-trip fidelity), the
feature-generator pre-training stage (reconstruct the coding frame from the
buffered features through a throwaway 3x3 head), then joint end-to-end
training over multi-frame rollouts so gradients flow through the temporal
buffers.  Rates use the additive-noise surrogate; validation codes real
bitstreams.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import media, motion, pipeline
from .autodiff import Tensor
from .metrics import cap_psnr, psnr_rgb
from .networks import ConvLayer, NetworkBundle
from .pipeline import LAMBDA_SET, BufferState, CodecConfig


class TrainingError(RuntimeError):
    """Raised when a training run diverges."""


@dataclass
class StageSpec:
    name: str
    steps: int
    lr: float


@dataclass
class TrainConfig:
    lambda_value: int = 256
    stages: list[StageSpec] = field(default_factory=list)
    patch: int = 64
    batch: int = 1
    rollout: int = 3  # P-frames per clip
    seed: int = 0
    train_seq_frames: int = 12
    log_every: int = 200

    def __post_init__(self):
        if self.lambda_value not in LAMBDA_SET:
            raise ValueError(f"lambda must be one of {LAMBDA_SET}, got {self.lambda_value}")
        if not self.stages:
            self.stages = default_stages()
        if self.rollout < 1 or self.batch < 1 or self.patch < 16:
            raise ValueError("rollout/batch/patch out of range")


def default_stages(motion_steps=300, fg_steps=300, e2e_steps=1400) -> list[StageSpec]:
    return [
        StageSpec("motion_pretrain", motion_steps, 1e-3),
        StageSpec("feature_generator_pretrain", fg_steps, 1e-3),
        StageSpec("end_to_end", e2e_steps, 1e-3),
    ]


class Adam:
    """Adam with global-norm gradient clipping; state keyed per parameter."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def step(self):
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm {norm}")
        scale = 1.0 if norm <= self.clip_norm else self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = (p.grad if p.grad is not None else np.zeros_like(p.data)) * np.float32(scale)
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * (g * g)
            update = (self._m[i] / bc1) / (np.sqrt(self._v[i] / bc2) + self.eps)
            p.data = p.data - np.float32(self.lr) * update.astype(np.float32)
            p.grad = None
        return norm


def rd_loss(x_t: Tensor, x_hat: Tensor, total_bits, lamb: float, num_pixels: int) -> Tensor:
    """lambda * MSE(x, x_hat) + bits per pixel; differentiable throughout."""
    diff = ad.sub(x_t, x_hat)
    mse = ad.tmean(ad.mul(diff, diff))
    bits = total_bits if isinstance(total_bits, Tensor) else Tensor(np.float32(total_bits))
    return ad.add(ad.scale(mse, float(lamb)), ad.scale(bits, 1.0 / num_pixels))


# -- training data ----------------------------------------------------------------


class SyntheticClips:
    """Pool of synthetic training sequences; samples (1 + rollout)-frame clips."""

    def __init__(self, patch: int, frames: int, seed: int, presets=("static", "pan", "mixed"), per_preset: int = 2):
        self.sequences = []
        for pi, preset in enumerate(presets):
            for j in range(per_preset):
                spec = media.synthetic_spec(preset, patch, patch, texture_seed=seed * 100 + pi * 10 + j)
                self.sequences.append(media.generate_synthetic(spec, frames))

    def sample(self, rng: np.random.Generator, length: int) -> np.ndarray:
        seq = self.sequences[int(rng.integers(len(self.sequences)))]
        start = int(rng.integers(len(seq) - length + 1))
        return seq[start : start + length]


# -- per-frame training dataflow ----------------------------------------------------


def _advance_state(cfg: CodecConfig, x_hat: Tensor, f_tilde: Tensor | None, index: int) -> BufferState:
    # keeps the graph alive: rollout gradients flow through the buffers
    explicit = x_hat if cfg.buffering in ("explicit_only", "hybrid") else None
    return BufferState(explicit=explicit, implicit=f_tilde, frame_index=index)


def train_frame_I(x_t: Tensor, cfg: CodecConfig, nets: NetworkBundle, rng) -> tuple[Tensor, Tensor, BufferState]:
    recon, bits = nets.intra_codec.train_forward(x_t, None, rng)
    x_hat = ad.clamp(recon, 0.0, 1.0)
    return x_hat, bits, BufferState(explicit=x_hat, implicit=None, frame_index=1)


def train_frame_P(x_t: Tensor, state: BufferState, cfg: CodecConfig, nets: NetworkBundle, rng):
    """Mirrors the inference P-frame dataflow with noise quantization."""
    x_ref = pipeline._reference_features(state, cfg, nets)
    me_ref = pipeline._motion_reference(state, x_ref, nets)
    flow = motion.estimate_flow(x_t, me_ref, cfg.block, cfg.search_range)
    fq = ad.round_half_away(flow * 4.0) / np.float32(4.0)
    flow_hat, motion_bits = nets.motion_codec.train_forward(Tensor(fq), None, rng)
    x_c = motion.warp(x_ref, flow_hat)
    pred_pixel, cond = nets.predictor(x_c)
    codec_in = ad.sub(x_t, pred_pixel) if cfg.mode == "conditional_residual" else x_t
    dec_feats, latent_bits = nets.inter_codec.train_forward(codec_in, cond, rng)
    f_t, offset = nets.frame_generator(dec_feats, cond)
    if cfg.mode == "conditional_residual":
        x_hat = ad.clamp(ad.add(offset, pred_pixel), 0.0, 1.0)
    else:
        x_hat = ad.clamp(offset, 0.0, 1.0)
    f_tilde = nets.feature_generator(x_c, f_t) if cfg.ib > 0 else None
    bits = ad.add(motion_bits, latent_bits)
    return x_hat, bits, _advance_state(cfg, x_hat, f_tilde, state.frame_index + 1)


def clip_rd_loss(clip: np.ndarray, cfg: CodecConfig, nets: NetworkBundle, rng, lamb: float) -> tuple[Tensor, dict]:
    """Mean per-frame RD loss over an intra frame plus P-frame rollout."""
    num_pixels = clip.shape[2] * clip.shape[3]
    losses = []
    state = None
    total_bits = 0.0
    mses = []
    for t in range(len(clip)):
        x_t = Tensor(clip[t])
        if t == 0:
            x_hat, bits, state = train_frame_I(x_t, cfg, nets, rng)
        else:
            x_hat, bits, state = train_frame_P(x_t, state, cfg, nets, rng)
        losses.append(rd_loss(x_t, x_hat, bits, lamb, num_pixels))
        total_bits += float(bits.data)
        d = x_hat.data - clip[t]
        mses.append(float((d.astype(np.float64) ** 2).mean()))
    loss = ad.scale(losses[0], 1.0 / len(losses))
    for l in losses[1:]:
        loss = ad.add(loss, ad.scale(l, 1.0 / len(losses)))
    info = {"bpp": total_bits / (len(clip) * num_pixels), "mse": float(np.mean(mses))}
    return loss, info


# -- stages ------------------------------------------------------------------------


class _Freezer:
    """Temporarily disables gradients for every parameter except the kept set."""

    def __init__(self, nets: NetworkBundle, keep: list[Tensor]):
        keep_ids = {id(p) for p in keep}
        self.frozen = [p for p in nets.parameters() if id(p) not in keep_ids]

    def __enter__(self):
        for p in self.frozen:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p in self.frozen:
            p.requires_grad = True


def stage_motion_pretrain(nets: NetworkBundle, clips: SyntheticClips, stage: StageSpec, cfg, tc: TrainConfig, rng, log):
    """Teach the motion codec to reproduce block-matching flows at a sane rate."""
    opt = Adam(nets.motion_codec.parameters(), stage.lr)
    num_pixels = tc.patch * tc.patch
    for step in range(stage.steps):
        pair = clips.sample(rng, 2)
        flow = motion.estimate_flow(pair[1], pair[0], cfg.block, cfg.search_range)
        fq = ad.round_half_away(flow * 4.0) / np.float32(4.0)
        recon, bits = nets.motion_codec.train_forward(Tensor(fq), None, rng)
        # flow error normalized to the search range so lambda weights it like pixels
        err = ad.scale(ad.sub(recon, Tensor(fq)), 1.0 / float(cfg.search_range))
        mse = ad.tmean(ad.mul(err, err))
        loss = ad.add(ad.scale(mse, float(tc.lambda_value)), ad.scale(bits, 1.0 / num_pixels))
        ad.run_backward(loss)
        opt.step()
        if not np.isfinite(loss.data):
            raise TrainingError(f"motion_pretrain diverged at step {step}")
        if log and step % tc.log_every == 0:
            log(f"motion_pretrain step={step} loss={float(loss.data):.5f}")


def stage_pretrain_feature_generator(nets: NetworkBundle, clips: SyntheticClips, stage: StageSpec, cfg, tc: TrainConfig, rng, log):
    """Optimize the feature generator plus a throwaway RGB projection head.

    The rest of the pipeline runs in inference mode to produce realistic
    warped-predictor and pre-reconstruction features; only the feature
    generator and the auxiliary head receive updates, and the head is
    dropped afterwards.
    """
    if nets.feature_generator is None:
        return None
    aux = ConvLayer(cfg.ib, 3, 3, 1, np.random.default_rng(np.random.SeedSequence([tc.seed, 0xA0])))
    params = nets.feature_generator.parameters() + aux.parameters()
    opt = Adam(params, stage.lr)
    first_mse = last_mse = None
    for step in range(stage.steps):
        pair = clips.sample(rng, 2)
        with ad.no_grad():
            x0 = Tensor(pair[0])
            _, recon_i = nets.intra_codec.code(x0)
            x_hat0 = ad.clamp(recon_i, 0.0, 1.0)
            state = BufferState(explicit=x_hat0, implicit=None, frame_index=1)
            x_t = Tensor(pair[1])
            x_ref = pipeline._reference_features(state, cfg, nets)
            flow = motion.estimate_flow(x_t, state.explicit, cfg.block, cfg.search_range)
            _, flow_hat = motion.code_flow(flow, nets.motion_codec)
            x_c = motion.warp(x_ref, flow_hat)
            pred_pixel, cond = nets.predictor(x_c)
            codec_in = ad.sub(x_t, pred_pixel) if cfg.mode == "conditional_residual" else x_t
            _, dec_feats = nets.inter_codec.code(codec_in, cond=cond)
            f_t, _ = nets.frame_generator(dec_feats, cond)
        with _Freezer(nets, nets.feature_generator.parameters()):
            f_tilde = nets.feature_generator(Tensor(x_c.data), Tensor(f_t.data))
            head_out = aux(f_tilde)
            diff = ad.sub(head_out, x_t)
            loss = ad.tmean(ad.mul(diff, diff))
            ad.run_backward(loss)
            opt.step()
        if not np.isfinite(loss.data):
            raise TrainingError(f"feature_generator_pretrain diverged at step {step}")
        if first_mse is None:
            first_mse = float(loss.data)
        last_mse = float(loss.data)
        if log and step % tc.log_every == 0:
            log(f"feature_generator_pretrain step={step} mse={float(loss.data):.5f}")
    return {"first_mse": first_mse, "last_mse": last_mse}


def stage_end_to_end(nets: NetworkBundle, clips: SyntheticClips, stage: StageSpec, cfg, tc: TrainConfig, rng, log):
    """Joint training over 1+rollout frame clips; lr halves at 50% and 75%."""
    opt = Adam(nets.parameters(), stage.lr)
    for step in range(stage.steps):
        if step == stage.steps // 2 or step == (3 * stage.steps) // 4:
            opt.lr *= 0.5
        clip = clips.sample(rng, 1 + tc.rollout)
        loss, info = clip_rd_loss(clip, cfg, nets, rng, tc.lambda_value)
        if not np.isfinite(loss.data):
            raise TrainingError(f"end_to_end diverged at step {step}: loss={float(loss.data)}")
        ad.run_backward(loss)
        norm = opt.step()
        if not np.isfinite(norm):
            raise TrainingError(f"end_to_end non-finite gradients at step {step}")
        if log and step % tc.log_every == 0:
            log(
                f"end_to_end step={step} loss={float(loss.data):.5f} bpp={info['bpp']:.4f} "
                f"mse={info['mse']:.5f} gnorm={norm:.3f} lr={opt.lr:.2e}"
            )
    return None


# -- validation and the variant driver ----------------------------------------------


def validate(nets: NetworkBundle, cfg: CodecConfig, tc: TrainConfig, n_frames: int = 8):
    """Real-bitstream validation plus the noise-surrogate bits gap."""
    val_frames = []
    for pi, preset in enumerate(("static", "pan", "mixed")):
        spec = media.synthetic_spec(preset, tc.patch, tc.patch, texture_seed=77000 + pi)
        val_frames.append(media.generate_synthetic(spec, n_frames))
    bpps, psnrs, actual_bits, surrogate_bits = [], [], 0.0, 0.0
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x7A1]))
    for frames in val_frames:
        stream, stats = pipeline.code_sequence(frames, cfg, nets)
        total_bits = 8 * len(stream.to_bytes())
        bpps.append(total_bits / (frames.shape[0] * tc.patch * tc.patch))
        psnrs.append(float(np.mean([cap_psnr(s["psnr"]) for s in stats])))
        actual_bits += sum(s["bits"] for s in stats)
        _, seq_bits = clip_surrogate_bits(frames, cfg, nets, rng)
        surrogate_bits += seq_bits
    gap = abs(surrogate_bits - actual_bits) / max(actual_bits, 1.0)
    return {
        "val_bpp": float(np.mean(bpps)),
        "val_psnr": float(np.mean(psnrs)),
        "bits_gap": float(gap),
    }


def clip_surrogate_bits(frames: np.ndarray, cfg: CodecConfig, nets: NetworkBundle, rng):
    """Noise-quantized rate estimate over a sequence (no parameter updates)."""
    total = 0.0
    state = None
    with ad.no_grad():
        for t in range(len(frames)):
            x_t = Tensor(frames[t])
            if t % cfg.intra_period == 0:
                _, bits, state = train_frame_I(x_t, cfg, nets, rng)
            else:
                _, bits, state = train_frame_P(x_t, state, cfg, nets, rng)
            total += float(bits.data)
    return None, total


def train_variant(variant: str, lambda_value: int, tc: TrainConfig, out_dir, log=None):
    """Train one (variant, lambda) model; writes a weight file, returns a manifest row."""
    lambda_index = LAMBDA_SET.index(lambda_value)
    cfg = pipeline.config_from_variant(variant, lambda_index=lambda_index, seed=tc.seed)
    nets = pipeline.build_networks(cfg)
    run_seed = np.random.SeedSequence([tc.seed, zlib.crc32(variant.encode()), lambda_value])
    rng = np.random.default_rng(run_seed)
    clips = SyntheticClips(tc.patch, tc.train_seq_frames, tc.seed)
    final_loss = float("nan")
    for stage in tc.stages:
        if stage.name == "motion_pretrain":
            stage_motion_pretrain(nets, clips, stage, cfg, tc, rng, log)
        elif stage.name == "feature_generator_pretrain":
            stage_pretrain_feature_generator(nets, clips, stage, cfg, tc, rng, log)
        elif stage.name == "end_to_end":
            stage_end_to_end(nets, clips, stage, cfg, tc, rng, log)
        else:
            raise ValueError(f"unknown stage {stage.name!r}")
    clip = clips.sample(np.random.default_rng(np.random.SeedSequence([tc.seed, 0xF1])), 1 + tc.rollout)
    with ad.no_grad():
        loss, _ = clip_rd_loss(clip, cfg, nets, np.random.default_rng(0), tc.lambda_value)
    final_loss = float(loss.data)
    metrics = validate(nets, cfg, tc)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{variant}_lmb{lambda_value}.crvw"
    ad.save_weights(path, nets.state_arrays())
    return {
        "variant": variant,
        "lambda": lambda_value,
        "file": path.name,
        "final_loss": final_loss,
        "val_bpp": metrics["val_bpp"],
        "val_psnr": metrics["val_psnr"],
        "bits_gap": metrics["bits_gap"],
    }


MANIFEST_HEADER = ["variant", "lambda", "file", "final_loss", "val_bpp", "val_psnr", "bits_gap"]


def train_all_variants(variants: list[str], lambdas: list[int], tc: TrainConfig, out_dir, log=None):
    """Train the full (variant, lambda) grid and write manifest.csv."""
    out_dir = Path(out_dir)
    rows = []
    for variant in variants:
        for lamb in lambdas:
            if log:
                log(f"=== training {variant} lambda={lamb} ===")
            rows.append(train_variant(variant, lamb, tc, out_dir, log))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_HEADER)
        for row in rows:
            w.writerow([row[k] if not isinstance(row[k], float) else repr(row[k]) for k in MANIFEST_HEADER])
    return rows
