"""
Two-level audio autoencoder.

Level 1 maps log-magnitude spectrograms (bins as channels) to a sequence of
latent vectors, one per STFT frame, and decodes them back to magnitude and
phase. Level 2 compresses level-1 latent sequences further in time by
r_time2. Both encoders are padding-free with a tanh bottleneck.

Training follows two phases per level:

1. encoder + decoder on an L1 reconstruction loss;
2. frozen encoder, decoder against a spectral-norm discriminator that sees
   the log-magnitude spectrograms of two adjacent excerpts concatenated in
   time, plus the L1 and multi-scale spectral losses on the waveform.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn
from tqdm import tqdm

from latentwave import dsp, nn_core, settings
from latentwave.audio_io import Waveform, sample_excerpts
from latentwave.config import AEConfig, RunConfig
from latentwave.errors import LatentwaveError, ShapeError
from latentwave.utils import CollapseDetector, LossHistory, check_finite, freeze, module_hash, step_seed

logger = logging.getLogger("latentwave.autoencoder")


def _stage_widths(channels: Sequence[int], n: int) -> List[int]:
    widths = list(channels[:n])
    while len(widths) < n:
        widths.append(widths[-1] if widths else 64)
    return widths


def crop_frames(x: torch.Tensor, margin: int) -> torch.Tensor:
    if margin == 0:
        return x
    return x[..., margin:x.shape[-1] - margin]


class Level1Encoder(nn.Module):
    def __init__(self, bins: int, channels: Sequence[int], latent_dim: int):
        super().__init__()
        self.hidden = nn.ModuleList()
        in_ch = bins
        for ch in channels:
            self.hidden.append(nn_core.make_conv1d(in_ch, ch, 3))
            in_ch = ch
        self.bottleneck = nn_core.make_conv1d(in_ch, latent_dim, 1)

    @property
    def margin(self) -> int:
        return len(self.hidden)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        if s.shape[-1] < 2 * self.margin + 1:
            raise ShapeError(f"{s.shape[-1]} frames is below the encoder receptive field ({2 * self.margin + 1})")
        h = s
        for conv in self.hidden:
            h = nn_core.leaky_relu(nn_core.conv1d(h, conv.weight, conv.bias))
        return nn_core.tanh(nn_core.conv1d(h, self.bottleneck.weight, self.bottleneck.bias))


class Level1Decoder(nn.Module):
    def __init__(self, latent_dim: int, channels: Sequence[int], bins: int):
        super().__init__()
        self.hidden = nn.ModuleList()
        in_ch = latent_dim
        for ch in channels:
            self.hidden.append(nn_core.make_conv1d(in_ch, ch, 3, padding=1))
            in_ch = ch
        self.power_head = nn_core.make_conv1d(in_ch, bins, 1)
        self.phase_head = nn_core.make_conv1d(in_ch, bins, 1)

    @property
    def context(self) -> int:
        """Frames on each side that influence one output frame."""
        return len(self.hidden)

    def forward(self, c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if c.shape[-1] < 1:
            raise ShapeError("Empty latent sequence")
        h = c
        for conv in self.hidden:
            h = nn_core.leaky_relu(nn_core.conv1d(h, conv.weight, conv.bias, padding=1))
        log_power = nn_core.conv1d(h, self.power_head.weight, self.power_head.bias)
        phase = math.pi * nn_core.tanh(nn_core.conv1d(h, self.phase_head.weight, self.phase_head.bias))
        return log_power, phase


class Level1AE(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Level1Encoder(cfg.bins, cfg.enc1_channels, cfg.latent1_dim)
        self.decoder = Level1Decoder(cfg.latent1_dim, cfg.dec1_channels, cfg.bins)
        self.max_log_power = 2.0 * math.log(cfg.fft_size)

    @property
    def margin(self) -> int:
        return self.encoder.margin

    def spectrogram(self, x: torch.Tensor) -> torch.Tensor:
        return dsp.log_mag_spectrogram(x, self.cfg.fft_size, self.cfg.hop_size)

    def encode(self, s: torch.Tensor) -> torch.Tensor:
        return self.encoder(s)

    def encode_waveform(self, x: torch.Tensor) -> torch.Tensor:
        """(..., samples) -> (..., latent1_dim, frames - 2 * margin)."""
        s = self.spectrogram(x)
        lead = s.shape[:-2]
        c = self.encoder(s.reshape(-1, *s.shape[-2:]))
        return c.reshape(*lead, *c.shape[-2:])

    def decode(self, c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.decoder(c)

    def magnitude(self, log_power: torch.Tensor) -> torch.Tensor:
        return torch.exp(0.5 * log_power.clamp(max=self.max_log_power))

    def reconstruct_waveform(self, c: torch.Tensor) -> torch.Tensor:
        log_power, phase = self.decoder(c)
        return dsp.istft(self.magnitude(log_power), phase, self.cfg.fft_size, self.cfg.hop_size)

    def waveform_offset(self) -> int:
        """Sample index of the input that the first reconstructed sample lines up with."""
        return self.margin * self.cfg.hop_size


def encode1(ae: Level1AE, s: torch.Tensor) -> torch.Tensor:
    return ae.encode(s)


def decode1(ae: Level1AE, c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Magnitude (non-negative) and phase (radians) spectrograms."""
    log_power, phase = ae.decode(c)
    return ae.magnitude(log_power), phase


def reconstruct_waveform(ae: Level1AE, c: torch.Tensor) -> torch.Tensor:
    return ae.reconstruct_waveform(c)


class Level2Encoder(nn.Module):
    def __init__(self, latent1_dim: int, channels: Sequence[int], strides: Sequence[int], latent2_dim: int):
        super().__init__()
        self.strides = list(strides)
        self.stages = nn.ModuleList()
        in_ch = latent1_dim
        for stride, ch in zip(self.strides, _stage_widths(channels, len(self.strides))):
            self.stages.append(nn_core.make_conv1d(in_ch, ch, stride, stride=stride))
            in_ch = ch
        self.bottleneck = nn_core.make_conv1d(in_ch, latent2_dim, 1)

    def forward(self, c1: torch.Tensor) -> torch.Tensor:
        ratio = math.prod(self.strides)
        if c1.shape[-1] < ratio or c1.shape[-1] % ratio:
            raise ShapeError(f"Level-2 input length {c1.shape[-1]} must be a positive multiple of {ratio}")
        h = c1
        for conv, stride in zip(self.stages, self.strides):
            h = nn_core.leaky_relu(nn_core.conv1d(h, conv.weight, conv.bias, stride=stride))
        return nn_core.tanh(nn_core.conv1d(h, self.bottleneck.weight, self.bottleneck.bias))


class Level2Decoder(nn.Module):
    def __init__(self, latent2_dim: int, channels: Sequence[int], strides: Sequence[int], latent1_dim: int):
        super().__init__()
        self.strides = list(reversed(strides))
        widths = _stage_widths(channels, max(1, len(self.strides)))
        self.entry = nn_core.make_conv1d(latent2_dim, widths[0], 1)
        self.stages = nn.ModuleList()
        in_ch = widths[0]
        for stride, ch in zip(self.strides, widths):
            self.stages.append(nn_core.make_conv_transpose1d(in_ch, ch, stride, stride=stride))
            in_ch = ch
        self.head = nn_core.make_conv1d(in_ch, latent1_dim, 1)

    def forward(self, c2: torch.Tensor) -> torch.Tensor:
        if c2.shape[-1] < 1:
            raise ShapeError("Empty latent sequence")
        h = nn_core.leaky_relu(nn_core.conv1d(c2, self.entry.weight, self.entry.bias))
        for conv, stride in zip(self.stages, self.strides):
            h = nn_core.leaky_relu(nn_core.conv_transpose1d(h, conv.weight, conv.bias, stride=stride))
        return nn_core.tanh(nn_core.conv1d(h, self.head.weight, self.head.bias))


class Level2AE(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Level2Encoder(cfg.latent1_dim, cfg.enc2_channels, cfg.enc2_strides, cfg.latent2_dim)
        self.decoder = Level2Decoder(cfg.latent2_dim, cfg.dec2_channels, cfg.enc2_strides, cfg.latent1_dim)

    @property
    def ratio(self) -> int:
        return self.cfg.r_time2

    def encode(self, c1: torch.Tensor) -> torch.Tensor:
        return self.encoder(c1)

    def decode(self, c2: torch.Tensor) -> torch.Tensor:
        return self.decoder(c2)

    def reconstruct(self, c1: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(c1))


def encode2(ae: Level2AE, c1: torch.Tensor) -> torch.Tensor:
    return ae.encode(c1)


def decode2(ae: Level2AE, c2: torch.Tensor) -> torch.Tensor:
    return ae.decode(c2)


class AEDiscriminator(nn.Module):
    """
    Spectral-norm 2D conv net over (batch, bins, frames) log-magnitude
    spectrograms; returns one score per example (mean of the patch map).
    """

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        self.convs = nn.ModuleList()
        in_ch = 1
        for ch in channels:
            self.convs.append(nn_core.make_conv2d(in_ch, ch, 3, stride=2, padding=1, sn=True))
            in_ch = ch
        self.head = nn_core.make_conv2d(in_ch, 1, 3, padding=1, sn=True)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        h = spec[:, None]
        for conv in self.convs:
            h = nn_core.leaky_relu(nn_core.conv2d(h, conv.weight, conv.bias, stride=2, padding=1))
        out = nn_core.conv2d(h, self.head.weight, self.head.bias, padding=1)
        return out.mean(dim=(1, 2, 3))


def build_level1(cfg: AEConfig, seed: int = 0) -> Level1AE:
    torch.manual_seed(seed)
    return Level1AE(cfg)


def build_level2(cfg: AEConfig, seed: int = 0) -> Level2AE:
    torch.manual_seed(seed)
    return Level2AE(cfg)


def build_ae_discriminator(cfg: AEConfig, seed: int = 0) -> AEDiscriminator:
    torch.manual_seed(seed)
    return AEDiscriminator(cfg.disc_channels)


def disc_spectrogram(w: torch.Tensor) -> torch.Tensor:
    return dsp.log_mag_spectrogram(w, settings.DISC_FFT_SIZE, settings.DISC_HOP_SIZE)


def pair_spectrogram(w_a: torch.Tensor, w_b: torch.Tensor) -> torch.Tensor:
    """Spectrograms of two adjacent excerpts, concatenated along frames."""
    return torch.cat([disc_spectrogram(w_a), disc_spectrogram(w_b)], dim=-1)


@dataclass
class TrainState:
    """Mutable training progress; persisted by the CLI for resumption."""

    step: int = 0
    optimizers: Dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    history: LossHistory = field(default_factory=LossHistory)


def _optimizer(state: TrainState, name: str, params, lr: float) -> torch.optim.Optimizer:
    if name not in state.optimizers:
        state.optimizers[name] = nn_core.make_optimizer(params, lr)
    return state.optimizers[name]


def _mono_batch(dataset: Sequence[Waveform], n: int, length: int, seed: int) -> torch.Tensor:
    """(n * channels, length): stereo sources are split into independent mono examples."""
    batch = sample_excerpts(dataset, n, length, seed)
    x = torch.from_numpy(batch.excerpts)
    return x.reshape(-1, x.shape[-1])


def _progress(steps: int, state: TrainState, desc: str):
    return tqdm(range(state.step, state.step + steps), desc=desc, leave=False, disable=None)


def phase1_loss(ae: Level1AE, x: torch.Tensor) -> torch.Tensor:
    """Mean |Dec(Enc(s)) - s| over the frames both sides cover."""
    s = ae.spectrogram(x)
    log_power, _ = ae.decode(ae.encode(s))
    return (log_power - crop_frames(s, ae.margin)).abs().mean()


def train_phase1(
    ae: Level1AE,
    dataset: Sequence[Waveform],
    steps: int,
    cfg: RunConfig,
    seed: int = 0,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Joint encoder/decoder training on the log-magnitude L1 loss."""
    state = state or TrainState()
    opt = _optimizer(state, "ae", ae.parameters(), cfg.train.lr)
    ae.train()
    length = cfg.ae.excerpt_samples
    for step in _progress(steps, state, "ae1 phase 1"):
        x = _mono_batch(dataset, cfg.train.batch_size, length, step_seed(seed, step))
        opt.zero_grad()
        loss = check_finite(phase1_loss(ae, x), "phase-1 reconstruction loss")
        loss.backward()
        nn_core.adam_step(opt)
        state.step = step + 1
        state.history.add(step, rec=loss.item())
        if state.step % cfg.train.log_every == 0:
            logger.info(f"ae1 phase 1 step {state.step}: rec={loss.item():.4f}")
            state.history.flush()
    state.history.flush()
    return state


@dataclass
class Level1Pass:
    target: torch.Tensor  # cropped input log-magnitude
    log_power: torch.Tensor
    waveform: torch.Tensor  # reconstruction
    reference: torch.Tensor  # input samples the reconstruction lines up with


def level1_pass(ae: Level1AE, x: torch.Tensor) -> Level1Pass:
    """Enc -> Dec -> iSTFT, with the input cropped to the reconstructed span."""
    s = ae.spectrogram(x)
    log_power, phase = ae.decode(ae.encode(s))
    w_hat = dsp.istft(ae.magnitude(log_power), phase, ae.cfg.fft_size, ae.cfg.hop_size)
    start = ae.waveform_offset()
    reference = x[..., start:start + w_hat.shape[-1]]
    return Level1Pass(crop_frames(s, ae.margin), log_power, w_hat, reference)


def _discriminator_step(d, opt, real, fake, gamma, detector: CollapseDetector) -> Dict[str, float]:
    opt.zero_grad()
    d_real, d_fake = d(real), d(fake.detach())
    loss = nn_core.hinge_d_loss(d_real, d_fake)
    r1 = nn_core.r1_penalty(d, real, gamma)
    check_finite(loss + r1, "discriminator loss").backward()
    nn_core.adam_step(opt)
    real_mean, fake_mean = d_real.mean().item(), d_fake.mean().item()
    detector.update(real_mean, fake_mean)
    return {"d_hinge": loss.item(), "r1": r1.item(), "d_real": real_mean, "d_fake": fake_mean}


def train_phase2(
    ae: Level1AE,
    d: AEDiscriminator,
    dataset: Sequence[Waveform],
    steps: int,
    cfg: RunConfig,
    seed: int = 0,
    state: Optional[TrainState] = None,
) -> TrainState:
    """
    Adversarial decoder fine-tuning with the encoder frozen.

    Each step draws contiguous excerpts of twice the excerpt length, autoencodes
    both halves independently, and compares the concatenated spectrograms.

    Raises:
        NumericalError: NaN losses or a collapsed discriminator.
        LatentwaveError: the frozen encoder changed.
    """
    state = state or TrainState()
    freeze(ae.encoder)
    encoder_hash = module_hash(ae.encoder)
    ae.decoder.train()
    d.train()
    opt_dec = _optimizer(state, "dec", ae.decoder.parameters(), cfg.train.lr)
    opt_d = _optimizer(state, "disc", d.parameters(), cfg.train.lr)
    detector = CollapseDetector()
    length = cfg.ae.excerpt_samples

    for step in _progress(steps, state, "ae1 phase 2"):
        x = _mono_batch(dataset, cfg.train.batch_size, 2 * length, step_seed(seed, step))
        a, b = level1_pass(ae, x[:, :length]), level1_pass(ae, x[:, length:])
        real = pair_spectrogram(a.reference, b.reference)
        fake = pair_spectrogram(a.waveform, b.waveform)

        d_stats = _discriminator_step(d, opt_d, real, fake, cfg.gan.r1_gamma, detector)

        opt_dec.zero_grad()
        adv = nn_core.hinge_g_loss(d(fake))
        rec = 0.5 * ((a.log_power - a.target).abs().mean() + (b.log_power - b.target).abs().mean())
        waveform = torch.cat([a.waveform, b.waveform], dim=0)
        reference = torch.cat([a.reference, b.reference], dim=0)
        ms = dsp.multiscale_spectral_distance(reference, waveform)
        loss = check_finite(adv + cfg.ae.lambda_rec * rec + cfg.ae.lambda_ms * ms, "decoder loss")
        loss.backward()
        nn_core.adam_step(opt_dec)

        state.step = step + 1
        state.history.add(step, dec_adv=adv.item(), rec=rec.item(), ms=ms.item(), **d_stats)
        if state.step % cfg.train.log_every == 0:
            logger.info(
                f"ae1 phase 2 step {state.step}: adv={adv.item():.3f} rec={rec.item():.4f} "
                f"ms={ms.item():.3f} d={d_stats['d_hinge']:.3f}"
            )
            state.history.flush()
    state.history.flush()

    if module_hash(ae.encoder) != encoder_hash:
        raise LatentwaveError("Level-1 encoder weights changed during phase 2")
    return state


def level2_frames(cfg: AEConfig, patches: int = 4) -> int:
    """Level-1 frames in one level-2 training example."""
    return patches * cfg.r_time2


def level2_excerpt_samples(cfg: AEConfig, margin1: int, patches: int = 4) -> int:
    return dsp.num_samples_for(level2_frames(cfg, patches) + 2 * margin1, cfg.fft_size, cfg.hop_size)


def level1_latents(ae1: Level1AE, x: torch.Tensor, r_time2: int) -> torch.Tensor:
    """Frozen level-1 encoding trimmed to a whole number of level-2 steps."""
    with torch.no_grad():
        c1 = ae1.encode_waveform(x)
    usable = (c1.shape[-1] // r_time2) * r_time2
    if usable == 0:
        raise ShapeError(f"{c1.shape[-1]} level-1 frames is shorter than one level-2 step ({r_time2})")
    return c1[..., :usable]


def train_level2_phase1(
    ae2: Level2AE,
    ae1: Level1AE,
    dataset: Sequence[Waveform],
    steps: int,
    cfg: RunConfig,
    seed: int = 0,
    state: Optional[TrainState] = None,
) -> TrainState:
    state = state or TrainState()
    freeze(ae1)
    ae2.train()
    opt = _optimizer(state, "ae", ae2.parameters(), cfg.train.lr)
    length = level2_excerpt_samples(cfg.ae, ae1.margin)
    for step in _progress(steps, state, "ae2 phase 1"):
        x = _mono_batch(dataset, cfg.train.batch_size, length, step_seed(seed, step))
        c1 = level1_latents(ae1, x, ae2.ratio)
        opt.zero_grad()
        loss = check_finite((ae2.reconstruct(c1) - c1).abs().mean(), "level-2 reconstruction loss")
        loss.backward()
        nn_core.adam_step(opt)
        state.step = step + 1
        state.history.add(step, rec=loss.item())
        if state.step % cfg.train.log_every == 0:
            logger.info(f"ae2 phase 1 step {state.step}: rec={loss.item():.4f}")
            state.history.flush()
    state.history.flush()
    return state


def level2_real_fake(ae1: Level1AE, ae2: Level2AE, c1: torch.Tensor):
    """
    Waveforms decoded by Dec1 alone ("real") and by Dec1(Dec2(Enc2(.))) ("fake"),
    plus the level-2 reconstruction of `c1`.
    """
    c1_hat = ae2.reconstruct(c1)
    return ae1.reconstruct_waveform(c1), ae1.reconstruct_waveform(c1_hat), c1_hat


def train_level2_phase2(
    ae2: Level2AE,
    ae1: Level1AE,
    d: AEDiscriminator,
    dataset: Sequence[Waveform],
    steps: int,
    cfg: RunConfig,
    seed: int = 0,
    state: Optional[TrainState] = None,
) -> TrainState:
    state = state or TrainState()
    freeze(ae1, ae2.encoder)
    frozen_hash = module_hash(ae1, ae2.encoder)
    ae2.decoder.train()
    d.train()
    opt_dec = _optimizer(state, "dec", ae2.decoder.parameters(), cfg.train.lr)
    opt_d = _optimizer(state, "disc", d.parameters(), cfg.train.lr)
    detector = CollapseDetector()
    half = level2_frames(cfg.ae)
    length = level2_excerpt_samples(cfg.ae, ae1.margin, patches=8)

    for step in _progress(steps, state, "ae2 phase 2"):
        x = _mono_batch(dataset, cfg.train.batch_size, length, step_seed(seed, step))
        c1 = level1_latents(ae1, x, ae2.ratio)
        real_a, fake_a, hat_a = level2_real_fake(ae1, ae2, c1[..., :half])
        real_b, fake_b, hat_b = level2_real_fake(ae1, ae2, c1[..., half:2 * half])
        real = pair_spectrogram(real_a, real_b).detach()
        fake = pair_spectrogram(fake_a, fake_b)

        d_stats = _discriminator_step(d, opt_d, real, fake, cfg.gan.r1_gamma, detector)

        opt_dec.zero_grad()
        adv = nn_core.hinge_g_loss(d(fake))
        rec = torch.cat([hat_a - c1[..., :half], hat_b - c1[..., half:2 * half]], dim=-1).abs().mean()
        ms = dsp.multiscale_spectral_distance(
            torch.cat([real_a, real_b]).detach(), torch.cat([fake_a, fake_b])
        )
        loss = check_finite(adv + cfg.ae.lambda_rec * rec + cfg.ae.lambda_ms * ms, "level-2 decoder loss")
        loss.backward()
        nn_core.adam_step(opt_dec)

        state.step = step + 1
        state.history.add(step, dec_adv=adv.item(), rec=rec.item(), ms=ms.item(), **d_stats)
        if state.step % cfg.train.log_every == 0:
            logger.info(f"ae2 phase 2 step {state.step}: adv={adv.item():.3f} rec={rec.item():.4f} ms={ms.item():.3f}")
            state.history.flush()
    state.history.flush()

    if module_hash(ae1, ae2.encoder) != frozen_hash:
        raise LatentwaveError("Frozen weights changed during level-2 phase 2")
    return state


def train_level2(
    ae2: Level2AE,
    ae1: Level1AE,
    d: AEDiscriminator,
    dataset: Sequence[Waveform],
    cfg: RunConfig,
    seed: int = 0,
) -> Tuple[TrainState, TrainState]:
    """Both level-2 phases back to back with the step counts from `cfg.train`."""
    p1 = train_level2_phase1(ae2, ae1, dataset, cfg.train.ae2_phase1_steps, cfg, seed)
    p2 = train_level2_phase2(ae2, ae1, d, dataset, cfg.train.ae2_phase2_steps, cfg, seed)
    return p1, p2
