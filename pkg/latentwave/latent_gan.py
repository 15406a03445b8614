"""
Latent-coordinate GAN over level-2 latent sequences.

Anchors (i.i.d. normal vectors) sit every 2 * seq_len coordinate positions;
positions in between are linear interpolations. The generator maps a window
of coordinates, a style vector shared by a whole piece and an optional
conditioning signal to one latent vector per coordinate position. It is
stride-1 and padding-free at the latent rate, so a window extended by
`margin` positions on each side yields exactly seq_len outputs, and two
overlapping windows agree on their overlap.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from latentwave import dsp, nn_core
from latentwave.config import GANConfig, RunConfig
from latentwave.errors import ShapeError
from latentwave.utils import CollapseDetector, LossHistory, check_finite, step_seed

logger = logging.getLogger("latentwave.latent_gan")


# Coordinates
# -----------


@dataclass
class AnchorSet:
    """Anchor vectors (n, d). Training always uses three: w_l, w_c, w_r."""

    vectors: torch.Tensor

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ShapeError(f"AnchorSet needs at least two d-dimensional anchors, got {tuple(self.vectors.shape)}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def w_l(self) -> torch.Tensor:
        return self.vectors[0]

    @property
    def w_c(self) -> torch.Tensor:
        return self.vectors[1]

    @property
    def w_r(self) -> torch.Tensor:
        return self.vectors[2]


def sample_anchors(n: int, dim: int, generator: torch.Generator, dtype=torch.float32) -> AnchorSet:
    return AnchorSet(torch.randn(n, dim, generator=generator, dtype=dtype))


def sample_style(dim: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(dim, generator=generator, dtype=dtype)


@dataclass
class CoordinateSequence:
    vectors: torch.Tensor  # (positions, d)
    anchor_positions: List[int]
    seq_len: int

    def __len__(self):
        return self.vectors.shape[0]

    def window(self, start: int, length: int, margin: int = 0) -> torch.Tensor:
        """
        Positions [start - margin, start + length + margin) as (d, length + 2 * margin).
        Positions past either end repeat the terminal anchor.
        """
        idx = torch.arange(start - margin, start + length + margin).clamp(0, len(self) - 1)
        return self.vectors[idx].t()


def build_coordinate_sequence(anchors: AnchorSet, seq_len: int) -> CoordinateSequence:
    """
    Anchors at multiples of 2 * seq_len with v[i] = (1 - k) * A + k * B,
    k = offset / (2 * seq_len), between neighbours A and B. Three anchors give
    the training length 4 * seq_len + 1.
    """
    if seq_len < 1:
        raise ShapeError(f"seq_len must be >= 1, got {seq_len}")
    span = 2 * seq_len
    vecs = anchors.vectors
    k = (torch.arange(span, dtype=vecs.dtype) / span)[:, None]
    pieces = [(1 - k) * vecs[i] + k * vecs[i + 1] for i in range(vecs.shape[0] - 1)]
    pieces.append(vecs[-1:])
    positions = [i * span for i in range(vecs.shape[0])]
    return CoordinateSequence(torch.cat(pieces, dim=0), positions, seq_len)


@dataclass
class TrainingCrop:
    start: int
    w1: torch.Tensor  # (d, seq_len)
    w2: torch.Tensor


def crop_start(seq_len: int, seed: int) -> int:
    return int(np.random.default_rng(seed).integers(0, 2 * seq_len + 1))


def sample_training_crops(cs: CoordinateSequence, seed: int) -> TrainingCrop:
    """Uniform 2 * seq_len crop of a training sequence, split into two adjacent halves."""
    L = cs.seq_len
    if len(cs) != 4 * L + 1:
        raise ShapeError(f"Training coordinate sequence must have {4 * L + 1} positions, got {len(cs)}")
    start = crop_start(L, seed)
    return TrainingCrop(start, cs.window(start, L), cs.window(start + L, L))


# Conditioning
# ------------


@dataclass
class ConditioningSignal:
    """Per latent-2 timestep values in [0, 1]; `values is None` means unconditional."""

    kind: str = "none"
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("none", "note_density", "tempo"):
            raise ValueError(f"Unknown conditioning kind {self.kind}")
        if self.values is not None:
            self.values = np.clip(np.asarray(self.values, dtype=np.float32), 0.0, 1.0)

    @property
    def active(self) -> bool:
        return self.values is not None

    def aligned(self, n: int) -> np.ndarray:
        """Exactly `n` values, holding the last value when the signal is shorter."""
        if self.values is None:
            raise ValueError("Unconditional signal has no values")
        if len(self.values) >= n:
            return self.values[:n]
        return np.concatenate([self.values, np.full(n - len(self.values), self.values[-1], dtype=np.float32)])


def scale_tempo(bpm: float, bpm_range: Tuple[float, float]) -> float:
    lo, hi = bpm_range
    if hi <= lo:
        return 0.5
    return float(np.clip((bpm - lo) / (hi - lo), 0.0, 1.0))


def tempo_condition(bpm: float, bpm_range: Tuple[float, float], n: int) -> ConditioningSignal:
    return ConditioningSignal("tempo", np.full(n, scale_tempo(bpm, bpm_range), dtype=np.float32))


def density_condition(samples: np.ndarray, sample_rate: int, n: int, rate: float, d_ref: float) -> ConditioningSignal:
    """Note-density signal of a mono waveform, one value per latent-2 timestep."""
    onsets = dsp.spectral_flux_onsets(samples, sample_rate)
    signal = dsp.kde_density(onsets, len(samples) / sample_rate, d_ref=d_ref)
    return ConditioningSignal("note_density", dsp.resample_signal(signal.values, signal.rate, rate, n))


def pad_condition(cond: torch.Tensor, margin: int) -> torch.Tensor:
    """Edge-replicate a (B, 1, T) conditioning batch by `margin` on both sides."""
    if margin == 0:
        return cond
    return torch.cat([cond[..., :1].expand(-1, -1, margin), cond, cond[..., -1:].expand(-1, -1, margin)], dim=-1)


# Networks
# --------


def center_crop(x: torch.Tensor, length: int) -> torch.Tensor:
    off = (x.shape[-1] - length) // 2
    if off < 0:
        raise ShapeError(f"Cannot crop {x.shape[-1]} positions to {length}")
    return x[..., off:off + length]


class GeneratorBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, coord_dim: int, style_dim: int, kernel_size: int, window: int):
        super().__init__()
        self.conv = nn_core.make_conv1d(in_ch, out_ch, kernel_size)
        self.norm = nn_core.SAAdaIN(out_ch, coord_dim, style_dim, window)

    @property
    def shrink(self) -> int:
        return self.conv.kernel_size[0] - 1 + self.norm.shrink

    def forward(self, h, coords, style):
        h = nn_core.ordered_conv1d(h, self.conv.weight, self.conv.bias)
        out_len = h.shape[-1] - self.norm.shrink
        return nn_core.leaky_relu(self.norm(h, center_crop(coords, out_len), style))


class Generator(nn.Module):
    """
    Coordinates (B, d, T), style (B, S), cond (B, 1, T) -> latents (B, out, T - 2 * margin).

    Block i output gates block i + 3 output through an SLE whose pooling
    window spans exactly the shrink between the two.
    """

    def __init__(self, cfg: GANConfig, latent2_dim: int):
        super().__init__()
        self.cfg = cfg
        self.out_channels = latent2_dim * cfg.audio_channels
        coord_dim = cfg.coord_dim + cfg.cond_channels
        self.blocks = nn.ModuleList()
        in_ch = coord_dim
        for _ in range(cfg.n_blocks):
            self.blocks.append(
                GeneratorBlock(in_ch, cfg.channels, coord_dim, cfg.style_dim, cfg.kernel_size, cfg.norm_window)
            )
            in_ch = cfg.channels
        self.sle = nn.ModuleDict()
        for i in range(cfg.n_blocks - 3):
            window = sum(b.shrink for b in self.blocks[i + 1:i + 4]) + 1
            self.sle[str(i + 3)] = nn_core.SLE(cfg.channels, cfg.channels, window)
        self.head = nn_core.make_conv1d(cfg.channels, self.out_channels, 1)

    @property
    def margin(self) -> int:
        return sum(b.shrink for b in self.blocks) // 2

    def forward(self, coords: torch.Tensor, style: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        if (cond is not None) != (self.cfg.cond_channels > 0):
            raise ShapeError("Conditioning input does not match the generator configuration")
        if coords.shape[-1] <= 2 * self.margin:
            raise ShapeError(f"Coordinate window of {coords.shape[-1]} is within the margin ({self.margin} per side)")
        z = coords if cond is None else torch.cat([coords, cond], dim=1)
        h, feats = z, []
        for i, block in enumerate(self.blocks):
            h = block(h, z, style)
            if str(i) in self.sle:
                h = self.sle[str(i)](feats[i - 3], h)
            feats.append(h)
        return nn_core.ordered_tanh(nn_core.ordered_conv1d(h, self.head.weight, self.head.bias))


class LatentDiscriminator(nn.Module):
    """
    Spectral-norm 1D conv stack over (B, channels [+ cond], 2 * seq_len) with a
    lightweight decoder reconstructing the unconditioned input from the
    feature map at half depth.
    """

    def __init__(self, cfg: GANConfig, latent2_dim: int):
        super().__init__()
        self.in_channels = latent2_dim * cfg.audio_channels
        self.convs = nn.ModuleList()
        in_ch = self.in_channels + cfg.cond_channels
        for ch in cfg.disc_channels:
            self.convs.append(nn_core.make_conv1d(in_ch, ch, 3, stride=2, padding=1, sn=True))
            in_ch = ch
        self.head = nn_core.make_conv1d(in_ch, 1, 3, padding=1, sn=True)
        self.tap = max(1, len(self.convs) // 2)
        width = cfg.disc_channels[self.tap - 1]
        self.aux = nn.ModuleList([nn_core.make_conv1d(width, width, 3, padding=1) for _ in range(self.tap)])
        self.aux_out = nn_core.make_conv1d(width, self.in_channels, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (score per example, features at half depth)."""
        h, tapped = x, None
        for i, conv in enumerate(self.convs):
            h = nn_core.leaky_relu(nn_core.conv1d(h, conv.weight, conv.bias, stride=2, padding=1))
            if i + 1 == self.tap:
                tapped = h
        out = nn_core.conv1d(h, self.head.weight, self.head.bias, padding=1)
        return out.mean(dim=(1, 2)), tapped

    def score(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    def reconstruct(self, feats: torch.Tensor, length: int) -> torch.Tensor:
        h = feats
        for conv in self.aux:
            h = torch.repeat_interleave(h, 2, dim=-1)
            h = nn_core.leaky_relu(nn_core.conv1d(h, conv.weight, conv.bias, padding=1))
        h = h[..., :length]
        if h.shape[-1] != length:
            raise ShapeError(f"Auxiliary decoder produced {h.shape[-1]} positions, expected {length}")
        return nn_core.tanh(nn_core.conv1d(h, self.aux_out.weight, self.aux_out.bias))


def build_generator(cfg: RunConfig, seed: int = 0) -> Generator:
    torch.manual_seed(seed)
    return Generator(cfg.gan, cfg.ae.latent2_dim)


def build_latent_discriminator(cfg: RunConfig, seed: int = 0) -> LatentDiscriminator:
    torch.manual_seed(seed)
    return LatentDiscriminator(cfg.gan, cfg.ae.latent2_dim)


def generate_patch(
    g: Generator,
    cs: CoordinateSequence,
    start: int,
    style: torch.Tensor,
    cond: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Latents (out_channels, seq_len) for coordinate positions [start, start + seq_len).

    Args:
        cond: (positions,) conditioning aligned with `cs`, or None.
    """
    L, m = cs.seq_len, g.margin
    coords = cs.window(start, L, m)[None]
    cond_win = None
    if cond is not None:
        idx = torch.arange(start - m, start + L + m).clamp(0, cond.shape[-1] - 1)
        cond_win = cond[idx].to(coords.dtype)[None, None]
    out = g(coords, style.to(coords.dtype)[None], cond_win)[0]
    if out.shape[-1] != L:
        raise ShapeError(f"Generator returned {out.shape[-1]} positions, expected {L}")
    return out


# Training
# --------


def random_orthogonal(n: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Haar-distributed orthogonal matrices, shape (n, 2, 2)."""
    q, r = torch.linalg.qr(torch.randn(n, 2, 2, generator=generator, dtype=dtype))
    signs = torch.sign(torch.diagonal(r, dim1=-2, dim2=-1))
    signs[signs == 0] = 1.0
    return q * signs[:, None, :]


def ccm(
    x: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    matrices: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Cross-channel mixing of stereo-stacked latents (B, 2 * D, T).

    Returns the mixed batch and the (B, 2, 2) orthogonal matrices used.
    Either `generator` or `matrices` must be given.
    """
    if generator is None and matrices is None:
        raise ValueError("ccm needs a generator or explicit matrices")
    if x.ndim != 3 or x.shape[1] % 2:
        raise ValueError(f"ccm expects stereo-stacked latents (B, 2 * D, T), got {tuple(x.shape)}")
    B, C, T = x.shape
    if matrices is None:
        matrices = random_orthogonal(B, generator, x.dtype)
    mixed = torch.einsum("bij,bjdt->bidt", matrices.to(x.dtype), x.reshape(B, 2, C // 2, T))
    return mixed.reshape(B, C, T), matrices


@dataclass
class FakeBatch:
    latents: torch.Tensor  # (B, out, 2 * seq_len)
    starts: List[int]


def generate_training_pair(
    g: Generator,
    batch: int,
    cfg: GANConfig,
    generator: torch.Generator,
    seed: int,
    cond: Optional[torch.Tensor] = None,
) -> FakeBatch:
    """
    Fresh anchors and style per example; fake = concat[G(w1, z), G(w2, z)].

    Args:
        cond: (B, 1, 2 * seq_len) conditioning for the output positions.
    """
    L, m = cfg.seq_len, g.margin
    coords1, coords2, styles, starts = [], [], [], []
    for i in range(batch):
        cs = build_coordinate_sequence(sample_anchors(3, cfg.coord_dim, generator), L)
        start = crop_start(L, step_seed(seed, i))
        coords1.append(cs.window(start, L, m))
        coords2.append(cs.window(start + L, L, m))
        styles.append(sample_style(cfg.style_dim, generator))
        starts.append(start)
    style = torch.stack(styles)
    c1 = c2 = None
    if cond is not None:
        padded = pad_condition(cond, m)
        c1, c2 = padded[..., :L + 2 * m], padded[..., L:]
    fake = torch.cat([g(torch.stack(coords1), style, c1), g(torch.stack(coords2), style, c2)], dim=-1)
    return FakeBatch(fake, starts)


def _disc_input(x: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
    return x if cond is None else torch.cat([x, cond.to(x.dtype)], dim=1)


def gan_training_step(
    g: Generator,
    d: LatentDiscriminator,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    real: torch.Tensor,
    cond: Optional[torch.Tensor],
    seed: int,
    cfg: GANConfig,
) -> Dict[str, float]:
    """One discriminator update followed by one generator update."""
    if real.shape[-1] != 2 * cfg.seq_len:
        raise ShapeError(f"Real windows must have {2 * cfg.seq_len} positions, got {real.shape[-1]}")
    gen = torch.Generator().manual_seed(seed)
    fake = generate_training_pair(g, real.shape[0], cfg, gen, seed, cond).latents
    if fake.shape != real.shape:
        raise ShapeError(f"Fake batch {tuple(fake.shape)} does not match real batch {tuple(real.shape)}")
    if cfg.stereo:
        real, _ = ccm(real, gen)
        fake, _ = ccm(fake, gen)

    real_in = _disc_input(real, cond)
    opt_d.zero_grad()
    d_real, feats = d(real_in)
    d_fake = d.score(_disc_input(fake.detach(), cond))
    hinge = nn_core.hinge_d_loss(d_real, d_fake)
    aux = (d.reconstruct(feats, real.shape[-1]) - real).abs().mean()
    r1 = nn_core.r1_penalty(d.score, real_in, cfg.r1_gamma)
    d_loss = check_finite(hinge + cfg.lambda_disc_rec * aux + r1, "discriminator loss")
    d_loss.backward()
    nn_core.adam_step(opt_d)

    opt_g.zero_grad()
    g_loss = check_finite(nn_core.hinge_g_loss(d.score(_disc_input(fake, cond))), "generator loss")
    g_loss.backward()
    nn_core.adam_step(opt_g)

    return {
        "d_hinge": hinge.item(),
        "d_aux": aux.item(),
        "r1": r1.item(),
        "g_adv": g_loss.item(),
        "d_real": d_real.mean().item(),
        "d_fake": d_fake.mean().item(),
    }


@dataclass
class GANState:
    step: int = 0
    opt_g: Optional[torch.optim.Optimizer] = None
    opt_d: Optional[torch.optim.Optimizer] = None
    history: Optional[LossHistory] = None


def train_gan(
    g: Generator,
    d: LatentDiscriminator,
    windows: np.ndarray,
    steps: int,
    cfg: RunConfig,
    cond: Optional[np.ndarray] = None,
    seed: int = 0,
    state: Optional[GANState] = None,
) -> GANState:
    """
    Args:
        windows: real latent windows (N, out_channels, 2 * seq_len).
        cond: matching conditioning (N, 2 * seq_len) or None.
    """
    state = state or GANState()
    state.opt_g = state.opt_g or nn_core.make_optimizer(g.parameters(), cfg.train.lr)
    state.opt_d = state.opt_d or nn_core.make_optimizer(d.parameters(), cfg.train.lr)
    state.history = state.history or LossHistory()
    if (cond is not None) != (cfg.gan.cond_channels > 0):
        raise ShapeError("Conditioning data does not match gan.conditioning")
    g.train()
    d.train()
    detector = CollapseDetector()
    for step in tqdm(range(state.step, state.step + steps), desc="gan", leave=False, disable=None):
        rng = np.random.default_rng(step_seed(seed, step))
        idx = rng.integers(0, len(windows), size=cfg.train.batch_size)
        real = torch.from_numpy(windows[idx])
        c = None if cond is None else torch.from_numpy(cond[idx])[:, None]
        stats = gan_training_step(g, d, state.opt_g, state.opt_d, real, c, step_seed(seed, step), cfg.gan)
        detector.update(stats["d_real"], stats["d_fake"])
        state.step = step + 1
        state.history.add(step, **stats)
        if state.step % cfg.train.log_every == 0:
            logger.info(
                f"gan step {state.step}: d={stats['d_hinge']:.3f} g={stats['g_adv']:.3f} "
                f"gap={stats['d_real'] - stats['d_fake']:.3f}"
            )
            state.history.flush()
    state.history.flush()
    return state
