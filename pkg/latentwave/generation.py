"""
Arbitrary-length generation.

A plan fixes every random draw up front (anchors every 2 * seq_len
positions, one style vector, the conditioning curve). Patches of seq_len
latents are generated independently and concatenated; the level-2 and
level-1 decoders and a single iSTFT turn them into audio.
"""
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from latentwave import dsp
from latentwave.audio_io import Waveform
from latentwave.autoencoder import Level1AE, Level2AE
from latentwave.config import RunConfig
from latentwave.errors import ShapeError
from latentwave.latent_gan import (
    AnchorSet,
    ConditioningSignal,
    CoordinateSequence,
    Generator,
    build_coordinate_sequence,
    generate_patch,
    sample_anchors,
    sample_style,
)
from latentwave.utils import array_hash, check_finite

logger = logging.getLogger("latentwave.generation")

# Level-1 latent frames decoded per task.
DECODE_CHUNK_FRAMES = 256


@dataclass
class GenerationPlan:
    seed: int
    duration_s: float
    seq_len: int
    total_patches: int
    latent2_rate: float
    sample_rate: int
    anchors: AnchorSet
    style: torch.Tensor
    cond: ConditioningSignal

    @property
    def anchor_positions(self) -> List[int]:
        return [i * 2 * self.seq_len for i in range(self.anchors.vectors.shape[0])]

    @property
    def windows(self) -> List[Tuple[int, int]]:
        L = self.seq_len
        return [(i * L, (i + 1) * L) for i in range(self.total_patches)]

    @property
    def positions(self) -> int:
        return self.total_patches * self.seq_len

    def coordinates(self) -> CoordinateSequence:
        return build_coordinate_sequence(self.anchors, self.seq_len)

    def cond_tensor(self) -> Optional[torch.Tensor]:
        if not self.cond.active:
            return None
        return torch.from_numpy(self.cond.aligned(self.positions))


def plan_positions(duration_s: float, cfg: RunConfig) -> int:
    """Latent-2 positions covered by a plan of `duration_s`, rounded up to whole patches."""
    L = cfg.gan.seq_len
    return max(1, math.ceil(duration_s * cfg.ae.latent2_rate / L - 1e-9)) * L


def build_plan(
    duration_s: float,
    seed: int,
    cfg: RunConfig,
    cond: Optional[ConditioningSignal] = None,
) -> GenerationPlan:
    """total_patches = ceil(duration * latent2_rate / seq_len); ceil(patches / 2) + 1 anchors."""
    if duration_s <= 0:
        raise ShapeError(f"duration must be positive, got {duration_s}")
    L = cfg.gan.seq_len
    patches = plan_positions(duration_s, cfg) // L
    gen = torch.Generator().manual_seed(seed)
    anchors = sample_anchors(math.ceil(patches / 2) + 1, cfg.gan.coord_dim, gen)
    style = sample_style(cfg.gan.style_dim, gen)
    cond = cond or ConditioningSignal()
    if cond.active != (cfg.gan.cond_channels > 0):
        raise ShapeError(f"Model conditioning is {cfg.gan.conditioning!r} but the plan signal is {cond.kind!r}")
    return GenerationPlan(
        seed, float(duration_s), L, patches, cfg.ae.latent2_rate, cfg.ae.sample_rate, anchors, style, cond
    )


def generate_latents(plan: GenerationPlan, g: Generator, workers: int = 1) -> torch.Tensor:
    """(out_channels, total_patches * seq_len); one task per patch."""
    g.eval()
    cs = plan.coordinates()
    cond = plan.cond_tensor()

    def patch(window: Tuple[int, int]) -> torch.Tensor:
        with torch.no_grad():
            return generate_patch(g, cs, window[0], plan.style, cond)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            patches = list(pool.map(patch, plan.windows))
    else:
        patches = [patch(w) for w in plan.windows]
    return check_finite(torch.cat(patches, dim=-1), "generated latents")


def _decode_level1_chunked(ae1: Level1AE, c1: torch.Tensor, workers: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Level-1 decoding in contiguous chunks, each padded by the decoder context and trimmed back."""
    T = c1.shape[-1]
    ctx = ae1.decoder.context
    bounds = [(a, min(a + DECODE_CHUNK_FRAMES, T)) for a in range(0, T, DECODE_CHUNK_FRAMES)]

    def chunk(bound: Tuple[int, int]):
        a, b = bound
        lo, hi = max(0, a - ctx), min(T, b + ctx)
        with torch.no_grad():
            log_power, phase = ae1.decode(c1[..., lo:hi])
        keep = slice(a - lo, a - lo + (b - a))
        return ae1.magnitude(log_power[..., keep]), phase[..., keep]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(chunk, bounds))
    else:
        parts = [chunk(b) for b in bounds]
    mag = torch.cat([p[0] for p in parts], dim=-1)
    phase = torch.cat([p[1] for p in parts], dim=-1)
    return mag, phase


def decode_only(
    latents: torch.Tensor,
    ae2: Level2AE,
    ae1: Level1AE,
    channels: int = 1,
    workers: int = 1,
) -> Waveform:
    """
    Dec2 -> Dec1 -> iSTFT on stacked level-2 latents (channels * latent2_dim, T2).
    """
    ae1.eval()
    ae2.eval()
    if latents.shape[0] != channels * ae2.cfg.latent2_dim:
        raise ShapeError(f"Expected {channels} x {ae2.cfg.latent2_dim} latent channels, got {latents.shape[0]}")
    c2 = latents.reshape(channels, ae2.cfg.latent2_dim, latents.shape[-1])
    with torch.no_grad():
        c1 = ae2.decode(c2)
    mag, phase = _decode_level1_chunked(ae1, c1, workers)
    with torch.no_grad():
        audio = dsp.istft(mag, phase, ae1.cfg.fft_size, ae1.cfg.hop_size)
    audio = check_finite(audio, "decoded audio")
    return Waveform(audio.numpy(), ae1.cfg.sample_rate)


def generate(
    plan: GenerationPlan,
    g: Generator,
    ae2: Level2AE,
    ae1: Level1AE,
    workers: int = 1,
) -> Waveform:
    latents = generate_latents(plan, g, workers)
    w = decode_only(latents, ae2, ae1, g.cfg.audio_channels, workers)
    target = int(round(plan.duration_s * plan.sample_rate))
    if w.num_samples > target:
        w = Waveform(w.samples[:, :target], w.sample_rate)
    return w


def random_walk_density(n: int, seed: int, step_std: float = 0.05, start: Optional[float] = None) -> ConditioningSignal:
    """Gaussian random walk reflected into [0, 1]."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.2, 0.8) if start is None else start
    x = x0 + np.cumsum(rng.normal(0.0, step_std, size=n))
    folded = np.mod(x, 2.0)
    return ConditioningSignal("note_density", np.where(folded > 1.0, 2.0 - folded, folded))


def constant_condition(value: float, n: int, kind: str = "note_density") -> ConditioningSignal:
    return ConditioningSignal(kind, np.full(n, value, dtype=np.float32))


@dataclass
class RTFReport:
    audio_seconds: float
    repetitions: int
    generation_mean: float
    generation_std: float
    decoding_mean: float
    decoding_std: float
    total_mean: float
    total_std: float

    def table(self) -> str:
        rows = [
            ("latent generation", self.generation_mean, self.generation_std),
            ("decoding", self.decoding_mean, self.decoding_std),
            ("total", self.total_mean, self.total_std),
        ]
        lines = [f"{'stage':<20}{'RTF mean':>12}{'RTF std':>12}"]
        lines += [f"{name:<20}{mean:>11.1f}x{std:>11.1f}x" for name, mean, std in rows]
        lines.append(f"({self.repetitions} trials, {self.audio_seconds:.1f} s of audio each)")
        return "\n".join(lines)

    def csv(self) -> str:
        return "\n".join(
            [
                "stage,rtf_mean,rtf_std,audio_seconds,repetitions",
                f"generation,{self.generation_mean:.6g},{self.generation_std:.6g},{self.audio_seconds},{self.repetitions}",
                f"decoding,{self.decoding_mean:.6g},{self.decoding_std:.6g},{self.audio_seconds},{self.repetitions}",
                f"total,{self.total_mean:.6g},{self.total_std:.6g},{self.audio_seconds},{self.repetitions}",
            ]
        ) + "\n"


def benchmark_rtf(
    plan: GenerationPlan,
    g: Generator,
    ae2: Level2AE,
    ae1: Level1AE,
    repetitions: int = 100,
    workers: int = 1,
) -> RTFReport:
    """
    Real-time factor (audio seconds per wall-clock second) over repeated runs.
    Coordinate construction counts as generation; model loading is excluded.
    """
    gen_times, dec_times = [], []
    audio_seconds = plan.duration_s
    for _ in range(repetitions):
        t0 = time.perf_counter()
        latents = generate_latents(plan, g, workers)
        t1 = time.perf_counter()
        w = decode_only(latents, ae2, ae1, g.cfg.audio_channels, workers)
        t2 = time.perf_counter()
        gen_times.append(t1 - t0)
        dec_times.append(t2 - t1)
        audio_seconds = min(w.duration, plan.duration_s)

    def rtf(times: List[float]) -> Tuple[float, float]:
        r = audio_seconds / np.maximum(np.asarray(times), 1e-9)
        return float(r.mean()), float(r.std())

    gen, dec = rtf(gen_times), rtf(dec_times)
    total = rtf([a + b for a, b in zip(gen_times, dec_times)])
    report = RTFReport(audio_seconds, repetitions, *gen, *dec, *total)
    logger.info(f"RTF over {repetitions} trials: total {report.total_mean:.1f}x")
    return report


def write_sidecar(path: Union[str, Path], plan: GenerationPlan, report: Optional[RTFReport] = None, **extra):
    meta = {
        "seed": plan.seed,
        "duration_s": plan.duration_s,
        "seq_len": plan.seq_len,
        "total_patches": plan.total_patches,
        "anchors": plan.anchors.vectors.shape[0],
        "anchors_sha256": array_hash(plan.anchors.vectors.numpy()),
        "style_sha256": array_hash(plan.style.numpy()),
        "conditioning": plan.cond.kind,
        "rtf": asdict(report) if report is not None else None,
    }
    meta.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
