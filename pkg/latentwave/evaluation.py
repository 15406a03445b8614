"""
Evaluation: log-mel Fréchet distance between corpora, reconstruction
distances of the autoencoders, and report tables.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import linalg

from latentwave import dsp, settings
from latentwave.audio_io import Waveform, sample_excerpts
from latentwave.autoencoder import Level1AE, Level2AE
from latentwave.config import RunConfig
from latentwave.errors import ShapeError
from latentwave.generation import (
    build_plan,
    constant_condition,
    decode_only,
    generate,
    plan_positions,
    random_walk_density,
)
from latentwave.latent_gan import ConditioningSignal, Generator, tempo_condition

logger = logging.getLogger("latentwave.evaluation")


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def embed_windows(w: Waveform, window_s: float = settings.EMBED_WINDOW_S, n_mels: int = settings.N_MELS) -> np.ndarray:
    """One mean log-mel vector per non-overlapping window of a (mono-mixed) waveform."""
    samples = w.to_mono().samples[0].astype(np.float64)
    size = int(round(window_s * w.sample_rate))
    n = samples.shape[0] // size
    if n == 0:
        return np.zeros((0, n_mels))
    frames = torch.from_numpy(samples[:n * size].reshape(n, size))
    feats = dsp.log_mel(frames, w.sample_rate, n_mels)
    return feats.mean(dim=-2).numpy()


def stats_from_features(features: np.ndarray) -> EmbeddingStats:
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / max(1, features.shape[0] - 1)
    return EmbeddingStats(mean, cov, features.shape[0])


def embed_corpus(waveforms: Sequence[Waveform], window_s: float = settings.EMBED_WINDOW_S) -> EmbeddingStats:
    feats = [embed_windows(w, window_s) for w in waveforms]
    feats = np.concatenate(feats) if feats else np.zeros((0, settings.N_MELS))
    if feats.shape[0] == 0:
        raise ShapeError(f"Corpus is shorter than one {window_s} s embedding window")
    return stats_from_features(feats)


def frechet_spectral_distance(a: EmbeddingStats, b: EmbeddingStats, eps: float = settings.FRECHET_EPS) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with eps * I added to
    both covariances so the product is never singular.
    """
    if a.dim != b.dim or a.cov.shape != b.cov.shape:
        raise ShapeError(f"Embedding dimensions differ: {a.dim} vs {b.dim}")
    eye = np.eye(a.dim)
    cov_a, cov_b = a.cov + eps * eye, b.cov + eps * eye
    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(covmean).all():
        logger.warning(f"sqrtm of the covariance product is not finite; retrying with offset {settings.FRECHET_EPS}")
        offset = settings.FRECHET_EPS * eye
        covmean, _ = linalg.sqrtm((cov_a + offset) @ (cov_b + offset), disp=False)
    # imaginary parts are round-off from a near-singular product
    covmean = covmean.real
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean)
    return float(max(value, 0.0))


def reconstruction_distances(
    ae1: Level1AE,
    ae2: Optional[Level2AE],
    dataset: Sequence[Waveform],
    n: int = 16,
    seed: int = 0,
) -> Dict[str, float]:
    """Mean multi-scale spectral distance of level-1 and level-1+2 round trips on random excerpts."""
    ae1.eval()
    cfg = ae1.cfg
    ratio = ae2.ratio if ae2 is not None else 1
    # reconstructions must span the coarsest multi-scale STFT
    longest = 4 * max(settings.MS_HOPS)
    usable = max(8, -(-(dsp.num_frames(longest, cfg.fft_size, cfg.hop_size) + 1) // ratio)) * ratio
    frames = usable + 2 * ae1.margin
    length = dsp.num_samples_for(frames, cfg.fft_size, cfg.hop_size)
    x = torch.from_numpy(sample_excerpts(dataset, n, length, seed).excerpts)
    x = x.reshape(-1, length)
    out = {}
    with torch.no_grad():
        c1 = ae1.encode_waveform(x)
        w1 = ae1.reconstruct_waveform(c1)
        start = ae1.waveform_offset()
        out["level1"] = dsp.multiscale_spectral_distance(x[:, start:start + w1.shape[-1]], w1).item()
        if ae2 is not None:
            c1 = c1[..., : (c1.shape[-1] // ratio) * ratio]
            w2 = ae1.reconstruct_waveform(ae2.reconstruct(c1))
            out["level2"] = dsp.multiscale_spectral_distance(x[:, start:start + w2.shape[-1]], w2).item()
    logger.info("Reconstruction distances: " + ", ".join(f"{k}={v:.3f}" for k, v in out.items()))
    return out


@dataclass
class QualityRow:
    label: str
    distance: float
    seconds: float


def _condition_for(label: str, n: int, seed: int, cfg: RunConfig, bpm_range) -> ConditioningSignal:
    if label == "unconditional":
        return ConditioningSignal()
    if label == "random walk":
        return random_walk_density(n, seed)
    value = float(label.split()[-1])
    if cfg.gan.conditioning == "tempo":
        lo, hi = bpm_range
        return tempo_condition(lo + value * (hi - lo), bpm_range, n)
    return constant_condition(value, n)


def quality_labels(cfg: RunConfig, levels: Sequence[float] = settings.QUALITY_LEVELS) -> List[str]:
    if cfg.gan.conditioning == "none":
        return ["unconditional"]
    labels = [f"const {v:.2f}" for v in levels]
    if cfg.gan.conditioning == "note_density":
        labels.insert(0, "random walk")
    return labels


def quality_report(
    g: Generator,
    ae2: Level2AE,
    ae1: Level1AE,
    cfg: RunConfig,
    reference: EmbeddingStats,
    levels: Sequence[float] = settings.QUALITY_LEVELS,
    seconds: float = settings.QUALITY_MIN_SECONDS,
    pieces: int = 4,
    seed: int = 0,
    bpm_range=(120.0, 120.0),
    workers: int = 1,
) -> List[QualityRow]:
    """Fréchet distance to `reference` per conditioning setting, over >= `seconds` of generated audio each."""
    rows = []
    piece_s = seconds / pieces
    for label in quality_labels(cfg, levels):
        generated = []
        for p in range(pieces):
            piece_seed = seed * 1000 + p
            cond = _condition_for(label, plan_positions(piece_s, cfg), piece_seed, cfg, bpm_range)
            plan = build_plan(piece_s, piece_seed, cfg, cond)
            generated.append(generate(plan, g, ae2, ae1, workers))
        total = sum(w.duration for w in generated)
        distance = frechet_spectral_distance(embed_corpus(generated), reference)
        rows.append(QualityRow(label, distance, total))
        logger.info(f"Quality [{label}]: {distance:.4f} over {total:.1f} s")
    return rows


def format_quality_table(rows: Sequence[QualityRow]) -> str:
    lines = [f"{'conditioning':<18}{'FSD':>10}{'seconds':>10}"]
    lines += [f"{r.label:<18}{r.distance:>10.3f}{r.seconds:>10.1f}" for r in rows]
    return "\n".join(lines)


def quality_csv(rows: Sequence[QualityRow]) -> str:
    return "conditioning,fsd,seconds\n" + "".join(f"{r.label},{r.distance:.6g},{r.seconds:.3f}\n" for r in rows)


def latent_roundtrip(ae1: Level1AE, ae2: Level2AE, w: Waveform) -> Waveform:
    """Encode a waveform through both levels and decode it again (codec use)."""
    with torch.no_grad():
        c1 = ae1.encode_waveform(torch.from_numpy(w.samples))
        c1 = c1[..., : (c1.shape[-1] // ae2.ratio) * ae2.ratio]
        c2 = ae2.encode(c1)
    return decode_only(c2.reshape(-1, c2.shape[-1]), ae2, ae1, channels=w.channels)
