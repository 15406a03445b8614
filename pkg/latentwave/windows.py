"""
Offline encoding of the training corpus into real level-2 latent windows.

Each source file is encoded once through the frozen encoders and cached as
one file holding a header (dims, rates, encoder hash) and float32 latents.
A cache written by different encoder weights is ignored and rebuilt.
"""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from latentwave import checkpoint, dsp
from latentwave.audio_io import Waveform
from latentwave.autoencoder import Level1AE, Level2AE
from latentwave.errors import CheckpointError, ShapeError
from latentwave.latent_gan import ConditioningSignal
from latentwave.utils import module_hash

logger = logging.getLogger("latentwave.windows")


@dataclass
class WindowCorpus:
    windows: np.ndarray  # (N, channels * latent2_dim, window_len)
    cond: Optional[np.ndarray]  # (N, window_len)
    sources: np.ndarray  # file index of each window
    encoder_hash: str
    header: dict = field(default_factory=dict)

    def __len__(self):
        return self.windows.shape[0]


def encoder_hash(ae1: Level1AE, ae2: Level2AE) -> str:
    return module_hash(ae1.encoder, ae2.encoder)


def encode_latents(ae1: Level1AE, ae2: Level2AE, w: Waveform) -> np.ndarray:
    """
    Level-2 latents of a whole source, channels stacked: (channels * latent2_dim, T2).
    """
    with torch.no_grad():
        x = torch.from_numpy(w.samples)
        c1 = ae1.encode_waveform(x)
        usable = (c1.shape[-1] // ae2.ratio) * ae2.ratio
        if usable == 0:
            raise ShapeError(f"Source of {w.duration:.2f} s is too short for one level-2 step")
        c2 = ae2.encode(c1[..., :usable])
    return c2.reshape(-1, c2.shape[-1]).numpy().astype(np.float32)


def _cache_path(cache_dir: Path, source: Union[str, Path, int]) -> Path:
    key = hashlib.sha1(str(source).encode("utf-8")).hexdigest()[:16]
    return cache_dir / f"{key}.lat"


def _read_cache(path: Path, expected_hash: str) -> Optional[np.ndarray]:
    if not path.exists():
        return None
    try:
        ckpt = checkpoint.load(path)
    except CheckpointError as e:
        logger.warning(f"Ignoring unreadable latent cache {path}: {e}")
        return None
    if ckpt.config.get("encoder_hash") != expected_hash:
        logger.info(f"Latent cache {path.name} was written by other encoder weights, re-encoding")
        return None
    return ckpt.tensors["latents"]


def _write_cache(path: Path, latents: np.ndarray, enc_hash: str, ae2: Level2AE, source):
    header = {
        "kind": "latent_cache",
        "source": str(source),
        "encoder_hash": enc_hash,
        "channels": int(latents.shape[0]),
        "frames": int(latents.shape[1]),
        "latent2_dim": ae2.cfg.latent2_dim,
        "latent2_rate": ae2.cfg.latent2_rate,
    }
    checkpoint.save(path, checkpoint.Checkpoint(header, {"latents": latents}))


def prepare_real_windows(
    dataset: Sequence[Waveform],
    ae1: Level1AE,
    ae2: Level2AE,
    window_len: int,
    conditions: Optional[Sequence[ConditioningSignal]] = None,
    cache_dir: Optional[Union[str, Path]] = None,
    source_names: Optional[Sequence[str]] = None,
    workers: int = 1,
) -> WindowCorpus:
    """
    Cut every encoded source into floor(T2 / window_len) contiguous windows.

    Args:
        conditions: one signal per source, aligned to its level-2 timesteps.
        source_names: cache keys; defaults to the source index.
    """
    ae1.eval()
    ae2.eval()
    enc_hash = encoder_hash(ae1, ae2)
    names = list(source_names) if source_names is not None else list(range(len(dataset)))
    cache = Path(cache_dir) if cache_dir is not None else None

    def encode_one(i: int) -> np.ndarray:
        path = _cache_path(cache, names[i]) if cache is not None else None
        latents = _read_cache(path, enc_hash) if path is not None else None
        if latents is None:
            latents = encode_latents(ae1, ae2, dataset[i])
            if path is not None:
                _write_cache(path, latents, enc_hash, ae2, names[i])
        return latents

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        encoded: List[np.ndarray] = list(pool.map(encode_one, range(len(dataset))))

    windows, conds, sources = [], [], []
    for i, latents in enumerate(encoded):
        n = latents.shape[1] // window_len
        if n == 0:
            logger.warning(f"Source {names[i]} yields no full window of {window_len} latents, skipped")
            continue
        cut = latents[:, :n * window_len].reshape(latents.shape[0], n, window_len).transpose(1, 0, 2)
        windows.append(cut)
        sources.append(np.full(n, i))
        if conditions is not None:
            values = conditions[i].aligned(n * window_len)
            conds.append(values.reshape(n, window_len))
    if not windows:
        raise ShapeError(f"No source is long enough for a window of {window_len} latents")

    corpus = WindowCorpus(
        np.ascontiguousarray(np.concatenate(windows), dtype=np.float32),
        np.concatenate(conds).astype(np.float32) if conditions is not None else None,
        np.concatenate(sources),
        enc_hash,
    )
    logger.info(f"Prepared {len(corpus)} real windows of {window_len} latents from {len(dataset)} sources")
    return corpus


def frames_per_source(dataset: Sequence[Waveform], ae1: Level1AE, ae2: Level2AE) -> List[int]:
    """Level-2 timesteps each source encodes to, without running the networks."""
    cfg = ae1.cfg
    out = []
    for w in dataset:
        frames = dsp.num_frames(w.num_samples, cfg.fft_size, cfg.hop_size)
        out.append(max(0, frames - 2 * ae1.margin) // ae2.ratio)
    return out


def save_corpus(path: Union[str, Path], corpus: WindowCorpus, header: dict) -> str:
    tensors = {"windows": corpus.windows, "sources": corpus.sources.astype(np.float32)}
    if corpus.cond is not None:
        tensors["cond"] = corpus.cond
    header = dict(header, kind="window_corpus", encoder_hash=corpus.encoder_hash)
    return checkpoint.save(path, checkpoint.Checkpoint(header, tensors))


def load_corpus(path: Union[str, Path]) -> WindowCorpus:
    ckpt = checkpoint.load(path, stage="encode-corpus")
    if ckpt.config.get("kind") != "window_corpus":
        raise CheckpointError(f"{path} is not an encoded window corpus")
    return WindowCorpus(
        ckpt.tensors["windows"],
        ckpt.tensors.get("cond"),
        ckpt.tensors["sources"].astype(np.int64),
        ckpt.config["encoder_hash"],
        ckpt.config,
    )
