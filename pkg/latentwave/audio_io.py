"""
WAV ingest and egress, resampling, and training-excerpt sampling.

All waveforms are float32 arrays shaped (channels, samples), amplitude
normalized so that |sample| <= 1.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import soundfile
from scipy.signal import resample_poly

from latentwave import settings
from latentwave.errors import AudioFormatError, ShapeError

logger = logging.getLogger("latentwave.audio_io")

Pathlike = Union[str, Path]

SUBTYPES = {"PCM_16", "FLOAT"}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] not in (1, 2):
            raise ShapeError(f"Waveform must be (channels, samples) with 1 or 2 channels, got {samples.shape}")
        self.samples = samples

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def to_mono(self) -> "Waveform":
        if self.channels == 1:
            return self
        return Waveform(self.samples.mean(axis=0, keepdims=True), self.sample_rate)

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]


@dataclass
class ExcerptBatch:
    excerpts: np.ndarray  # (n, channels, excerpt_samples)
    sources: np.ndarray
    offsets: np.ndarray
    sample_rate: int

    @property
    def excerpt_samples(self) -> int:
        return self.excerpts.shape[-1]

    def __len__(self):
        return self.excerpts.shape[0]


def normalize(samples: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    return (samples / max(peak, 1.0)).astype(np.float32)


def resample(samples: np.ndarray, orig_sr: int, target_sr: int) -> np.ndarray:
    """Polyphase (band-limited) resampling along the last axis."""
    if orig_sr == target_sr:
        return samples
    ratio = Fraction(int(target_sr), int(orig_sr))
    out = resample_poly(samples, ratio.numerator, ratio.denominator, axis=-1)
    return out.astype(np.float32)


def load_audio(path: Pathlike, target_sr: int = settings.SAMPLE_RATE) -> Waveform:
    """
    Read a PCM16 or float32 WAV file, resample it and normalize its amplitude.

    Args:
        path: WAV file to open.
        target_sr: Sample rate of the returned waveform.

    Returns:
        Waveform: float32 samples shaped (channels, samples) at `target_sr`.

    Raises:
        AudioFormatError: unreadable file, non-WAV encoding, or zero-length audio.
    """
    path = Path(path)
    try:
        info = soundfile.info(str(path))
    except Exception as e:
        raise AudioFormatError(f"Cannot read audio file {path}: {e}") from e
    if info.format != "WAV" or info.subtype not in SUBTYPES:
        raise AudioFormatError(f"Unsupported encoding {info.format}/{info.subtype} in {path}")
    if info.channels not in (1, 2):
        raise AudioFormatError(f"Only mono or stereo audio is supported, {path} has {info.channels} channels")

    data, sr = soundfile.read(str(path), dtype="float32", always_2d=True)
    if data.shape[0] == 0:
        raise AudioFormatError(f"Zero-length audio in {path}")

    samples = data.T
    if sr != target_sr:
        logger.debug(f"Resampling {path.name} from {sr} Hz to {target_sr} Hz")
        samples = resample(samples, sr, target_sr)
    return Waveform(normalize(samples), int(target_sr))


def save_audio(w: Waveform, path: Pathlike, subtype: str = "PCM_16"):
    """
    Write a waveform as a little-endian WAV file.

    PCM16 output is quantized here (round(x * 32768), clipped to int16) so the
    round-trip error is bounded by 2**-15 per sample. FLOAT output is lossless.
    """
    if subtype not in SUBTYPES:
        raise AudioFormatError(f"Unsupported output subtype {subtype}")
    path = Path(path)
    data = np.asarray(w.samples, dtype=np.float32).T
    if subtype == "PCM_16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        soundfile.write(str(path), data, w.sample_rate, subtype=subtype, format="WAV", endian="LITTLE")
    except (OSError, RuntimeError, soundfile.SoundFileError) as e:
        raise AudioFormatError(f"Cannot write {path}: {e}") from e


def find_wav_files(root: Pathlike) -> List[Path]:
    """Recursively list `.wav` files under a dataset directory, sorted."""
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav")


def load_dataset(root: Pathlike, target_sr: int = settings.SAMPLE_RATE) -> List[Waveform]:
    files = find_wav_files(root)
    if not files:
        raise AudioFormatError(f"No .wav files found under {root}")
    logger.info(f"Loading {len(files)} files from {root}")
    return [load_audio(f, target_sr) for f in files]


def sample_excerpts(dataset: Sequence[Waveform], n: int, len_samples: int, seed: int) -> ExcerptBatch:
    """
    Draw `n` fully contained excerpts: a uniformly chosen source, then a
    uniformly chosen start offset. Each call owns its own generator, so
    concurrent callers never share RNG state.
    """
    if not dataset:
        raise ShapeError("Empty dataset")
    for i, w in enumerate(dataset):
        if w.num_samples < len_samples:
            raise ShapeError(f"Source {i} has {w.num_samples} samples, shorter than the excerpt ({len_samples})")
    channels = {w.channels for w in dataset}
    if len(channels) != 1:
        raise ShapeError("All dataset sources must have the same channel count")

    rng = np.random.default_rng(seed)
    sources = rng.integers(0, len(dataset), size=n)
    offsets = np.empty(n, dtype=np.int64)
    excerpts = np.empty((n, channels.pop(), len_samples), dtype=np.float32)
    for i, src in enumerate(sources):
        w = dataset[src]
        start = int(rng.integers(0, w.num_samples - len_samples + 1))
        offsets[i] = start
        excerpts[i] = w.samples[:, start:start + len_samples]
    return ExcerptBatch(excerpts, sources, offsets, dataset[0].sample_rate)
