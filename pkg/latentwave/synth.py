"""
Synthetic toy corpus: chord progressions of band-limited saw and sine tones
with a note density that drifts over each song. Lets the whole pipeline run
without external data.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
import yaml

from latentwave import settings
from latentwave.audio_io import Waveform, save_audio

logger = logging.getLogger("latentwave.synth")

# Semitone offsets of the triads used by the progressions.
TRIADS = {
    "major": (0, 4, 7),
    "minor": (0, 3, 7),
}
# Scale degrees (semitones above the key) of I-vi-IV-V style progressions.
PROGRESSION_ROOTS = (0, 9, 5, 7, 2, 4)


@dataclass
class SongSpec:
    key_hz: float
    bpm: float
    duration_s: float
    timbre: str  # "saw" or "sine"
    seed: int


def midi_to_hz(note: float) -> float:
    return 440.0 * 2.0 ** ((note - 69) / 12)


def tone(freq: float, n: int, sr: int, timbre: str) -> np.ndarray:
    """Additive tone with partials below Nyquist only."""
    t = np.arange(n) / sr
    if timbre == "sine":
        return np.sin(2 * np.pi * freq * t)
    out = np.zeros(n)
    k = 1
    while k * freq < sr / 2 and k <= 40:
        out += np.sin(2 * np.pi * k * freq * t) / k
        k += 1
    return out * (2 / np.pi)


def envelope(n: int, sr: int, attack: float = 0.005, release: float = 0.25) -> np.ndarray:
    a = max(1, int(attack * sr))
    env = np.exp(-np.arange(n) / (release * sr))
    env[:a] *= np.linspace(0.0, 1.0, a)
    return env


def render_song(spec: SongSpec, sr: int = settings.SAMPLE_RATE, stereo: bool = False) -> Waveform:
    """
    One chord per bar; within a bar, notes of the chord are struck at a
    subdivision that follows a slow random walk, so note density varies.
    """
    rng = np.random.default_rng(spec.seed)
    total = int(spec.duration_s * sr)
    out = np.zeros((2 if stereo else 1, total))
    beat = 60.0 / spec.bpm
    bar = 4 * beat
    density = rng.uniform(0.2, 0.8)
    n_bars = int(np.ceil(spec.duration_s / bar))
    key = 12 * np.log2(spec.key_hz / 440.0) + 69
    for b in range(n_bars):
        root = key + PROGRESSION_ROOTS[b % len(PROGRESSION_ROOTS)]
        quality = "minor" if PROGRESSION_ROOTS[b % len(PROGRESSION_ROOTS)] in (9, 2, 4) else "major"
        chord = [root + s for s in TRIADS[quality]]
        density = float(np.clip(density + rng.normal(0, 0.15), 0.05, 1.0))
        strikes = max(1, int(round(density * 8)))
        for s in range(strikes):
            start = int((b * bar + s * bar / strikes) * sr)
            if start >= total:
                break
            n = min(total - start, int(bar / strikes * sr * 1.5))
            note = chord[rng.integers(0, len(chord))] + 12 * rng.integers(-1, 2)
            x = 0.25 * tone(midi_to_hz(note), n, sr, spec.timbre) * envelope(n, sr)
            if stereo:
                pan = rng.uniform(0.2, 0.8)
                out[0, start:start + n] += np.sqrt(1 - pan) * x
                out[1, start:start + n] += np.sqrt(pan) * x
            else:
                out[0, start:start + n] += x
    peak = np.abs(out).max()
    if peak > 0.99:
        out *= 0.99 / peak
    return Waveform(out.astype(np.float32), sr)


def synthesize_corpus(
    out_dir: Union[str, Path],
    n_songs: int = 10,
    duration_s: float = 60.0,
    seed: int = 0,
    sr: int = settings.SAMPLE_RATE,
    stereo: bool = False,
) -> List[Path]:
    """Write `n_songs` WAV files plus a `bpm.yaml` sidecar mapping file name to tempo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths, tempos = [], {}
    for i in range(n_songs):
        spec = SongSpec(
            key_hz=midi_to_hz(rng.integers(48, 60)),
            bpm=float(rng.integers(80, 160)),
            duration_s=duration_s,
            timbre="saw" if i % 2 == 0 else "sine",
            seed=int(rng.integers(0, 2**31)),
        )
        path = out_dir / f"song_{i:03d}.wav"
        save_audio(render_song(spec, sr, stereo), path)
        paths.append(path)
        tempos[path.name] = spec.bpm
    with open(out_dir / "bpm.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(tempos, f, sort_keys=True)
    logger.info(f"Synthesized {n_songs} songs ({n_songs * duration_s / 60:.1f} min) in {out_dir}")
    return paths
