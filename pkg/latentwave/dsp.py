"""
Time-frequency transforms, spectral losses and conditioning signals.

Spectrogram tensors follow the torch convention (..., bins, frames). Every
transform is padding-free: frame t covers samples [t * hop, t * hop + fft).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchaudio
from scipy.ndimage import median_filter
from scipy.signal import find_peaks
from scipy.stats import norm

from latentwave import settings
from latentwave.errors import ShapeError

logger = logging.getLogger("latentwave.dsp")

# iSTFT divides by the overlapped squared-window envelope; below this floor
# (only the first and last fft - hop samples) the envelope is clamped.
ISTFT_ENVELOPE_FLOOR = 1e-2


def num_frames(num_samples: int, fft_size: int, hop_size: int) -> int:
    if num_samples < fft_size:
        return 0
    return (num_samples - fft_size) // hop_size + 1


def num_samples_for(frames: int, fft_size: int, hop_size: int) -> int:
    return (frames - 1) * hop_size + fft_size


def _window(size: int, like: torch.Tensor) -> torch.Tensor:
    dtype = like.dtype if like.is_floating_point() else torch.float32
    return torch.hann_window(size, periodic=True, dtype=dtype, device=like.device)


def _check_geometry(fft_size: int, hop_size: int):
    if hop_size <= 0 or fft_size % hop_size != 0:
        raise ShapeError(f"hop_size {hop_size} must divide fft_size {fft_size}")


def stft(x: torch.Tensor, fft_size: int = settings.FFT_SIZE, hop_size: int = settings.HOP_SIZE) -> torch.Tensor:
    """
    Hann-windowed STFT without implicit padding.

    Args:
        x: waveform tensor (..., samples).

    Returns:
        Complex tensor (..., fft_size // 2 + 1, frames).
    """
    _check_geometry(fft_size, hop_size)
    if x.shape[-1] < fft_size:
        raise ShapeError(f"Waveform of {x.shape[-1]} samples is shorter than one frame ({fft_size})")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=fft_size,
        hop_length=hop_size,
        win_length=fft_size,
        window=_window(fft_size, x),
        center=False,
        return_complex=True,
    )
    return spec.reshape(*lead, spec.shape[-2], spec.shape[-1])


def istft(
    magnitude: torch.Tensor,
    phase: torch.Tensor,
    fft_size: int = settings.FFT_SIZE,
    hop_size: int = settings.HOP_SIZE,
) -> torch.Tensor:
    """
    Weighted overlap-add inverse of `stft` from magnitude and phase.

    Args:
        magnitude: (..., bins, frames), non-negative.
        phase: (..., bins, frames), radians.

    Returns:
        Waveform (..., (frames - 1) * hop_size + fft_size).
    """
    _check_geometry(fft_size, hop_size)
    if fft_size // hop_size < 2:
        raise ShapeError(f"fft_size {fft_size} / hop_size {hop_size} violates overlap-add")
    if magnitude.shape != phase.shape:
        raise ShapeError(f"Magnitude {tuple(magnitude.shape)} and phase {tuple(phase.shape)} differ")
    bins, frames = magnitude.shape[-2:]
    if bins != fft_size // 2 + 1:
        raise ShapeError(f"Expected {fft_size // 2 + 1} bins, got {bins}")

    lead = magnitude.shape[:-2]
    spec = torch.complex(magnitude * torch.cos(phase), magnitude * torch.sin(phase))
    spec = spec.reshape(-1, bins, frames)
    window = _window(fft_size, magnitude)

    frames_td = torch.fft.irfft(spec, n=fft_size, dim=-2) * window[None, :, None]
    length = num_samples_for(frames, fft_size, hop_size)
    y = F.fold(frames_td, output_size=(1, length), kernel_size=(1, fft_size), stride=(1, hop_size))
    y = y.reshape(-1, length)

    window_sq = window.square()[None, :, None].expand(1, fft_size, frames)
    envelope = F.fold(window_sq, output_size=(1, length), kernel_size=(1, fft_size), stride=(1, hop_size))
    envelope = envelope.reshape(length).clamp(min=ISTFT_ENVELOPE_FLOOR)
    return (y / envelope).reshape(*lead, length)


def power(spec: torch.Tensor) -> torch.Tensor:
    return spec.real.square() + spec.imag.square()


def log_mag(spec: torch.Tensor, eps: float = settings.LOG_EPS) -> torch.Tensor:
    """log(|c|^2 + eps), elementwise."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return torch.log(power(spec) + eps)


def log_mag_spectrogram(
    x: torch.Tensor,
    fft_size: int = settings.FFT_SIZE,
    hop_size: int = settings.HOP_SIZE,
    eps: float = settings.LOG_EPS,
) -> torch.Tensor:
    return log_mag(stft(x, fft_size, hop_size), eps)


def multiscale_spectral_distance(
    w: torch.Tensor,
    w_hat: torch.Tensor,
    hops: Sequence[int] = settings.MS_HOPS,
    eps: float = settings.MS_EPS,
) -> torch.Tensor:
    """
    Sum over scales of log(|| |STFT_hop(w)| - |STFT_hop(w_hat)| ||_1 + eps),
    fft = 4 * hop, averaged over any leading batch dimensions.
    """
    if w.shape != w_hat.shape:
        raise ShapeError(f"Length mismatch: {tuple(w.shape)} vs {tuple(w_hat.shape)}")
    if w.shape[-1] == 0:
        raise ShapeError("Empty waveform")
    total = 0.0
    for hop in hops:
        fft_size = 4 * hop
        diff = stft(w, fft_size, hop).abs() - stft(w_hat, fft_size, hop).abs()
        l1 = diff.abs().sum(dim=(-2, -1))
        total = total + torch.log(l1 + eps)
    return total.mean()


def mel_filterbank(
    sample_rate: int = settings.SAMPLE_RATE,
    fft_size: int = settings.FFT_SIZE,
    n_mels: int = settings.N_MELS,
) -> torch.Tensor:
    """Triangular HTK mel filters, shape (bins, n_mels), unnormalized."""
    if n_mels < 8:
        raise ValueError(f"n_mels must be >= 8, got {n_mels}")
    return torchaudio.functional.melscale_fbanks(
        n_freqs=fft_size // 2 + 1,
        f_min=0.0,
        f_max=sample_rate / 2,
        n_mels=n_mels,
        sample_rate=sample_rate,
        norm=None,
        mel_scale="htk",
    )


def mel_band_centers(sample_rate: int = settings.SAMPLE_RATE, n_mels: int = settings.N_MELS) -> np.ndarray:
    """Center frequencies (Hz) of the filters returned by `mel_filterbank`."""
    top = 2595.0 * np.log10(1.0 + (sample_rate / 2) / 700.0)
    mels = np.linspace(0.0, top, n_mels + 2)[1:-1]
    return 700.0 * (10.0 ** (mels / 2595.0) - 1.0)


def log_mel(
    x: torch.Tensor,
    sample_rate: int = settings.SAMPLE_RATE,
    n_mels: int = settings.N_MELS,
    fft_size: int = settings.FFT_SIZE,
    hop_size: int = settings.HOP_SIZE,
    eps: float = settings.LOG_EPS,
) -> torch.Tensor:
    """Log-mel features shaped (..., frames, n_mels)."""
    spec = power(stft(x, fft_size, hop_size)).transpose(-1, -2)
    fb = mel_filterbank(sample_rate, fft_size, n_mels).to(spec.dtype)
    return torch.log(spec @ fb + eps)


def spectral_flux(
    x: np.ndarray,
    fft_size: int = settings.ONSET_FFT_SIZE,
    hop_size: int = settings.ONSET_HOP_SIZE,
) -> np.ndarray:
    """Half-wave rectified flux of log(1 + gain * |X|); flux[0] is 0."""
    spec = stft(torch.as_tensor(np.asarray(x, dtype=np.float64)), fft_size, hop_size).abs().numpy()
    compressed = np.log1p(settings.ONSET_LOG_GAIN * spec)
    flux = np.zeros(spec.shape[-1])
    flux[1:] = np.maximum(np.diff(compressed, axis=-1), 0.0).sum(axis=0)
    return flux


def spectral_flux_onsets(
    x: np.ndarray,
    sample_rate: int = settings.SAMPLE_RATE,
    fft_size: int = settings.ONSET_FFT_SIZE,
    hop_size: int = settings.ONSET_HOP_SIZE,
) -> np.ndarray:
    """
    Onset times in seconds: local maxima of spectral flux above a moving
    median threshold, at least ONSET_MIN_GAP_S apart.

    Args:
        x: mono waveform samples.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if num_frames(x.shape[0], fft_size, hop_size) < 2:
        return np.zeros(0)
    flux = spectral_flux(x, fft_size, hop_size)
    peak = flux.max()
    if peak <= 0.0:
        return np.zeros(0)

    threshold = median_filter(flux, size=2 * settings.ONSET_MEDIAN_FRAMES + 1, mode="nearest")
    threshold = threshold + settings.ONSET_DELTA * peak
    distance = max(1, int(round(settings.ONSET_MIN_GAP_S * sample_rate / hop_size)))
    peaks, _ = find_peaks(flux, height=threshold, distance=distance)
    peaks = peaks[flux[peaks] > threshold[peaks]]
    # at the flux peak the attack has just entered the trailing half of the window
    return (peaks * hop_size + 0.75 * fft_size) / sample_rate


@dataclass
class DensitySignal:
    values: np.ndarray
    rate: float
    kind: str = "note_density"
    raw: Optional[np.ndarray] = field(default=None, repr=False)
    d_ref: Optional[float] = None

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) / self.rate

    @property
    def duration(self) -> float:
        return self.values.shape[0] / self.rate


def raw_kde_density(
    onsets: np.ndarray,
    duration: float,
    bandwidth: float = settings.KDE_BANDWIDTH,
    out_rate: float = settings.SAMPLE_RATE / settings.HOP_SIZE,
) -> np.ndarray:
    """Gaussian KDE of onsets on normalized song position, sampled at `out_rate` Hz."""
    if duration <= 0:
        raise ShapeError("Zero duration")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    n = max(1, int(round(duration * out_rate)))
    t = np.arange(n) / out_rate / duration
    onsets = np.asarray(onsets, dtype=np.float64).reshape(-1) / duration
    if onsets.size == 0:
        return np.zeros(n)
    return norm.pdf(t[:, None], loc=onsets[None, :], scale=bandwidth).sum(axis=1)


def scale_density(raw: np.ndarray, d_ref: float) -> np.ndarray:
    """clip(log(1 + d) / log(1 + d_ref), 0, 1)."""
    if d_ref <= 0:
        return np.zeros_like(raw)
    return np.clip(np.log1p(raw) / np.log1p(d_ref), 0.0, 1.0)


def reference_density(raw_signals: Sequence[np.ndarray], percentile: float = settings.KDE_REF_PERCENTILE) -> float:
    values = np.concatenate([np.asarray(r).reshape(-1) for r in raw_signals]) if raw_signals else np.zeros(1)
    return float(np.percentile(values, percentile))


def kde_density(
    onsets: np.ndarray,
    duration: float,
    bandwidth: float = settings.KDE_BANDWIDTH,
    out_rate: float = settings.SAMPLE_RATE / settings.HOP_SIZE,
    d_ref: Optional[float] = None,
) -> DensitySignal:
    """
    Note-density conditioning signal. `d_ref` is normally the corpus-level
    reference; without it the signal's own percentile is used.
    """
    raw = raw_kde_density(onsets, duration, bandwidth, out_rate)
    if d_ref is None:
        d_ref = reference_density([raw])
    return DensitySignal(scale_density(raw, d_ref), out_rate, "note_density", raw, float(d_ref))


def resample_signal(values: np.ndarray, src_rate: float, dst_rate: float, n_out: int) -> np.ndarray:
    """Nearest-neighbour resampling; positions past the end hold the last value."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        return np.zeros(n_out)
    idx = np.floor(np.arange(n_out) * src_rate / dst_rate + 1e-9).astype(np.int64)
    return values[np.clip(idx, 0, values.size - 1)]


def write_density_csv(path: Union[str, Path], signal: DensitySignal):
    data = np.stack([signal.times, signal.values], axis=1)
    np.savetxt(path, data, delimiter=",", header="time_s,value", comments="", fmt="%.6f")


def read_density_csv(path: Union[str, Path], kind: str = "note_density") -> DensitySignal:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] == 0:
        raise ShapeError(f"Empty conditioning file {path}")
    times, values = data[:, 0], np.clip(data[:, 1], 0.0, 1.0)
    if np.any(np.diff(times) <= 0):
        raise ShapeError(f"Times in {path} must be strictly increasing")
    rate = 1.0 / float(np.median(np.diff(times))) if times.size > 1 else 1.0
    return DensitySignal(values, rate, kind)
