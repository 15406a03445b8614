"""
Numeric defaults for the latentwave pipeline.

This file centralizes the constants that fix the signal geometry, the loss
weights and the optimizer setup. Run configs (see `latentwave.config`) start
from these values; changing them here changes every preset.
"""
import os

from dotenv import load_dotenv

load_dotenv()


# Audio
# -----
# All training and generation happens at a single sample rate. Input files
# at other rates are resampled on load.
SAMPLE_RATE = 22050

# Length of one training excerpt in seconds. Both autoencoders are trained on
# log-magnitude spectrograms of excerpts of this duration.
EXCERPT_S = 0.76


# Autoencoder spectrogram geometry
# --------------------------------
# The level-1 encoder is stride-1 over frames, so the hop size is the whole
# level-1 time compression ratio (r_time^1).
FFT_SIZE = 1024
HOP_SIZE = 256

# Floor added to the power spectrum before the log.
LOG_EPS = 1e-7


# Discriminator spectrogram geometry
# ----------------------------------
# Reconstructed waveforms are re-analysed with a longer window than the one
# fed to the autoencoder (fft = 6 * hop).
DISC_HOP_SIZE = 256
DISC_FFT_SIZE = 6 * DISC_HOP_SIZE


# Multi-scale spectral distance
# -----------------------------
# Hop sizes of the scales; each scale uses fft = 4 * hop.
MS_HOPS = (64, 128, 256, 512)

# Added inside the log of every scale so that identical inputs give a finite
# minimum of len(MS_HOPS) * log(MS_EPS).
MS_EPS = 1e-7


# Loss weights
# ------------
LAMBDA_REC = 1.0
LAMBDA_MS = 4.0
# Weight of the discriminator's auxiliary reconstruction loss (L1).
LAMBDA_DISC_REC = 1.0


# Optimizer
# ---------
ADAM_LR = 1e-4
ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# R1 penalty coefficient, applied on every discriminator step.
R1_GAMMA = 10.0

# Slope of every leaky ReLU except the bottleneck and output heads.
LEAKY_SLOPE = 0.2

# Floor of the spectral-norm estimate.
SPECTRAL_NORM_EPS = 1e-12

# Max relative error accepted by `grad-check` (float64 central differences).
GRAD_CHECK_TOL = 1e-6


# Training watchdog
# -----------------
# Training aborts when |E D(real) - E D(fake)| stays above COLLAPSE_GAP for
# COLLAPSE_STEPS consecutive discriminator steps.
COLLAPSE_GAP = 50.0
COLLAPSE_STEPS = 1000


# Latent coordinate system
# ------------------------
# Dimension of anchor and style vectors.
COORD_DIM = 64


# Conditioning
# ------------
# KDE bandwidth on normalized song position in [0, 1].
KDE_BANDWIDTH = 0.004

# Percentile of raw corpus density used as the log-scaling reference d_ref.
KDE_REF_PERCENTILE = 99.0

# Spectral-flux onset detector geometry and peak picking.
ONSET_FFT_SIZE = 1024
ONSET_HOP_SIZE = 256
# Compression gain inside log(1 + gain * |X|).
ONSET_LOG_GAIN = 100.0
# Half-width of the moving median threshold, in frames.
ONSET_MEDIAN_FRAMES = 8
# Fraction of the flux maximum added on top of the median threshold.
ONSET_DELTA = 0.1
# Minimum spacing between two onsets in seconds.
ONSET_MIN_GAP_S = 0.05


# Evaluation
# ----------
N_MELS = 64
EMBED_WINDOW_S = 1.0
FRECHET_EPS = 1e-6
# Constant note-density levels of the quality sweep.
QUALITY_LEVELS = (0.15, 0.30, 0.45, 0.60, 0.75)
# Minimum seconds of generated audio per quality-report row.
QUALITY_MIN_SECONDS = 100.0


# Process-wide overrides
# ----------------------
LOG_LEVEL = os.environ.get("LATENTWAVE_LOG_LEVEL", "INFO").upper()
NUM_THREADS = int(os.environ.get("LATENTWAVE_NUM_THREADS", "0"))  # 0 = torch default
WORKDIR = os.environ.get("LATENTWAVE_WORKDIR", "runs")
