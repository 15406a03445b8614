import numpy as np
import pytest
import torch

from latentwave.audio_io import Waveform
from latentwave.config import AEConfig, GANConfig, RunConfig, TrainConfig


def tiny_run_config(conditioning: str = "none", stereo: bool = False) -> RunConfig:
    """Small geometry (fft 16, hop 4) that keeps every network tractable in tests."""
    return RunConfig(
        preset="test",
        ae=AEConfig(
            sample_rate=8000,
            fft_size=16,
            hop_size=4,
            excerpt_s=0.76,
            latent1_dim=3,
            r_time2=4,
            latent2_dim=2,
            enc1_channels=[4, 4],
            dec1_channels=[4, 4],
            enc2_channels=[3],
            dec2_channels=[3],
            disc_channels=[2, 2],
        ),
        gan=GANConfig(
            seq_len=4,
            coord_dim=2,
            style_dim=2,
            channels=3,
            n_blocks=4,
            norm_window=3,
            disc_channels=[3, 3],
            stereo=stereo,
            conditioning=conditioning,
        ),
        train=TrainConfig(batch_size=2, log_every=1, checkpoint_every=1),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture
def sine_dataset():
    """Two mono sources of 1 s at 8 kHz."""
    t = np.arange(8000) / 8000
    return [
        Waveform(0.5 * np.sin(2 * np.pi * 220 * t), 8000),
        Waveform(0.3 * np.sin(2 * np.pi * 330 * t) + 0.1 * np.sin(2 * np.pi * 990 * t), 8000),
    ]


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)
    yield


@pytest.fixture
def make_cfg():
    """Factory for tiny configs with conditioning or stereo switched on."""
    return tiny_run_config
