"""
Run configuration: pydantic models loaded from YAML, plus the named presets.

Environment overrides (log level, thread count, default workdir) live in
`latentwave.settings`; everything that shapes a model lives here.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, validator

from latentwave import settings
from latentwave.errors import ConfigError

logger = logging.getLogger("latentwave.config")


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class AEConfig(BaseModel):
    sample_rate: int = settings.SAMPLE_RATE
    fft_size: int = settings.FFT_SIZE
    hop_size: int = settings.HOP_SIZE
    excerpt_s: float = settings.EXCERPT_S
    latent1_dim: int = 128
    r_time2: int = 16
    latent2_dim: int = 32
    enc1_channels: List[int] = [256, 256, 256]
    dec1_channels: List[int] = [256, 256, 256]
    enc2_channels: List[int] = [128, 128]
    dec2_channels: List[int] = [128, 128]
    disc_channels: List[int] = [32, 64, 64, 128]
    lambda_rec: float = settings.LAMBDA_REC
    lambda_ms: float = settings.LAMBDA_MS

    @validator("fft_size", "hop_size", "r_time2")
    def power_of_two(cls, v, field):
        if not _is_power_of_two(v):
            raise ValueError(f"{field.name} must be a power of two, got {v}")
        return v

    @validator("hop_size")
    def hop_divides_fft(cls, v, values):
        if "fft_size" in values and values["fft_size"] != 4 * v:
            raise ValueError("fft_size must equal 4 * hop_size for overlap-add")
        return v

    @property
    def r_time1(self) -> int:
        return self.hop_size

    @property
    def r_time(self) -> int:
        return self.r_time1 * self.r_time2

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def latent1_rate(self) -> float:
        return self.sample_rate / self.r_time1

    @property
    def latent2_rate(self) -> float:
        return self.sample_rate / self.r_time

    @property
    def excerpt_samples(self) -> int:
        return int(self.excerpt_s * self.sample_rate)

    @property
    def enc2_strides(self) -> List[int]:
        strides, rest = [], self.r_time2
        while rest > 1:
            s = 4 if rest % 4 == 0 else 2
            strides.append(s)
            rest //= s
        return strides


class GANConfig(BaseModel):
    seq_len: int = 64
    coord_dim: int = settings.COORD_DIM
    style_dim: int = settings.COORD_DIM
    channels: int = 256
    n_blocks: int = 4
    kernel_size: int = 3
    norm_window: int = 5
    stereo: bool = False
    conditioning: str = "none"
    disc_channels: List[int] = [128, 256, 256]
    r1_gamma: float = settings.R1_GAMMA
    lambda_disc_rec: float = settings.LAMBDA_DISC_REC

    @validator("conditioning")
    def known_conditioning(cls, v):
        if v not in ("none", "note_density", "tempo"):
            raise ValueError(f"conditioning must be none, note_density or tempo, got {v}")
        return v

    @validator("kernel_size", "norm_window")
    def odd(cls, v, field):
        if v % 2 != 1:
            raise ValueError(f"{field.name} must be odd")
        return v

    @property
    def cond_channels(self) -> int:
        return 0 if self.conditioning == "none" else 1

    @property
    def audio_channels(self) -> int:
        return 2 if self.stereo else 1


class TrainConfig(BaseModel):
    batch_size: int = 32
    ae1_phase1_steps: int = 1_000_000
    ae1_phase2_steps: int = 1_000_000
    ae2_phase1_steps: int = 400_000
    ae2_phase2_steps: int = 400_000
    gan_steps: int = 1_500_000
    lr: float = settings.ADAM_LR
    log_every: int = 100
    checkpoint_every: int = 5000


class PathsConfig(BaseModel):
    dataset: str = "data"
    workdir: str = settings.WORKDIR


class SeedsConfig(BaseModel):
    train: int = 0
    generate: int = 0


class RunConfig(BaseModel):
    preset: str = "custom"
    ae: AEConfig = Field(default_factory=AEConfig)
    gan: GANConfig = Field(default_factory=GANConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seeds: SeedsConfig = Field(default_factory=SeedsConfig)

    def section_hash(self, *sections: str) -> str:
        payload = {s: getattr(self, s).dict() for s in sections}
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()

    @property
    def ae_hash(self) -> str:
        return self.section_hash("ae")

    @property
    def gan_hash(self) -> str:
        return self.section_hash("ae", "gan")

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def piano_preset() -> RunConfig:
    """Published piano setup: r_time 4096, 32-dim latents, seq_len 64, mono."""
    return RunConfig(
        preset="piano",
        ae=AEConfig(latent1_dim=128, r_time2=16, latent2_dim=32),
        gan=GANConfig(seq_len=64, stereo=False, conditioning="note_density"),
    )


def techno_preset() -> RunConfig:
    """Published techno setup: r_time 2048, 64-dim latents, seq_len 128, stereo."""
    return RunConfig(
        preset="techno",
        ae=AEConfig(latent1_dim=128, r_time2=8, latent2_dim=64),
        gan=GANConfig(seq_len=128, stereo=True, conditioning="tempo"),
    )


def toy_preset() -> RunConfig:
    """Desk-scale setup that trains on a CPU in minutes to hours."""
    return RunConfig(
        preset="toy",
        ae=AEConfig(
            latent1_dim=32,
            r_time2=16,
            latent2_dim=8,
            enc1_channels=[64, 64],
            dec1_channels=[64, 64],
            enc2_channels=[32, 32],
            dec2_channels=[32, 32],
            disc_channels=[8, 16, 16],
        ),
        gan=GANConfig(
            seq_len=16,
            channels=32,
            n_blocks=4,
            disc_channels=[32, 64],
            conditioning="none",
        ),
        train=TrainConfig(
            batch_size=8,
            ae1_phase1_steps=2000,
            ae1_phase2_steps=5000,
            ae2_phase1_steps=2000,
            ae2_phase2_steps=2000,
            gan_steps=20000,
            log_every=50,
            checkpoint_every=1000,
        ),
    )


PRESETS = {
    "piano": piano_preset,
    "techno": techno_preset,
    "toy": toy_preset,
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None) -> RunConfig:
    """
    Build a RunConfig from a preset, a YAML file, or both (the file overrides
    the preset). A `preset:` key inside the file selects the base preset.
    """
    data = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a mapping")
    preset = preset or data.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}, choose from {sorted(PRESETS)}")
    base = PRESETS[preset]().dict() if preset else RunConfig().dict()
    try:
        cfg = RunConfig(**_merge(base, data))
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {e}") from e
    logger.debug(f"Loaded config preset={cfg.preset} ae_hash={cfg.ae_hash[:12]}")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.dict(), sort_keys=True)


def config_from_text(text: str) -> RunConfig:
    """Inverse of `dump_config`; used when restoring a config embedded in a checkpoint."""
    try:
        return RunConfig(**yaml.safe_load(text))
    except (yaml.YAMLError, ValidationError, TypeError) as e:
        raise ConfigError(f"Invalid embedded config: {e}") from e
