import pytest

from latentwave.config import (
    PRESETS,
    AEConfig,
    GANConfig,
    config_from_text,
    dump_config,
    load_config,
)
from latentwave.errors import ConfigError


class TestPresets:
    def test_piano_matches_published_values(self):
        cfg = PRESETS["piano"]()
        assert cfg.ae.r_time == 4096
        assert cfg.ae.latent2_dim == 32
        assert cfg.gan.seq_len == 64
        assert not cfg.gan.stereo
        assert cfg.ae.enc2_strides == [4, 4]

    def test_techno_matches_published_values(self):
        cfg = PRESETS["techno"]()
        assert cfg.ae.r_time == 2048
        assert cfg.ae.latent2_dim == 64
        assert cfg.gan.seq_len == 128
        assert cfg.gan.stereo
        assert cfg.gan.audio_channels == 2
        assert cfg.ae.enc2_strides == [4, 2]

    def test_derived_geometry(self):
        ae = AEConfig()
        assert ae.bins == 513
        assert ae.r_time1 == 256
        assert ae.latent2_rate == pytest.approx(22050 / 4096)


class TestValidation:
    def test_fft_must_be_four_hops(self):
        with pytest.raises(ValueError):
            AEConfig(fft_size=1024, hop_size=512)

    def test_power_of_two(self):
        with pytest.raises(ValueError):
            AEConfig(r_time2=12)

    def test_unknown_conditioning(self):
        with pytest.raises(ValueError):
            GANConfig(conditioning="lyrics")

    def test_kernel_must_be_odd(self):
        with pytest.raises(ValueError):
            GANConfig(kernel_size=4)

    def test_conditioning_channels(self):
        assert GANConfig(conditioning="none").cond_channels == 0
        assert GANConfig(conditioning="tempo").cond_channels == 1


class TestLoadConfig:
    def test_file_overrides_preset(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("preset: toy\ngan:\n  seq_len: 8\ntrain:\n  batch_size: 3\n")
        cfg = load_config(path)
        assert cfg.preset == "toy"
        assert cfg.gan.seq_len == 8
        assert cfg.train.batch_size == 3
        assert cfg.ae.latent2_dim == PRESETS["toy"]().ae.latent2_dim

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            load_config(preset="jazz")

    def test_invalid_value_is_a_config_error(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("ae:\n  hop_size: 100\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_non_mapping(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_dump_roundtrip(self):
        cfg = PRESETS["techno"]()
        assert config_from_text(dump_config(cfg)) == cfg


class TestHashes:
    def test_ae_hash_ignores_gan_section(self):
        a = PRESETS["piano"]()
        b = a.copy(update={"gan": a.gan.copy(update={"seq_len": 32})})
        assert a.ae_hash == b.ae_hash
        assert a.gan_hash != b.gan_hash

    def test_ae_change_invalidates_both(self):
        a = PRESETS["piano"]()
        b = a.copy(update={"ae": a.ae.copy(update={"latent2_dim": 16})})
        assert a.ae_hash != b.ae_hash
        assert a.gan_hash != b.gan_hash

    def test_hash_is_stable(self):
        assert PRESETS["toy"]().gan_hash == PRESETS["toy"]().gan_hash
