import numpy as np
import pytest

from latentwave import settings
from latentwave.audio_io import Waveform
from latentwave.autoencoder import build_level1, build_level2
from latentwave.errors import ShapeError
from latentwave.evaluation import (
    EmbeddingStats,
    QualityRow,
    embed_corpus,
    embed_windows,
    format_quality_table,
    frechet_spectral_distance,
    latent_roundtrip,
    quality_csv,
    quality_labels,
    quality_report,
    reconstruction_distances,
    stats_from_features,
)
from latentwave.latent_gan import build_generator


def random_stats(dim=6, n=200, seed=0, shift=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    return stats_from_features(rng.standard_normal((n, dim)) * scale + shift)


class TestFrechet:
    def test_identical_is_zero(self):
        a = random_stats()
        assert frechet_spectral_distance(a, a) == pytest.approx(0.0, abs=1e-6)

    def test_symmetric_and_non_negative(self):
        a, b = random_stats(seed=1), random_stats(seed=2, shift=0.5, scale=2.0)
        ab, ba = frechet_spectral_distance(a, b), frechet_spectral_distance(b, a)
        assert ab > 0.0
        assert ab == pytest.approx(ba, rel=1e-6)

    def test_gaussians_with_diagonal_covariance(self):
        a = EmbeddingStats(np.zeros(3), np.eye(3), 10)
        b = EmbeddingStats(np.ones(3), 4.0 * np.eye(3), 10)
        # |mu|^2 = 3, trace term = 3 * (1 + 4 - 2 * 2)
        assert frechet_spectral_distance(a, b, eps=0.0) == pytest.approx(6.0, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            frechet_spectral_distance(random_stats(dim=4), random_stats(dim=5))


class TestEmbedding:
    def test_one_vector_per_window(self):
        samples = np.random.default_rng(0).standard_normal(int(2.5 * settings.SAMPLE_RATE)) * 0.1
        w = Waveform(samples, settings.SAMPLE_RATE)
        feats = embed_windows(w)
        assert feats.shape == (2, settings.N_MELS)
        assert np.all(np.isfinite(feats))

    def test_stereo_is_mixed_down(self):
        rng = np.random.default_rng(1)
        w = Waveform(rng.standard_normal((2, settings.SAMPLE_RATE)) * 0.1, settings.SAMPLE_RATE)
        assert embed_windows(w).shape == (1, settings.N_MELS)

    def test_too_short_corpus(self):
        with pytest.raises(ShapeError):
            embed_corpus([Waveform(np.zeros(100), settings.SAMPLE_RATE)])

    def test_corpus_stats(self):
        rng = np.random.default_rng(2)
        sr = settings.SAMPLE_RATE
        waves = [Waveform(rng.standard_normal(3 * sr) * 0.1, sr) for _ in range(2)]
        stats = embed_corpus(waves)
        assert stats.count == 6
        assert stats.dim == settings.N_MELS
        assert stats.cov.shape == (settings.N_MELS, settings.N_MELS)


class TestReconstruction:
    def test_distances_for_both_levels(self, tiny_cfg, sine_dataset):
        ae1, ae2 = build_level1(tiny_cfg.ae), build_level2(tiny_cfg.ae)
        out = reconstruction_distances(ae1, ae2, sine_dataset, n=2)
        assert set(out) == {"level1", "level2"}
        assert all(np.isfinite(v) for v in out.values())
        assert set(reconstruction_distances(ae1, None, sine_dataset, n=2)) == {"level1"}

    def test_latent_roundtrip_length(self, tiny_cfg, sine_dataset):
        ae1, ae2 = build_level1(tiny_cfg.ae).eval(), build_level2(tiny_cfg.ae).eval()
        w = latent_roundtrip(ae1, ae2, sine_dataset[0])
        assert w.channels == 1
        assert w.sample_rate == 8000
        assert 0 < w.num_samples <= sine_dataset[0].num_samples


class TestQualityReport:
    def test_labels_follow_the_conditioning(self, tiny_cfg, make_cfg):
        assert quality_labels(tiny_cfg) == ["unconditional"]
        density = quality_labels(make_cfg(conditioning="note_density"), levels=(0.15, 0.3))
        assert density == ["random walk", "const 0.15", "const 0.30"]
        assert quality_labels(make_cfg(conditioning="tempo"), levels=(0.5,)) == ["const 0.50"]

    def test_table_and_csv(self):
        rows = [QualityRow("random walk", 1.25, 100.0), QualityRow("const 0.15", 2.5, 101.5)]
        table = format_quality_table(rows).splitlines()
        assert table[0].split() == ["conditioning", "FSD", "seconds"]
        assert "random walk" in table[1]
        csv = quality_csv(rows).splitlines()
        assert csv == ["conditioning,fsd,seconds", "random walk,1.25,100.000", "const 0.15,2.5,101.500"]

    def test_report_rows_cover_the_requested_audio(self, make_cfg):
        cfg = make_cfg(conditioning="note_density")
        g = build_generator(cfg, 4).eval()
        ae2, ae1 = build_level2(cfg.ae, 2).eval(), build_level1(cfg.ae, 1).eval()
        reference = random_stats(dim=settings.N_MELS, n=50)
        rows = quality_report(g, ae2, ae1, cfg, reference, levels=(0.3,), seconds=2.0, pieces=2)
        assert [r.label for r in rows] == ["random walk", "const 0.30"]
        for row in rows:
            assert row.seconds == pytest.approx(2.0)
            assert np.isfinite(row.distance) and row.distance >= 0.0
