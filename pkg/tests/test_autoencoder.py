import math

import numpy as np
import pytest
import torch

from latentwave import dsp, generation
from latentwave.audio_io import Waveform
from latentwave.autoencoder import (
    build_ae_discriminator,
    build_level1,
    build_level2,
    crop_frames,
    decode1,
    decode2,
    encode1,
    encode2,
    level1_pass,
    level2_excerpt_samples,
    level2_frames,
    pair_spectrogram,
    phase1_loss,
    train_level2,
    train_level2_phase1,
    train_phase1,
    train_phase2,
)
from latentwave.errors import ShapeError
from latentwave.utils import module_hash


def randn(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, dtype=dtype, generator=torch.Generator().manual_seed(seed))


class TestLevel1:
    @pytest.fixture
    def ae(self, tiny_cfg):
        return build_level1(tiny_cfg.ae, seed=0).double().eval()

    def test_shapes(self, ae, tiny_cfg):
        frames = 12
        x = randn(2, dsp.num_samples_for(frames, 16, 4))
        c = ae.encode_waveform(x)
        assert ae.margin == 2
        assert c.shape == (2, tiny_cfg.ae.latent1_dim, frames - 2 * ae.margin)
        log_power, phase = ae.decode(c)
        assert log_power.shape == (2, tiny_cfg.ae.bins, frames - 2 * ae.margin)
        w = ae.reconstruct_waveform(c)
        assert w.shape == (2, dsp.num_samples_for(frames - 2 * ae.margin, 16, 4))

    def test_latents_and_phase_are_bounded(self, ae):
        c = ae.encode_waveform(10 * randn(1, dsp.num_samples_for(12, 16, 4)))
        assert c.abs().max().item() <= 1.0
        _, phase = ae.decode(c)
        assert phase.abs().max().item() <= math.pi

    def test_magnitude_is_clamped(self, ae):
        mag = ae.magnitude(torch.full((1, 9, 2), 100.0, dtype=torch.float64))
        assert torch.allclose(mag, torch.full_like(mag, 16.0))

    def test_encode1_decode1(self, ae):
        c = encode1(ae, randn(1, 9, 12))
        assert c.shape == (1, 3, 12 - 2 * ae.margin)
        mag, phase = decode1(ae, c)
        assert mag.shape == phase.shape == (1, 9, c.shape[-1])
        assert mag.min().item() >= 0.0

    def test_too_short_for_the_encoder(self, ae):
        with pytest.raises(ShapeError):
            ae.encode(randn(1, 9, 4))

    def test_encoder_is_local(self, ae):
        """A latent frame only sees 2 * margin + 1 input frames."""
        s = randn(1, 9, 20)
        c = ae.encode(s)
        s2 = s.clone()
        s2[..., 15] += 5.0
        c2 = ae.encode(s2)
        changed = ((c - c2).abs().sum(dim=(0, 1)) > 0).nonzero().flatten().tolist()
        assert set(changed) <= set(range(15 - 2 * ae.margin, 15 + 1))

    def test_chunked_decoding_matches_whole(self, ae, mocker):
        mocker.patch.object(generation, "DECODE_CHUNK_FRAMES", 5)
        c = randn(1, 3, 23)
        mag, phase = generation._decode_level1_chunked(ae, c, workers=2)
        log_power, whole_phase = ae.decode(c)
        assert (mag - ae.magnitude(log_power)).abs().max().item() < 1e-10
        assert (phase - whole_phase).abs().max().item() < 1e-10

    def test_level1_pass_aligns_the_reference(self, ae):
        x = randn(3, dsp.num_samples_for(12, 16, 4))
        p = level1_pass(ae, x)
        assert p.reference.shape == p.waveform.shape
        torch.testing.assert_close(p.reference, x[..., ae.waveform_offset():ae.waveform_offset() + p.waveform.shape[-1]])
        assert p.target.shape == p.log_power.shape

    def test_crop_frames(self):
        x = torch.arange(10.0)[None]
        assert crop_frames(x, 0) is x
        assert crop_frames(x, 2).tolist() == [[2.0, 3.0, 4.0, 5.0, 6.0, 7.0]]


class TestLevel2:
    @pytest.fixture
    def ae2(self, tiny_cfg):
        return build_level2(tiny_cfg.ae, seed=1).double().eval()

    def test_shapes(self, ae2, tiny_cfg):
        c1 = randn(2, tiny_cfg.ae.latent1_dim, 12)
        c2 = encode2(ae2, c1)
        assert c2.shape == (2, tiny_cfg.ae.latent2_dim, 3)
        assert decode2(ae2, c2).shape == c1.shape

    def test_length_must_be_a_multiple(self, ae2, tiny_cfg):
        with pytest.raises(ShapeError):
            ae2.encode(randn(1, tiny_cfg.ae.latent1_dim, 10))

    def test_blocks_are_independent(self, ae2, tiny_cfg):
        c1 = randn(1, tiny_cfg.ae.latent1_dim, 16)
        whole = ae2.reconstruct(c1)
        parts = torch.cat([ae2.reconstruct(c1[..., :8]), ae2.reconstruct(c1[..., 8:])], dim=-1)
        assert (whole - parts).abs().max().item() < 1e-12

    @pytest.mark.parametrize("r_time2,strides", [(16, [4, 4]), (8, [4, 2]), (4, [4]), (2, [2])])
    def test_stride_plans(self, tiny_cfg, r_time2, strides):
        ae_cfg = tiny_cfg.ae.copy(update={"r_time2": r_time2})
        assert ae_cfg.enc2_strides == strides
        ae2 = build_level2(ae_cfg).double()
        c1 = randn(1, ae_cfg.latent1_dim, 2 * r_time2)
        assert ae2.encode(c1).shape[-1] == 2
        assert ae2.reconstruct(c1).shape == c1.shape

    def test_training_geometry(self, tiny_cfg):
        assert level2_frames(tiny_cfg.ae, patches=4) == 16
        samples = level2_excerpt_samples(tiny_cfg.ae, margin1=2)
        assert dsp.num_frames(samples, 16, 4) == 16 + 4


class TestDiscriminator:
    def test_one_score_per_example(self, tiny_cfg):
        d = build_ae_discriminator(tiny_cfg.ae).double()
        w = randn(3, 4000)
        spec = pair_spectrogram(w, w)
        assert spec.shape[-1] == 2 * dsp.num_frames(4000, 1536, 256)
        assert d(spec).shape == (3,)


class TestTraining:
    def test_phase1_loss_is_finite_and_differentiable(self, tiny_cfg):
        ae = build_level1(tiny_cfg.ae)
        loss = phase1_loss(ae, torch.randn(2, dsp.num_samples_for(12, 16, 4)))
        loss.backward()
        assert torch.isfinite(loss)
        assert all(p.grad is not None for p in ae.parameters())

    def test_phase1_runs_and_records_history(self, tiny_cfg, sine_dataset):
        ae = build_level1(tiny_cfg.ae)
        before = module_hash(ae)
        state = train_phase1(ae, sine_dataset, 3, tiny_cfg, seed=0)
        assert state.step == 3
        assert len(state.history.values("rec")) == 3
        assert module_hash(ae) != before

    def test_phase1_resumes_from_state(self, tiny_cfg, sine_dataset):
        ae = build_level1(tiny_cfg.ae)
        state = train_phase1(ae, sine_dataset, 2, tiny_cfg, seed=0)
        state = train_phase1(ae, sine_dataset, 2, tiny_cfg, seed=0, state=state)
        assert state.step == 4
        assert len(state.optimizers) == 1

    def test_level2_phase1_keeps_level1_frozen(self, tiny_cfg, sine_dataset):
        ae1 = build_level1(tiny_cfg.ae)
        ae2 = build_level2(tiny_cfg.ae)
        frozen = module_hash(ae1)
        state = train_level2_phase1(ae2, ae1, sine_dataset, 2, tiny_cfg, seed=0)
        assert state.step == 2
        assert module_hash(ae1) == frozen

    def test_train_level2_runs_both_phases(self, tiny_cfg, sine_dataset):
        cfg = tiny_cfg.copy(update={"train": tiny_cfg.train.copy(update={"ae2_phase1_steps": 2, "ae2_phase2_steps": 0})})
        ae1, ae2 = build_level1(cfg.ae), build_level2(cfg.ae)
        p1, p2 = train_level2(ae2, ae1, build_ae_discriminator(cfg.ae), sine_dataset, cfg, seed=0)
        assert (p1.step, p2.step) == (2, 0)
        assert not any(p.requires_grad for p in ae2.encoder.parameters())

    @pytest.mark.slow
    def test_phase2_keeps_the_encoder_frozen(self, tiny_cfg, sine_dataset):
        # phase 2 draws two adjacent excerpts per example
        dataset = [Waveform(np.tile(w.samples, 2), w.sample_rate) for w in sine_dataset]
        ae = build_level1(tiny_cfg.ae)
        d = build_ae_discriminator(tiny_cfg.ae)
        encoder = module_hash(ae.encoder)
        decoder = module_hash(ae.decoder)
        state = train_phase2(ae, d, dataset, 2, tiny_cfg, seed=0)
        assert state.step == 2
        assert module_hash(ae.encoder) == encoder
        assert module_hash(ae.decoder) != decoder
        assert set(state.optimizers) == {"dec", "disc"}
