import argparse

import numpy as np
import pytest
import yaml

from latentwave import checkpoint, dsp, settings
from latentwave.cli import Artifacts, build_parser, generation_condition, gradient_report, main, resolve_config
from latentwave.config import dump_config
from latentwave.errors import ConfigError


def condition_args(**kwargs):
    values = {"duration": 0.1, "cond_csv": None, "density": None, "bpm": None}
    values.update(kwargs)
    return argparse.Namespace(**values)


@pytest.fixture
def run_yaml(tmp_path, make_cfg):
    """Writes a tiny run config with a handful of training steps per stage."""

    def write(conditioning="none"):
        cfg = make_cfg(conditioning=conditioning)
        data = yaml.safe_load(dump_config(cfg))
        data["preset"] = "toy"
        data["paths"] = {"dataset": str(tmp_path / "data"), "workdir": str(tmp_path / "run")}
        data["train"].update(
            ae1_phase1_steps=2,
            ae1_phase2_steps=1,
            ae2_phase1_steps=2,
            ae2_phase2_steps=0,
            gan_steps=2,
        )
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(data))
        return path

    return write


class TestParser:
    def test_defaults_to_the_toy_preset(self, tmp_path):
        args = build_parser().parse_args(["-w", str(tmp_path), "grad-check"])
        cfg = resolve_config(args)
        assert cfg.preset == "toy"
        assert cfg.workdir == tmp_path

    def test_restart_flag_is_per_training_stage(self):
        args = build_parser().parse_args(["train-gan", "--restart"])
        assert args.restart
        with pytest.raises(SystemExit):
            build_parser().parse_args(["generate", "--restart"])

    def test_artifact_layout(self, tmp_path):
        paths = Artifacts(tmp_path)
        assert paths.manifest.name == "manifest.yaml"
        assert paths.gan == tmp_path / "gan.ckpt"
        assert paths.cache == tmp_path / "latent_cache"


class TestExitCodes:
    def test_unknown_preset(self, tmp_path):
        assert main(["--preset", "jazz", "-w", str(tmp_path), "grad-check"]) == 2

    def test_missing_manifest(self, tmp_path):
        assert main(["-w", str(tmp_path), "train-ae1"]) == 3

    def test_missing_level1_checkpoint(self, tmp_path):
        assert main(["-w", str(tmp_path), "train-ae2"]) == 3
        assert main(["-w", str(tmp_path), "generate", "-d", "1"]) == 3

    def test_unreadable_config(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("ae: [1, 2\n")
        assert main(["-c", str(path), "grad-check"]) == 2

    def test_grad_check_passes(self, tmp_path):
        assert main(["-w", str(tmp_path), "grad-check"]) == 0

    def test_grad_check_failure_is_numerical(self, tmp_path):
        assert main(["-w", str(tmp_path), "grad-check", "--tolerance", "-1"]) == 4


class TestGenerationCondition:
    ckpt = checkpoint.Checkpoint({"bpm_range": [100.0, 140.0]}, {})

    def test_unconditional(self, tiny_cfg):
        assert not generation_condition(condition_args(), tiny_cfg, self.ckpt, 0).active
        with pytest.raises(ConfigError):
            generation_condition(condition_args(density=0.5), tiny_cfg, self.ckpt, 0)

    def test_tempo(self, make_cfg):
        cfg = make_cfg(conditioning="tempo")
        signal = generation_condition(condition_args(bpm=130.0), cfg, self.ckpt, 0)
        assert signal.kind == "tempo"
        assert signal.values.shape == (52,)
        np.testing.assert_allclose(signal.values, 0.75)
        default = generation_condition(condition_args(), cfg, self.ckpt, 0)
        np.testing.assert_allclose(default.values, 0.5)
        with pytest.raises(ConfigError):
            generation_condition(condition_args(density=0.2), cfg, self.ckpt, 0)

    def test_note_density(self, make_cfg, tmp_path):
        cfg = make_cfg(conditioning="note_density")
        constant = generation_condition(condition_args(density=0.3), cfg, self.ckpt, 0)
        np.testing.assert_allclose(constant.values, 0.3, rtol=1e-6)

        walk = generation_condition(condition_args(), cfg, self.ckpt, 4)
        assert walk.values.shape == (52,)

        path = tmp_path / "curve.csv"
        dsp.write_density_csv(path, dsp.DensitySignal(np.array([0.1, 0.9]), rate=10.0))
        curve = generation_condition(condition_args(cond_csv=str(path)), cfg, self.ckpt, 0)
        # 500 positions per second: the first 0.1 s holds the first value
        np.testing.assert_allclose(curve.values[:50], 0.1, rtol=1e-6)
        np.testing.assert_allclose(curve.values[50:], 0.9, rtol=1e-6)

        with pytest.raises(ConfigError):
            generation_condition(condition_args(bpm=120.0), cfg, self.ckpt, 0)


class TestPreprocess:
    def test_synthetic_corpus_manifest(self, run_yaml, tmp_path):
        config = run_yaml(conditioning="tempo")
        code = main(["-c", str(config), "preprocess", "--synthesize", "--songs", "2", "--song-seconds", "3"])
        assert code == 0
        manifest = yaml.safe_load((tmp_path / "run" / "manifest.yaml").read_text())
        assert manifest["files"] == ["song_000.wav", "song_001.wav"]
        assert manifest["sample_rate"] == 8000
        assert manifest["durations_s"] == [3.0, 3.0]
        assert manifest["d_ref"] > 0.0
        lo, hi = manifest["bpm_range"]
        assert lo <= hi
        assert set(manifest["bpm"]) == set(manifest["files"])
        assert len(list((tmp_path / "run" / "density").glob("*.csv"))) == 2
        assert (tmp_path / "run" / "config.yaml").exists()

    def test_tempo_needs_bpm(self, run_yaml, tmp_path):
        config = run_yaml(conditioning="tempo")
        assert main(["-c", str(config), "preprocess", "--synthesize", "--songs", "1", "--song-seconds", "2"]) == 0
        (tmp_path / "data" / "bpm.yaml").unlink()
        assert main(["-c", str(config), "preprocess"]) == 2

    def test_empty_dataset(self, run_yaml, tmp_path):
        (tmp_path / "data").mkdir()
        assert main(["-c", str(run_yaml()), "preprocess"]) == 3


@pytest.mark.slow
class TestPipeline:
    def test_every_stage_in_order(self, run_yaml, tmp_path):
        config = str(run_yaml())
        run = tmp_path / "run"

        def stage(*argv):
            assert main(["-c", config, *argv]) == 0, argv

        stage("preprocess", "--synthesize", "--songs", "2", "--song-seconds", "3")
        stage("train-ae1")
        stage("train-ae2")
        stage("encode-corpus")
        stage("train-gan")
        stage("generate", "-d", "0.1", "-s", "3")
        stage("evaluate", "--excerpts", "2", "--seconds", "2", "--pieces", "2")
        stage("bench", "-d", "0.1", "-r", "2")

        header = checkpoint.load(run / "gan.ckpt").config
        assert header["complete"]
        assert header["step"] == 2
        assert (run / "out" / "seed3_0.1s.wav").exists()
        assert (run / "out" / "seed3_0.1s.json").exists()
        assert (run / "eval" / "reconstruction.yaml").exists()
        assert (run / "eval" / "quality.csv").exists()
        assert (run / "eval" / "bench.csv").exists()
        assert (run / "losses" / "gan.csv").exists()

        # a finished stage resumes to completion without training again
        digest = checkpoint.load(run / "ae1.ckpt").digest
        stage("train-ae1")
        assert checkpoint.load(run / "ae1.ckpt").digest == digest


class TestGradientReport:
    def test_every_chain_is_within_tolerance(self):
        report = gradient_report(seed=0)
        assert "decoder-STFT chain" in report
        for name, err in report.items():
            assert err <= settings.GRAD_CHECK_TOL, name

    def test_decoder_stft_chain_is_checked_for_other_seeds(self):
        assert gradient_report(seed=3)["decoder-STFT chain"] <= settings.GRAD_CHECK_TOL
