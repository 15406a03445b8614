"""
Command line surface.

Every stage reads its upstream artifacts from the run's workdir, checks that
they were produced under the same config, and writes its own artifact there:

    preprocess     -> manifest.yaml (+ density/*.csv)
    train-ae1      -> ae1.ckpt
    train-ae2      -> ae2.ckpt
    encode-corpus  -> windows.ckpt (+ latent_cache/)
    train-gan      -> gan.ckpt
    generate       -> out/*.wav + *.json
    evaluate       -> eval/
    bench          -> eval/bench.*

Training stages checkpoint every `train.checkpoint_every` steps and resume
from the last checkpoint unless `--restart` is given.
"""
import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from latentwave import checkpoint, dsp, settings
from latentwave.__version__ import __version__
from latentwave.audio_io import Waveform, find_wav_files, load_audio, save_audio
from latentwave.autoencoder import (
    Level1AE,
    Level2AE,
    TrainState,
    build_ae_discriminator,
    build_level1,
    build_level2,
    train_level2_phase1,
    train_level2_phase2,
    train_phase1,
    train_phase2,
)
from latentwave.config import AEConfig, GANConfig, RunConfig, dump_config, load_config
from latentwave.errors import ConfigError, LatentwaveError, MissingDependencyError, NumericalError
from latentwave.evaluation import (
    embed_corpus,
    format_quality_table,
    quality_csv,
    quality_report,
    reconstruction_distances,
)
from latentwave.generation import (
    benchmark_rtf,
    build_plan,
    constant_condition,
    generate,
    plan_positions,
    random_walk_density,
    write_sidecar,
)
from latentwave.latent_gan import (
    ConditioningSignal,
    GANState,
    Generator,
    build_generator,
    build_latent_discriminator,
    density_condition,
    tempo_condition,
    train_gan,
)
from latentwave.nn_core import grad_check, make_optimizer
from latentwave.synth import synthesize_corpus
from latentwave.utils import LossHistory, configure_torch, module_hash, setup_logging
from latentwave.windows import encoder_hash, frames_per_source, load_corpus, prepare_real_windows, save_corpus

logger = logging.getLogger("latentwave.cli")


@dataclass
class Artifacts:
    """File layout of one run directory."""

    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.yaml"

    @property
    def ae1(self) -> Path:
        return self.root / "ae1.ckpt"

    @property
    def ae2(self) -> Path:
        return self.root / "ae2.ckpt"

    @property
    def windows(self) -> Path:
        return self.root / "windows.ckpt"

    @property
    def gan(self) -> Path:
        return self.root / "gan.ckpt"

    @property
    def losses(self) -> Path:
        return self.root / "losses"

    @property
    def cache(self) -> Path:
        return self.root / "latent_cache"

    @property
    def density(self) -> Path:
        return self.root / "density"

    @property
    def out(self) -> Path:
        return self.root / "out"

    @property
    def eval(self) -> Path:
        return self.root / "eval"


# Corpus
# ------


def _read_manifest(paths: Artifacts) -> dict:
    if not paths.manifest.exists():
        raise MissingDependencyError(paths.manifest, "preprocess")
    with open(paths.manifest, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def _fit_channels(w: Waveform, stereo: bool) -> Waveform:
    if not stereo:
        return w.to_mono()
    if w.channels == 1:
        return Waveform(np.repeat(w.samples, 2, axis=0), w.sample_rate)
    return w


def _load_corpus_audio(cfg: RunConfig, manifest: dict) -> List[Waveform]:
    """Sources in manifest order, converted to the channel count of the model."""
    if manifest.get("sample_rate") != cfg.ae.sample_rate:
        raise ConfigError(
            f"Manifest was built at {manifest.get('sample_rate')} Hz, config expects {cfg.ae.sample_rate} Hz; "
            "rerun preprocess"
        )
    root = Path(manifest["dataset"])
    return [_fit_channels(load_audio(root / name, cfg.ae.sample_rate), cfg.gan.stereo) for name in manifest["files"]]


def _read_bpm(root: Path) -> Dict[str, float]:
    path = root / "bpm.yaml"
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must map file names to BPM")
    return {str(k): float(v) for k, v in data.items()}


def cmd_preprocess(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    dataset_dir = Path(cfg.paths.dataset)
    if args.synthesize:
        synthesize_corpus(
            dataset_dir,
            n_songs=args.songs,
            duration_s=args.song_seconds,
            seed=cfg.seeds.train,
            sr=cfg.ae.sample_rate,
            stereo=cfg.gan.stereo,
        )
    files = find_wav_files(dataset_dir)
    if not files:
        raise MissingDependencyError(dataset_dir, "preprocess --synthesize")
    names = [str(f.relative_to(dataset_dir)) if f != dataset_dir else f.name for f in files]
    root = dataset_dir if dataset_dir.is_dir() else dataset_dir.parent

    raw, onsets, durations = [], [], []
    for f in files:
        w = load_audio(f, cfg.ae.sample_rate).to_mono()
        o = dsp.spectral_flux_onsets(w.samples[0], w.sample_rate)
        raw.append(dsp.raw_kde_density(o, w.duration))
        onsets.append(o)
        durations.append(w.duration)
    d_ref = dsp.reference_density(raw)

    paths.density.mkdir(parents=True, exist_ok=True)
    for name, o, duration in zip(names, onsets, durations):
        signal = dsp.kde_density(o, duration, d_ref=d_ref)
        dsp.write_density_csv(paths.density / f"{Path(name).stem}.csv", signal)

    bpm = _read_bpm(root)
    if cfg.gan.conditioning == "tempo":
        missing = [n for n in names if n not in bpm]
        if missing:
            raise ConfigError(f"Tempo conditioning needs a BPM for every file; missing {missing[:3]} in bpm.yaml")
    tempos = [bpm[n] for n in names if n in bpm]
    manifest = {
        "dataset": str(root),
        "sample_rate": cfg.ae.sample_rate,
        "files": names,
        "durations_s": [round(d, 3) for d in durations],
        "d_ref": d_ref,
        "bpm": {n: bpm[n] for n in names if n in bpm},
        "bpm_range": [min(tempos), max(tempos)] if tempos else None,
    }
    paths.root.mkdir(parents=True, exist_ok=True)
    with open(paths.manifest, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    with open(paths.root / "config.yaml", "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
    logger.info(f"Manifest: {len(names)} files, {sum(durations) / 60:.1f} min, d_ref={d_ref:.3f}")


# Checkpoint helpers
# ------------------


def _optimizer_state(prefix: str, optimizers: Dict[str, torch.optim.Optimizer]) -> Dict[str, np.ndarray]:
    tensors = {}
    for name, opt in optimizers.items():
        if opt is None:
            continue
        tensors.update(checkpoint.optimizer_tensors(f"{prefix}{name}.", opt))
    return tensors


def _restore_optimizer(state: TrainState, ckpt: checkpoint.Checkpoint, prefix: str, name: str, params, lr: float):
    opt = make_optimizer(params, lr)
    checkpoint.load_optimizer(opt, ckpt, f"{prefix}{name}.")
    state.optimizers[name] = opt


def _history(paths: Artifacts, name: str, restart: bool) -> LossHistory:
    path = paths.losses / f"{name}.csv"
    if restart:
        path.unlink(missing_ok=True)
    return LossHistory(path)


def _run_chunked(total: int, state, every: int, run: Callable[[int], None], save: Callable[[], None]):
    """Advance `state.step` to `total` in runs of at most `every` steps, saving after each."""
    while state.step < total:
        run(min(every, total - state.step))
        save()


def _resume(path: Path, restart: bool, key: str, expected: str, what: str) -> Optional[checkpoint.Checkpoint]:
    if restart or not path.exists():
        return None
    ckpt = checkpoint.load(path)
    ckpt.require_hash(key, expected, what)
    logger.info(f"Resuming from {path}")
    return ckpt


def _require_complete(ckpt: checkpoint.Checkpoint, path: Path, stage: str):
    if not ckpt.config.get("complete"):
        raise MissingDependencyError(f"{path} (training incomplete)", stage)


def load_ae1(paths: Artifacts, cfg: RunConfig) -> Tuple[Level1AE, checkpoint.Checkpoint]:
    ckpt = checkpoint.load(paths.ae1, stage="train-ae1")
    ckpt.require_hash("ae_hash", cfg.ae_hash, "level-1 checkpoint")
    _require_complete(ckpt, paths.ae1, "train-ae1")
    ae1 = Level1AE(cfg.ae)
    checkpoint.load_module(ae1, ckpt, "ae.")
    return ae1.eval(), ckpt


def load_ae2(paths: Artifacts, cfg: RunConfig, ae1_ckpt: checkpoint.Checkpoint) -> Tuple[Level2AE, checkpoint.Checkpoint]:
    ckpt = checkpoint.load(paths.ae2, stage="train-ae2")
    ckpt.require_hash("ae_hash", cfg.ae_hash, "level-2 checkpoint")
    _require_complete(ckpt, paths.ae2, "train-ae2")
    if ckpt.config.get("ae1_digest") != ae1_ckpt.digest:
        raise ConfigError("Level-2 checkpoint was trained on a different level-1 checkpoint; rerun train-ae2")
    ae2 = Level2AE(cfg.ae)
    checkpoint.load_module(ae2, ckpt, "ae.")
    return ae2.eval(), ckpt


def load_gan(paths: Artifacts, cfg: RunConfig, enc_hash: str) -> Tuple[Generator, checkpoint.Checkpoint]:
    ckpt = checkpoint.load(paths.gan, stage="train-gan")
    ckpt.require_hash("gan_hash", cfg.gan_hash, "GAN checkpoint")
    ckpt.require_hash("encoder_hash", enc_hash, "GAN checkpoint encoders")
    _require_complete(ckpt, paths.gan, "train-gan")
    g = Generator(cfg.gan, cfg.ae.latent2_dim)
    checkpoint.load_module(g, ckpt, "g.")
    return g.eval(), ckpt


def load_models(paths: Artifacts, cfg: RunConfig):
    ae1, ae1_ckpt = load_ae1(paths, cfg)
    ae2, _ = load_ae2(paths, cfg, ae1_ckpt)
    g, gan_ckpt = load_gan(paths, cfg, encoder_hash(ae1, ae2))
    return ae1, ae2, g, gan_ckpt


# Training stages
# ---------------


def cmd_train_ae1(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    dataset = _load_corpus_audio(cfg, _read_manifest(paths))
    seed, t = cfg.seeds.train, cfg.train
    ae = build_level1(cfg.ae, seed)
    d = build_ae_discriminator(cfg.ae, seed + 1)
    p1 = TrainState(history=_history(paths, "ae1_phase1", args.restart))
    p2 = TrainState(history=_history(paths, "ae1_phase2", args.restart))

    ckpt = _resume(paths.ae1, args.restart, "ae_hash", cfg.ae_hash, "level-1 checkpoint")
    if ckpt is not None:
        checkpoint.load_module(ae, ckpt, "ae.")
        checkpoint.load_module(d, ckpt, "disc.")
        p1.step, p2.step = ckpt.config["phase1_step"], ckpt.config["phase2_step"]
        if p1.step < t.ae1_phase1_steps:
            _restore_optimizer(p1, ckpt, "opt1.", "ae", ae.parameters(), t.lr)
        else:
            _restore_optimizer(p2, ckpt, "opt2.", "dec", ae.decoder.parameters(), t.lr)
            _restore_optimizer(p2, ckpt, "opt2.", "disc", d.parameters(), t.lr)

    def save():
        tensors = {**checkpoint.module_tensors("ae.", ae), **checkpoint.module_tensors("disc.", d)}
        tensors.update(_optimizer_state("opt1.", p1.optimizers))
        tensors.update(_optimizer_state("opt2.", p2.optimizers))
        header = {
            "kind": "ae1",
            "ae_hash": cfg.ae_hash,
            "phase1_step": p1.step,
            "phase2_step": p2.step,
            "complete": p1.step >= t.ae1_phase1_steps and p2.step >= t.ae1_phase2_steps,
            "encoder_hash": module_hash(ae.encoder),
        }
        checkpoint.save(paths.ae1, checkpoint.Checkpoint(header, tensors))

    _run_chunked(
        t.ae1_phase1_steps, p1, t.checkpoint_every,
        lambda n: train_phase1(ae, dataset, n, cfg, seed, p1), save,
    )
    p1.optimizers.clear()
    _run_chunked(
        t.ae1_phase2_steps, p2, t.checkpoint_every,
        lambda n: train_phase2(ae, d, dataset, n, cfg, seed, p2), save,
    )
    save()


def cmd_train_ae2(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    ae1, ae1_ckpt = load_ae1(paths, cfg)
    dataset = _load_corpus_audio(cfg, _read_manifest(paths))
    seed, t = cfg.seeds.train, cfg.train
    ae2 = build_level2(cfg.ae, seed + 2)
    d = build_ae_discriminator(cfg.ae, seed + 3)
    q1 = TrainState(history=_history(paths, "ae2_phase1", args.restart))
    q2 = TrainState(history=_history(paths, "ae2_phase2", args.restart))

    ckpt = _resume(paths.ae2, args.restart, "ae_hash", cfg.ae_hash, "level-2 checkpoint")
    if ckpt is not None and ckpt.config.get("ae1_digest") != ae1_ckpt.digest:
        logger.warning("Level-2 checkpoint belongs to another level-1 checkpoint, starting over")
        ckpt = None
    if ckpt is not None:
        checkpoint.load_module(ae2, ckpt, "ae.")
        checkpoint.load_module(d, ckpt, "disc.")
        q1.step, q2.step = ckpt.config["phase1_step"], ckpt.config["phase2_step"]
        if q1.step < t.ae2_phase1_steps:
            _restore_optimizer(q1, ckpt, "opt1.", "ae", ae2.parameters(), t.lr)
        else:
            _restore_optimizer(q2, ckpt, "opt2.", "dec", ae2.decoder.parameters(), t.lr)
            _restore_optimizer(q2, ckpt, "opt2.", "disc", d.parameters(), t.lr)

    def save():
        tensors = {**checkpoint.module_tensors("ae.", ae2), **checkpoint.module_tensors("disc.", d)}
        tensors.update(_optimizer_state("opt1.", q1.optimizers))
        tensors.update(_optimizer_state("opt2.", q2.optimizers))
        header = {
            "kind": "ae2",
            "ae_hash": cfg.ae_hash,
            "ae1_digest": ae1_ckpt.digest,
            "phase1_step": q1.step,
            "phase2_step": q2.step,
            "complete": q1.step >= t.ae2_phase1_steps and q2.step >= t.ae2_phase2_steps,
        }
        checkpoint.save(paths.ae2, checkpoint.Checkpoint(header, tensors))

    _run_chunked(
        t.ae2_phase1_steps, q1, t.checkpoint_every,
        lambda n: train_level2_phase1(ae2, ae1, dataset, n, cfg, seed, q1), save,
    )
    q1.optimizers.clear()
    _run_chunked(
        t.ae2_phase2_steps, q2, t.checkpoint_every,
        lambda n: train_level2_phase2(ae2, ae1, d, dataset, n, cfg, seed, q2), save,
    )
    save()


def _conditions(
    cfg: RunConfig, manifest: dict, dataset: Sequence[Waveform], frames: Sequence[int]
) -> Optional[List[ConditioningSignal]]:
    kind = cfg.gan.conditioning
    if kind == "none":
        return None
    if kind == "tempo":
        if not manifest.get("bpm_range"):
            raise ConfigError("Tempo conditioning needs bpm.yaml next to the dataset; rerun preprocess")
        bpm_range = tuple(manifest["bpm_range"])
        return [tempo_condition(manifest["bpm"][name], bpm_range, n) for name, n in zip(manifest["files"], frames)]
    return [
        density_condition(w.to_mono().samples[0], w.sample_rate, max(1, n), cfg.ae.latent2_rate, manifest["d_ref"])
        for w, n in zip(dataset, frames)
    ]


def cmd_encode_corpus(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    ae1, ae1_ckpt = load_ae1(paths, cfg)
    ae2, _ = load_ae2(paths, cfg, ae1_ckpt)
    manifest = _read_manifest(paths)
    dataset = _load_corpus_audio(cfg, manifest)
    conditions = _conditions(cfg, manifest, dataset, frames_per_source(dataset, ae1, ae2))
    corpus = prepare_real_windows(
        dataset,
        ae1,
        ae2,
        2 * cfg.gan.seq_len,
        conditions,
        cache_dir=paths.cache,
        source_names=manifest["files"],
        workers=args.workers,
    )
    header = {
        "gan_hash": cfg.gan_hash,
        "d_ref": manifest["d_ref"],
        "bpm_range": manifest.get("bpm_range"),
        "conditioning": cfg.gan.conditioning,
    }
    save_corpus(paths.windows, corpus, header)


def cmd_train_gan(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    ae1, ae1_ckpt = load_ae1(paths, cfg)
    ae2, _ = load_ae2(paths, cfg, ae1_ckpt)
    enc_hash = encoder_hash(ae1, ae2)
    corpus = load_corpus(paths.windows)
    if corpus.header.get("gan_hash") != cfg.gan_hash:
        raise ConfigError("Window corpus was encoded under another config; rerun encode-corpus")
    if corpus.encoder_hash != enc_hash:
        raise ConfigError("Window corpus was encoded by other encoder weights; rerun encode-corpus")

    seed, t = cfg.seeds.train, cfg.train
    g = build_generator(cfg, seed + 4)
    d = build_latent_discriminator(cfg, seed + 5)
    state = GANState(history=_history(paths, "gan", args.restart))
    ckpt = _resume(paths.gan, args.restart, "gan_hash", cfg.gan_hash, "GAN checkpoint")
    if ckpt is not None:
        ckpt.require_hash("encoder_hash", enc_hash, "GAN checkpoint encoders")
        checkpoint.load_module(g, ckpt, "g.")
        checkpoint.load_module(d, ckpt, "disc.")
        state.step = ckpt.config["step"]
        state.opt_g = make_optimizer(g.parameters(), t.lr)
        state.opt_d = make_optimizer(d.parameters(), t.lr)
        checkpoint.load_optimizer(state.opt_g, ckpt, "opt.g.")
        checkpoint.load_optimizer(state.opt_d, ckpt, "opt.disc.")

    def save():
        tensors = {**checkpoint.module_tensors("g.", g), **checkpoint.module_tensors("disc.", d)}
        tensors.update(_optimizer_state("opt.", {"g": state.opt_g, "disc": state.opt_d}))
        header = {
            "kind": "gan",
            "gan_hash": cfg.gan_hash,
            "encoder_hash": enc_hash,
            "d_ref": corpus.header.get("d_ref"),
            "bpm_range": corpus.header.get("bpm_range"),
            "step": state.step,
            "complete": state.step >= t.gan_steps,
        }
        checkpoint.save(paths.gan, checkpoint.Checkpoint(header, tensors))

    _run_chunked(
        t.gan_steps, state, t.checkpoint_every,
        lambda n: train_gan(g, d, corpus.windows, n, cfg, corpus.cond, seed, state), save,
    )
    save()


# Inference stages
# ----------------


def _bpm_range(gan_ckpt: checkpoint.Checkpoint) -> Tuple[float, float]:
    value = gan_ckpt.config.get("bpm_range")
    return (float(value[0]), float(value[1])) if value else (120.0, 120.0)


def generation_condition(args, cfg: RunConfig, gan_ckpt: checkpoint.Checkpoint, seed: int) -> ConditioningSignal:
    """The conditioning curve for one `generate`/`bench` run, from flags or a default."""
    n = plan_positions(args.duration, cfg)
    kind = cfg.gan.conditioning
    given = [a for a in ("cond_csv", "density", "bpm") if getattr(args, a, None) is not None]
    if kind == "none":
        if given:
            raise ConfigError(f"Model is unconditional; --{given[0].replace('_', '-')} is not accepted")
        return ConditioningSignal()
    if kind == "tempo":
        if getattr(args, "cond_csv", None) is not None or getattr(args, "density", None) is not None:
            raise ConfigError("Tempo-conditioned model takes --bpm only")
        bpm_range = _bpm_range(gan_ckpt)
        bpm = args.bpm if getattr(args, "bpm", None) is not None else sum(bpm_range) / 2
        return tempo_condition(bpm, bpm_range, n)
    if getattr(args, "bpm", None) is not None:
        raise ConfigError("Note-density model does not take --bpm")
    if getattr(args, "cond_csv", None) is not None:
        signal = dsp.read_density_csv(args.cond_csv)
        return ConditioningSignal("note_density", dsp.resample_signal(signal.values, signal.rate, cfg.ae.latent2_rate, n))
    if getattr(args, "density", None) is not None:
        return constant_condition(args.density, n)
    return random_walk_density(n, seed)


def cmd_generate(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    ae1, ae2, g, gan_ckpt = load_models(paths, cfg)
    seed = args.seed if args.seed is not None else cfg.seeds.generate
    plan = build_plan(args.duration, seed, cfg, generation_condition(args, cfg, gan_ckpt, seed))
    w = generate(plan, g, ae2, ae1, args.workers)
    out = Path(args.out) if args.out else paths.out / f"seed{seed}_{args.duration:g}s.wav"
    save_audio(w, out)
    if not args.no_sidecar:
        write_sidecar(out.with_suffix(".json"), plan, gan_hash=cfg.gan_hash, gan_digest=gan_ckpt.digest)
    logger.info(f"Wrote {w.duration:.2f} s to {out}")


def cmd_evaluate(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    ae1, ae1_ckpt = load_ae1(paths, cfg)
    ae2, _ = load_ae2(paths, cfg, ae1_ckpt)
    dataset = _load_corpus_audio(cfg, _read_manifest(paths))
    paths.eval.mkdir(parents=True, exist_ok=True)

    rec = reconstruction_distances(ae1, ae2, dataset, n=args.excerpts, seed=cfg.seeds.generate)
    with open(paths.eval / "reconstruction.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(rec, f, sort_keys=True)
    print("\n".join(f"{k:<10}{v:>10.4f}" for k, v in rec.items()))

    if not paths.gan.exists():
        logger.info("No GAN checkpoint yet, skipping the quality report")
        return
    g, gan_ckpt = load_gan(paths, cfg, encoder_hash(ae1, ae2))
    reference = embed_corpus(dataset)
    rows = quality_report(
        g, ae2, ae1, cfg, reference,
        seconds=args.seconds,
        pieces=args.pieces,
        seed=cfg.seeds.generate,
        bpm_range=_bpm_range(gan_ckpt),
        workers=args.workers,
    )
    table = format_quality_table(rows)
    (paths.eval / "quality.txt").write_text(table + "\n", encoding="utf-8")
    (paths.eval / "quality.csv").write_text(quality_csv(rows), encoding="utf-8")
    print(table)


def cmd_bench(args, cfg: RunConfig):
    paths = Artifacts(cfg.workdir)
    ae1, ae2, g, gan_ckpt = load_models(paths, cfg)
    seed = cfg.seeds.generate
    plan = build_plan(args.duration, seed, cfg, generation_condition(args, cfg, gan_ckpt, seed))
    report = benchmark_rtf(plan, g, ae2, ae1, args.repetitions, args.workers)
    paths.eval.mkdir(parents=True, exist_ok=True)
    (paths.eval / "bench.txt").write_text(report.table() + "\n", encoding="utf-8")
    (paths.eval / "bench.csv").write_text(report.csv(), encoding="utf-8")
    print(report.table())


# Gradient check
# --------------


def tiny_configs() -> RunConfig:
    """Smallest geometry that still exercises every operator of both models."""
    return RunConfig(
        preset="grad-check",
        ae=AEConfig(
            sample_rate=8000,
            fft_size=16,
            hop_size=4,
            latent1_dim=3,
            r_time2=4,
            latent2_dim=2,
            enc1_channels=[4],
            dec1_channels=[4],
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
            conditioning="note_density",
        ),
    )


def gradient_report(seed: int = 0) -> Dict[str, float]:
    """Max relative autograd-vs-finite-difference error per model, in float64."""
    cfg = tiny_configs()
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        ae1 = build_level1(cfg.ae, seed).double()
        ae2 = build_level2(cfg.ae, seed).double()
        disc = build_ae_discriminator(cfg.ae, seed).double()
        g = build_generator(cfg, seed).double()
        d = build_latent_discriminator(cfg, seed).double()

    frames = 2 * ae1.margin + 4
    x = torch.randn(1, dsp.num_samples_for(frames, cfg.ae.fft_size, cfg.ae.hop_size), generator=gen, dtype=torch.float64)
    c1 = torch.randn(1, cfg.ae.latent1_dim, 2 * ae2.ratio, generator=gen, dtype=torch.float64)
    c_dec = torch.randn(1, cfg.ae.latent1_dim, 6, generator=gen, dtype=torch.float64)
    spec = torch.randn(1, 8, 8, generator=gen, dtype=torch.float64)
    width = cfg.gan.seq_len + 2 * g.margin
    coords = torch.randn(1, cfg.gan.coord_dim, width, generator=gen, dtype=torch.float64)
    style = torch.randn(1, cfg.gan.style_dim, generator=gen, dtype=torch.float64)
    cond = torch.rand(1, 1, width, generator=gen, dtype=torch.float64)
    latents = torch.randn(1, d.in_channels + 1, 2 * cfg.gan.seq_len, generator=gen, dtype=torch.float64)

    checks = {
        "level-1 autoencoder": lambda: grad_check(lambda s: ae1.reconstruct_waveform(ae1.encode_waveform(s)), [x], [ae1]),
        "decoder-STFT chain": lambda: grad_check(lambda c: ae1.spectrogram(ae1.reconstruct_waveform(c)), [c_dec], [ae1]),
        "level-2 autoencoder": lambda: grad_check(ae2.reconstruct, [c1], [ae2]),
        "spectrogram discriminator": lambda: grad_check(disc, [spec], [disc]),
        "generator": lambda: grad_check(lambda z, s: g(z, s, cond), [coords, style], [g]),
        "latent discriminator": lambda: grad_check(d.score, [latents], [d]),
    }
    return {name: check() for name, check in checks.items()}


def cmd_grad_check(args, cfg: RunConfig):
    report = gradient_report(cfg.seeds.train)
    worst = max(report.values())
    print("\n".join(f"{name:<28}{err:>12.3e}" for name, err in report.items()))
    if worst > args.tolerance:
        raise NumericalError(f"Gradient check failed: max relative error {worst:.3e} > {args.tolerance:.1e}")
    logger.info(f"Gradient check passed (max relative error {worst:.3e})")


# Entry point
# -----------


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train-ae1": cmd_train_ae1,
    "train-ae2": cmd_train_ae2,
    "encode-corpus": cmd_encode_corpus,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
}


def _add_condition_flags(p: argparse.ArgumentParser):
    p.add_argument("--duration", "-d", type=float, default=30.0, help="Seconds of audio to generate")
    p.add_argument("--cond-csv", type=str, default=None, help="Note-density curve as CSV time_s,value")
    p.add_argument("--density", type=float, default=None, help="Constant note density in [0, 1]")
    p.add_argument("--bpm", type=float, default=None, help="Tempo for tempo-conditioned models")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentwave", description="Hierarchical latent audio GAN pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", "-c", type=str, default=None, help="YAML run config")
    parser.add_argument("--preset", "-p", type=str, default=None, help="piano, techno or toy")
    parser.add_argument("--workdir", "-w", type=str, default=None, help="Overrides paths.workdir")
    parser.add_argument("--dataset", type=str, default=None, help="Overrides paths.dataset")
    parser.add_argument("--deterministic", action="store_true", help="Single thread, deterministic kernels")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    parser.add_argument("--workers", type=int, default=1, help="Worker threads for patch and chunk tasks")
    parser.add_argument("--log-level", type=str, default=settings.LOG_LEVEL, help="DEBUG, INFO, WARNING, ERROR")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="Index the dataset, compute d_ref, write the manifest")
    p.add_argument("--synthesize", action="store_true", help="Write a synthetic chord corpus first")
    p.add_argument("--songs", type=int, default=10, help="Synthetic songs")
    p.add_argument("--song-seconds", type=float, default=60.0, help="Length of each synthetic song")

    for name in ("train-ae1", "train-ae2", "train-gan"):
        p = sub.add_parser(name, help=f"Run {name.split('-', 1)[1]} training")
        p.add_argument("--restart", action="store_true", help="Ignore an existing checkpoint")

    sub.add_parser("encode-corpus", help="Encode the dataset into real latent windows")

    p = sub.add_parser("generate", help="Generate audio of arbitrary length")
    _add_condition_flags(p)
    p.add_argument("--seed", "-s", type=int, default=None, help="Overrides seeds.generate")
    p.add_argument("--out", "-o", type=str, default=None, help="Output WAV path")
    p.add_argument("--no-sidecar", action="store_true", help="Skip the JSON plan sidecar")

    p = sub.add_parser("evaluate", help="Reconstruction distances and quality report")
    p.add_argument("--excerpts", type=int, default=16, help="Excerpts for reconstruction distances")
    p.add_argument("--seconds", type=float, default=settings.QUALITY_MIN_SECONDS, help="Audio per quality row")
    p.add_argument("--pieces", type=int, default=4, help="Generations per quality row")

    p = sub.add_parser("bench", help="Real-time factor of generation and decoding")
    _add_condition_flags(p)
    p.add_argument("--repetitions", "-r", type=int, default=100, help="Timed trials")

    p = sub.add_parser("grad-check", help="Finite-difference check of every model in float64")
    p.add_argument("--tolerance", type=float, default=settings.GRAD_CHECK_TOL, help="Max relative error")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset if args.preset else (None if args.config else "toy"))
    overrides = {}
    if args.workdir:
        overrides["workdir"] = args.workdir
    if args.dataset:
        overrides["dataset"] = args.dataset
    if overrides:
        cfg = cfg.copy(update={"paths": cfg.paths.copy(update=overrides)})
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        configure_torch(args.deterministic, args.threads)
        cfg = resolve_config(args)
        logger.info(f"latentwave {__version__}: {args.command} (preset={cfg.preset}, workdir={cfg.workdir})")
        COMMANDS[args.command](args, cfg)
    except LatentwaveError as e:
        logger.error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    except Exception as e:
        logger.error(f"Unexpected failure in {args.command}: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
