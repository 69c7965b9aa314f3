"""Presets and the training configuration resolved from preset + file + CLI overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .coarse_codec import CoarseCodecConfig, full_coarse_config
from .dsp import SynthConfig
from .fine_codec import FineCodecConfig, full_fine_config
from .losses import DiscriminatorConfig, LossWeights, full_discriminator_config

RUN_DIR_ENV = "TOKENTTS_RUN_DIR"
STAGES = ("fine", "coarse", "lm")


@dataclass
class StageHParams:
    steps: int
    batch_size: int
    lr: float
    optimizer: str = "radam_lookahead"
    betas: tuple[float, float] = (0.8, 0.99)
    segment_len: int = 24000
    disc_start: int = 0
    disc_lr: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50
    eval_every: int = 200
    checkpoint_every: int = 500
    grad_clip: float | None = 10.0
    # learning-rate schedule (used by the LM stage)
    lr_min: float | None = None
    decay_start: int = 4000
    decay_horizon: int = 50_000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageHParams":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class Preset:
    name: str
    fine: FineCodecConfig
    coarse: CoarseCodecConfig
    disc: DiscriminatorConfig
    lm: dict  # LMConfig fields except vocabulary sizes, which come from the data
    fine_train: StageHParams
    coarse_train: StageHParams
    lm_train: StageHParams
    synth: SynthConfig = field(default_factory=SynthConfig)

    def stage(self, name: str) -> StageHParams:
        return {"fine": self.fine_train, "coarse": self.coarse_train, "lm": self.lm_train}[name]


def toy_preset() -> Preset:
    fine = FineCodecConfig(channels=(16, 32, 64, 96, 128), latent_dim=128, n_q=16, codebook_size=256)
    return Preset(
        name="toy",
        fine=fine,
        coarse=CoarseCodecConfig.for_fine(fine, width=128, heads=4, ff_mult=2, encoder_blocks=2, decoder_blocks=2),
        disc=DiscriminatorConfig(period_channels=(8, 16, 32), scale_channels=(8, 16, 32)),
        lm=dict(width=256, heads=4, decoder_layers=4, phoneme_encoder_blocks=2, ff_mult=4, max_prefix=64, max_speech=256),
        fine_train=StageHParams(
            steps=1200, batch_size=8, lr=1e-3, optimizer="adam", segment_len=3600, disc_start=800,
            weights=LossWeights(adv=1.0, fm=2.0, mrs=1.0, q=1.0, wav_l1=10.0),
            log_every=25, eval_every=200, checkpoint_every=400,
        ),
        coarse_train=StageHParams(
            steps=600, batch_size=8, lr=1e-3, optimizer="adam", segment_len=3600, disc_start=400,
            weights=LossWeights(adv=1.0, fm=2.0, mrs=1.0, q=1.0, wav_l1=10.0, feature_mse=1.0, token_ce=1.0),
            log_every=25, eval_every=200, checkpoint_every=300,
        ),
        lm_train=StageHParams(
            steps=600, batch_size=16, lr=1e-3, optimizer="radam_lookahead", betas=(0.9, 0.98),
            lr_min=5e-5, decay_start=4000, decay_horizon=50_000,
            log_every=25, eval_every=200, checkpoint_every=300,
        ),
        synth=SynthConfig(min_tokens=3, max_tokens=5),
    )


def full_preset() -> Preset:
    fine = full_fine_config()
    return Preset(
        name="full",
        fine=fine,
        coarse=full_coarse_config(fine),
        disc=full_discriminator_config(),
        lm=dict(width=1536, heads=16, decoder_layers=16, phoneme_encoder_blocks=6, ff_mult=4, max_prefix=512,
                max_speech=2048),
        fine_train=StageHParams(steps=400_000, batch_size=16, lr=2e-4, segment_len=24000),
        coarse_train=StageHParams(steps=400_000, batch_size=16, lr=2e-4, segment_len=24000),
        lm_train=StageHParams(steps=200_000, batch_size=32, lr=1e-3, betas=(0.9, 0.98), lr_min=5e-5,
                              decay_start=4000, decay_horizon=50_000),
    )


PRESETS = {"toy": toy_preset, "full": full_preset}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class TrainConfig:
    stage: str
    manifest: str
    run_dir: str | None = None
    preset: str = "toy"
    seed: int = 0
    fine_ckpt: str | None = None
    coarse_ckpt: str | None = None
    # per-stage overrides; None keeps the preset value
    steps: int | None = None
    batch_size: int | None = None
    segment_len: int | None = None
    lr: float | None = None
    optimizer: str | None = None
    disc_start: int | None = None
    checkpoint_every: int | None = None
    eval_every: int | None = None
    log_every: int | None = None
    lr_min: float | None = None
    decay_start: int | None = None
    decay_horizon: int | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def resolved_run_dir(self) -> Path:
        return Path(self.run_dir or os.environ.get(RUN_DIR_ENV, "runs/default"))

    def hparams(self, preset: Preset | None = None) -> StageHParams:
        preset = preset or get_preset(self.preset)
        hp = dataclasses.replace(preset.stage(self.stage))
        for name in ("steps", "batch_size", "segment_len", "lr", "optimizer", "disc_start", "checkpoint_every",
                     "eval_every", "log_every", "lr_min", "decay_start", "decay_horizon"):
            value = getattr(self, name)
            if value is not None:
                setattr(hp, name, value)
        return hp


def load_config_file(path: str | Path) -> dict[str, Any]:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def build_train_config(stage: str, file_values: dict | None = None, **cli: Any) -> TrainConfig:
    """Merge: dataclass defaults < config file < explicit CLI values (None means "not given")."""
    known = {f.name for f in fields(TrainConfig)}
    merged: dict[str, Any] = {}
    for source in (file_values or {}, cli):
        unknown = set(source) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update({k: v for k, v in source.items() if v is not None})
    merged["stage"] = stage
    if "manifest" not in merged:
        raise ValueError("a dataset manifest is required")
    return TrainConfig(**merged)
