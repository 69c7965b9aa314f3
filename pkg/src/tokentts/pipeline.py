"""Loading trained stages together and running text -> tokens -> waveform."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .checkpoint import Checkpoint, ConfigMismatchError, config_hash, load_checkpoint, parameter_checksum
from .coarse_codec import CoarseCodec, CoarseCodecConfig, CoarseTokenSeq, cc_decode_distribution, cc_encode, cc_select_fine_tokens
from .dsp import Vocab, Waveform, tokenize_text
from .fine_codec import FineCodec, FineCodecConfig, fc_decode, fc_encode, fc_quantize
from .prefix_lm import LMConfig, PrefixLM, generate


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def fine_from_checkpoint(ckpt: Checkpoint) -> FineCodec:
    model = FineCodec(FineCodecConfig(**ckpt.config["model"]))
    model.load_state_dict(ckpt.state["model"])
    return model


def coarse_from_checkpoint(ckpt: Checkpoint) -> CoarseCodec:
    model = CoarseCodec(CoarseCodecConfig(**ckpt.config["model"]))
    model.load_state_dict(ckpt.state["model"])
    return model


def lm_from_checkpoint(ckpt: Checkpoint) -> tuple[PrefixLM, Vocab]:
    model = PrefixLM(LMConfig(**ckpt.config["model"]))
    model.load_state_dict(ckpt.state["model"])
    return model, Vocab.from_json(ckpt.config["vocab"])


def upstream_record(ckpt: Checkpoint, model: nn.Module, path: str | Path) -> dict:
    """What a downstream checkpoint remembers about the stage it was trained on."""
    return {
        "path": str(Path(path).resolve()),
        "config_hash": config_hash(ckpt.config["model"]),
        "checksum": parameter_checksum(model),
        "iteration": ckpt.iteration,
    }


def check_upstream(record: dict, ckpt: Checkpoint, model: nn.Module, what: str) -> None:
    if record["config_hash"] != config_hash(ckpt.config["model"]):
        raise ConfigMismatchError(
            f"{what} config hash {config_hash(ckpt.config['model'])} differs from the one this stage was trained on "
            f"({record['config_hash']})"
        )
    if record["checksum"] != parameter_checksum(model):
        raise ConfigMismatchError(f"{what} parameters differ from the ones this stage was trained on")


def check_coarse_fits_fine(coarse: CoarseCodecConfig, fine: FineCodecConfig) -> None:
    for name, got, want in (
        ("feature dimension", coarse.latent_dim, fine.latent_dim),
        ("fine n_q", coarse.fine_n_q, fine.n_q),
        ("fine codebook size K", coarse.fine_codebook_size, fine.codebook_size),
    ):
        if got != want:
            raise ConfigMismatchError(f"{name} mismatch: coarse codec expects {got}, fine codec has {want}")


def check_lm_fits_coarse(lm: LMConfig, coarse: CoarseCodecConfig) -> None:
    if lm.speech_codebook_size != coarse.codebook_size:
        raise ConfigMismatchError(
            f"coarse codebook size K mismatch: LM expects {lm.speech_codebook_size}, coarse codec has {coarse.codebook_size}"
        )


@dataclass
class Models:
    fine: FineCodec
    coarse: CoarseCodec | None = None
    lm: PrefixLM | None = None
    vocab: Vocab | None = None
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict, repr=False)

    @property
    def frame_rate(self) -> float:
        return self.fine.cfg.frame_rate


def load_models(fine_path: str | Path, coarse_path: str | Path | None = None,
                lm_path: str | Path | None = None) -> Models:
    """Load up to three stages, refusing combinations that were not trained together."""
    fine_ckpt = load_checkpoint(fine_path, expect_stage="fine")
    models = Models(freeze(fine_from_checkpoint(fine_ckpt)), checkpoints={"fine": fine_ckpt})
    if coarse_path is not None:
        coarse_ckpt = load_checkpoint(coarse_path, expect_stage="coarse")
        coarse = coarse_from_checkpoint(coarse_ckpt)
        check_coarse_fits_fine(coarse.cfg, models.fine.cfg)
        check_upstream(coarse_ckpt.config["fine"], fine_ckpt, models.fine, "fine codec")
        models.coarse = freeze(coarse)
        models.checkpoints["coarse"] = coarse_ckpt
    if lm_path is not None:
        if models.coarse is None:
            raise ValueError("loading the LM requires the coarse codec")
        lm_ckpt = load_checkpoint(lm_path, expect_stage="lm")
        lm, vocab = lm_from_checkpoint(lm_ckpt)
        check_lm_fits_coarse(lm.cfg, models.coarse.cfg)
        check_upstream(lm_ckpt.config["coarse"], models.checkpoints["coarse"], models.coarse, "coarse codec")
        models.lm, models.vocab = freeze(lm), vocab
        models.checkpoints["lm"] = lm_ckpt
    return models


@dataclass
class SamplingConfig:
    top_p: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    greedy: bool = False
    fine_mode: str = "argmax"
    max_len: int = 512


@dataclass
class SynthesisResult:
    waveform: Waveform
    coarse: torch.Tensor  # (T,)
    fine: torch.Tensor  # (T, n_q)
    truncated: bool


def tokens_to_waveform(coarse_tokens: torch.Tensor, models: Models, fine_mode: str = "argmax",
                       seed: int = 0) -> tuple[Waveform, torch.Tensor]:
    """Coarse tokens -> fine token grid -> waveform of exactly T * hop samples."""
    n_q = models.fine.cfg.n_q
    if len(coarse_tokens) == 0:
        return Waveform(torch.zeros(0).numpy(), models.fine.cfg.sample_rate), torch.zeros(0, n_q, dtype=torch.long)
    dist = cc_decode_distribution(coarse_tokens, models.coarse)
    grid = cc_select_fine_tokens(dist, fine_mode, seed)
    with torch.no_grad():
        frames = models.fine.rvq.decode(grid)
    return fc_decode(frames, models.fine), grid


def synthesize(text: str, speaker_id: int, models: Models, sampling: SamplingConfig | None = None) -> SynthesisResult:
    if models.lm is None or models.coarse is None:
        raise ValueError("synthesis needs all three stages loaded")
    sampling = sampling or SamplingConfig()
    phonemes = tokenize_text(text, models.vocab)
    gen = generate(models.lm, phonemes.tokens, speaker_id, top_p=sampling.top_p, temperature=sampling.temperature,
                   max_len=sampling.max_len, seed=sampling.seed, greedy=sampling.greedy)
    wav, grid = tokens_to_waveform(gen.tokens, models, sampling.fine_mode, sampling.seed)
    return SynthesisResult(wav, gen.tokens, grid, gen.truncated)


def speech_to_tokens(w: Waveform, models: Models) -> tuple[CoarseTokenSeq, torch.Tensor]:
    """-> (coarse tokens (T,), fine token grid (T, n_q)); both of length ceil(len / hop)."""
    if models.coarse is None:
        raise ValueError("speech_to_tokens needs the coarse codec")
    feats = fc_encode(w, models.fine)
    grid, _, _ = fc_quantize(feats, models.fine)
    return cc_encode(feats, models.coarse), grid
