"""Single-token-per-frame codec over fine frame features.

The decoder does not regress features directly: it predicts, for each fine RVQ layer, a
categorical distribution over that layer's codewords. Features are recovered as the
expected codeword sum under those distributions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .conformer import ConformerStack
from .fine_codec import FineCodecConfig, FrameFeatures, fc_bitrate
from .quantize import Codebook, QuantizeResult, ResidualVQ


@dataclass
class CoarseCodecConfig:
    latent_dim: int = 128  # fine feature dimension
    fine_n_q: int = 16
    fine_codebook_size: int = 256
    width: int = 128
    heads: int = 4
    ff_mult: int = 2
    kernel_size: int = 7
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    code_dim: int = 64
    codebook_size: int = 1024
    ema_decay: float = 0.99
    commitment: float = 0.25
    dead_horizon: int = 100

    def __post_init__(self):
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("conformer block counts must be >= 1")

    @classmethod
    def for_fine(cls, fine: FineCodecConfig, **kwargs) -> "CoarseCodecConfig":
        return cls(latent_dim=fine.latent_dim, fine_n_q=fine.n_q, fine_codebook_size=fine.codebook_size, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def full_coarse_config(fine: FineCodecConfig) -> CoarseCodecConfig:
    return CoarseCodecConfig.for_fine(fine, width=384, heads=6, ff_mult=4, encoder_blocks=3, decoder_blocks=3,
                                      code_dim=128)


def cc_bitrate(cfg: CoarseCodecConfig, frame_rate: float) -> float:
    return fc_bitrate(frame_rate=frame_rate, n_q=1, codebook_size=cfg.codebook_size)


class CoarseCodec(nn.Module):
    def __init__(self, cfg: CoarseCodecConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.latent_dim, cfg.width)
        self.encoder = ConformerStack(cfg.width, cfg.encoder_blocks, cfg.heads, cfg.ff_mult, cfg.kernel_size)
        self.to_code = nn.Linear(cfg.width, cfg.code_dim)
        self.vq = Codebook(cfg.codebook_size, cfg.code_dim, decay=cfg.ema_decay, beta=cfg.commitment,
                           dead_horizon=cfg.dead_horizon)
        self.from_code = nn.Linear(cfg.code_dim, cfg.width)
        self.decoder = ConformerStack(cfg.width, cfg.decoder_blocks, cfg.heads, cfg.ff_mult, cfg.kernel_size)
        self.heads = nn.ModuleList([nn.Linear(cfg.width, cfg.fine_codebook_size) for _ in range(cfg.fine_n_q)])

    def encode(self, feats: torch.Tensor, update: bool = True) -> QuantizeResult:
        """(B, T, latent_dim) -> one code per frame."""
        if feats.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"dimension mismatch: features have {feats.shape[-1]}, codec expects {self.cfg.latent_dim}")
        h = self.encoder(self.in_proj(feats))
        return self.vq(self.to_code(h), update=update)

    def decode_logits(self, codes: torch.Tensor) -> torch.Tensor:
        """(B, T, code_dim) quantized codes -> (B, T, n_q, K) logits."""
        h = self.decoder(self.from_code(codes))
        return torch.stack([head(h) for head in self.heads], dim=-2)

    def tokens_to_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.decode_logits(self.vq.lookup(tokens))

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, QuantizeResult]:
        q = self.encode(feats)
        return self.decode_logits(q.quantized), q


@dataclass
class CoarseTokenSeq:
    indices: torch.Tensor  # (T,) long
    codebook_size: int
    frame_rate: float

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class RVQDistribution:
    probs: torch.Tensor  # (T, n_q, K)

    def __post_init__(self):
        if self.probs.dim() != 3:
            raise ValueError(f"expected (T, n_q, K) probabilities, got shape {tuple(self.probs.shape)}")

    def check(self, atol: float = 1e-5) -> None:
        if (self.probs < 0).any() or ((self.probs.sum(-1) - 1).abs() > atol).any():
            raise ValueError("not a normalised distribution")


def cc_encode(f: FrameFeatures, codec: CoarseCodec) -> CoarseTokenSeq:
    with torch.no_grad():
        res = codec.encode(f.frames.unsqueeze(0), update=False)
    return CoarseTokenSeq(res.indices[0], codec.cfg.codebook_size, f.frame_rate)


def cc_decode_distribution(c: CoarseTokenSeq | torch.Tensor, codec: CoarseCodec) -> RVQDistribution:
    tokens = c.indices if isinstance(c, CoarseTokenSeq) else c
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= codec.cfg.codebook_size):
        raise IndexError(f"coarse token out of range [0, {codec.cfg.codebook_size})")
    with torch.no_grad():
        logits = codec.tokens_to_logits(tokens.long().unsqueeze(0))[0]
    return RVQDistribution(torch.softmax(logits.double(), dim=-1).float())


def cc_reconstruct_features(dist: RVQDistribution | torch.Tensor, fine_rvq: ResidualVQ,
                            frame_rate: float | None = None) -> FrameFeatures:
    probs = dist.probs if isinstance(dist, RVQDistribution) else dist
    if probs.shape[-2:] != (fine_rvq.n_q, fine_rvq.size):
        raise ValueError(f"distribution shape {tuple(probs.shape[-2:])} does not match fine RVQ ({fine_rvq.n_q}, {fine_rvq.size})")
    return FrameFeatures(fine_rvq.expected_decode(probs), frame_rate or 0.0)


def cc_select_fine_tokens(dist: RVQDistribution | torch.Tensor, mode: str = "argmax", seed: int = 0) -> torch.Tensor:
    """Pick one fine codeword per (frame, layer): argmax (ties -> lowest index) or a seeded draw."""
    probs = dist.probs if isinstance(dist, RVQDistribution) else dist
    if mode == "argmax":
        return probs.argmax(-1)
    if mode == "sample":
        gen = torch.Generator().manual_seed(seed)
        flat = probs.reshape(-1, probs.shape[-1]).double()
        return torch.multinomial(flat, 1, generator=gen).reshape(probs.shape[:-1])
    raise ValueError(f"unknown selection mode {mode!r}")


def constant_frame_error(frames: torch.Tensor) -> float:
    """MSE of the best single constant frame (the per-dimension mean): a sanity floor."""
    return float(((frames - frames.mean(0, keepdim=True)) ** 2).mean())


def as_numpy(seq: CoarseTokenSeq) -> np.ndarray:
    return seq.indices.cpu().numpy()
