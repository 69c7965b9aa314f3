"""Decoder-only transformer over coarse speech tokens with a phoneme + speaker prefix.

The prefix (speaker slot followed by phoneme-encoder outputs) is attended bidirectionally;
speech tokens see the whole prefix and are causal among themselves.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .conformer import ConformerStack

IGNORE = -100


@dataclass
class LMConfig:
    speech_codebook_size: int = 1024
    phoneme_vocab: int = 64
    speakers: int = 2
    width: int = 256
    heads: int = 4
    decoder_layers: int = 4
    phoneme_encoder_blocks: int = 2
    ff_mult: int = 4
    max_prefix: int = 128
    max_speech: int = 1024
    dropout: float = 0.0

    def __post_init__(self):
        if self.speech_codebook_size < 2 or self.phoneme_vocab < 2:
            raise ValueError("vocabulary sizes must be >= 2")
        if self.decoder_layers < 1 or self.phoneme_encoder_blocks < 1:
            raise ValueError("layer counts must be >= 1")

    @property
    def bos(self) -> int:
        return self.speech_codebook_size

    @property
    def eos(self) -> int:
        return self.speech_codebook_size + 1

    @property
    def speech_vocab(self) -> int:
        return self.speech_codebook_size + 2

    def to_dict(self) -> dict:
        return asdict(self)


def full_lm_config(speech_codebook_size: int = 1024, phoneme_vocab: int = 256, speakers: int = 8000) -> LMConfig:
    return LMConfig(speech_codebook_size, phoneme_vocab, speakers, width=1536, heads=16, decoder_layers=16,
                    phoneme_encoder_blocks=6, max_prefix=512, max_speech=2048)


def build_attention_mask(prefix_len: int, speech_len: int) -> torch.Tensor:
    """Boolean (N, N) matrix, True where query row i may attend to key column j."""
    if prefix_len < 0 or speech_len < 0:
        raise ValueError("lengths must be non-negative")
    n = prefix_len + speech_len
    mask = torch.zeros(n, n, dtype=torch.bool)
    mask[:, :prefix_len] = True
    mask[prefix_len:, prefix_len:] = torch.ones(speech_len, speech_len, dtype=torch.bool).tril()
    return mask


@dataclass
class PrefixBatch:
    phonemes: torch.Tensor  # (B, Tw) long, padded with 0
    phoneme_lengths: torch.Tensor  # (B,)
    speakers: torch.Tensor  # (B,)
    targets: torch.Tensor  # (B, Tc) coarse tokens followed by EOS, padded with IGNORE
    target_lengths: torch.Tensor  # (B,) including EOS


def make_batch(phonemes: list[list[int]], speakers: list[int], tokens: list[list[int]], eos: int) -> PrefixBatch:
    b = len(phonemes)
    tw = max(len(p) for p in phonemes)
    tc = max(len(t) for t in tokens) + 1
    ph = torch.zeros(b, tw, dtype=torch.long)
    tg = torch.full((b, tc), IGNORE, dtype=torch.long)
    for i, (p, t) in enumerate(zip(phonemes, tokens)):
        ph[i, : len(p)] = torch.tensor(p)
        tg[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        tg[i, len(t)] = eos
    return PrefixBatch(
        ph,
        torch.tensor([len(p) for p in phonemes]),
        torch.tensor(speakers, dtype=torch.long),
        tg,
        torch.tensor([len(t) + 1 for t in tokens]),
    )


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim), nn.Dropout(dropout))

    def forward(self, x, attn_block):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, attn_mask=attn_block, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class PrefixLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.phoneme_embed = nn.Embedding(cfg.phoneme_vocab, w)
        self.phoneme_pos = nn.Embedding(cfg.max_prefix, w)
        self.phoneme_encoder = ConformerStack(w, cfg.phoneme_encoder_blocks, cfg.heads, cfg.ff_mult, dropout=cfg.dropout)
        self.speaker_embed = nn.Embedding(cfg.speakers, w)
        self.prefix_pos = nn.Embedding(cfg.max_prefix + 1, w)
        self.speech_embed = nn.Embedding(cfg.speech_vocab, w)
        self.speech_pos = nn.Embedding(cfg.max_speech + 1, w)
        self.segment_embed = nn.Embedding(2, w)  # 0: prefix, 1: speech
        self.layers = nn.ModuleList(
            [DecoderLayer(w, cfg.heads, cfg.ff_mult, cfg.dropout) for _ in range(cfg.decoder_layers)]
        )
        self.norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, cfg.speech_vocab)

    def encode_prefix(self, phonemes: torch.Tensor, phoneme_lengths: torch.Tensor, speakers: torch.Tensor):
        """-> (prefix embeddings (B, Tw + 1, W), prefix padding mask (B, Tw + 1))."""
        b, tw = phonemes.shape
        if tw + 1 > self.cfg.max_prefix:
            raise ValueError(f"prefix of {tw + 1} exceeds max_prefix {self.cfg.max_prefix}")
        if speakers.min() < 0 or speakers.max() >= self.cfg.speakers:
            raise ValueError(f"unknown speaker id; model knows {self.cfg.speakers} speakers")
        if phonemes.max() >= self.cfg.phoneme_vocab:
            raise ValueError("phoneme id outside the vocabulary")
        pos = torch.arange(tw, device=phonemes.device)
        ph_pad = pos.unsqueeze(0) >= phoneme_lengths.unsqueeze(1)
        h = self.phoneme_embed(phonemes) + self.phoneme_pos(pos)
        h = self.phoneme_encoder(h, ph_pad)
        prefix = torch.cat([self.speaker_embed(speakers).unsqueeze(1), h], dim=1)
        prefix = prefix + self.prefix_pos(torch.arange(tw + 1, device=phonemes.device)) + self.segment_embed.weight[0]
        pad = torch.cat([torch.zeros(b, 1, dtype=torch.bool, device=phonemes.device), ph_pad], dim=1)
        return prefix, pad

    def speech_inputs(self, targets: torch.Tensor) -> torch.Tensor:
        """Shift targets right behind BOS; padding positions become EOS (they are never attended)."""
        inp = targets[:, :-1].clone()
        inp[inp == IGNORE] = self.cfg.eos
        bos = torch.full((targets.shape[0], 1), self.cfg.bos, dtype=torch.long, device=targets.device)
        return torch.cat([bos, inp], dim=1)

    def forward(self, phonemes, phoneme_lengths, speakers, speech_in, speech_lengths=None) -> torch.Tensor:
        """Logits over the speech vocabulary at every speech input position, (B, S, V)."""
        prefix, prefix_pad = self.encode_prefix(phonemes, phoneme_lengths, speakers)
        b, s = speech_in.shape
        if s > self.cfg.max_speech + 1:
            raise ValueError(f"speech length {s} exceeds max_speech {self.cfg.max_speech}")
        pos = torch.arange(s, device=speech_in.device)
        speech = self.speech_embed(speech_in) + self.speech_pos(pos) + self.segment_embed.weight[1]
        x = torch.cat([prefix, speech], dim=1)
        p = prefix.shape[1]

        allowed = build_attention_mask(p, s).to(x.device).unsqueeze(0).expand(b, -1, -1).clone()
        allowed[:, :, :p] &= ~prefix_pad.unsqueeze(1)
        if speech_lengths is not None:
            speech_pad = pos.unsqueeze(0) >= speech_lengths.unsqueeze(1)
            allowed[:, :, p:] &= ~speech_pad.unsqueeze(1)
        block = ~allowed
        block = block.repeat_interleave(self.cfg.heads, dim=0)
        for layer in self.layers:
            x = layer(x, block)
        return self.head(self.norm(x[:, p:]))


def lm_forward_loss(model: PrefixLM, batch: PrefixBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Token-averaged cross-entropy of the targets given the prefix and the previous tokens."""
    if batch.targets.numel() == 0 or int((batch.targets != IGNORE).sum()) == 0:
        raise ValueError("empty targets")
    speech_in = model.speech_inputs(batch.targets)
    logits = model(batch.phonemes, batch.phoneme_lengths, batch.speakers, speech_in, batch.target_lengths)
    return logits, sequence_cross_entropy(logits, batch.targets)


def sequence_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


# --------------------------------------------------------------------------- sampling


def nucleus_mask(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Smallest set of tokens whose cumulative probability reaches ``top_p`` (ties: lower index first)."""
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    sorted_p, order = torch.sort(probs, dim=-1, descending=True, stable=True)
    before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    keep_sorted = before < top_p
    keep_sorted[..., 0] = True
    return torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)


def top_p_sample(logits: torch.Tensor, top_p: float = 0.9, temperature: float = 1.0,
                 generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw one token per row from the renormalised nucleus; returns (tokens, nucleus mask)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    keep = nucleus_mask(probs, top_p)
    filtered = probs * keep
    filtered = filtered / filtered.sum(-1, keepdim=True)
    if int(keep.sum(-1).max()) == 1:
        return filtered.argmax(-1), keep
    return torch.multinomial(filtered, 1, generator=generator).squeeze(-1), keep


@dataclass
class GenerationResult:
    tokens: torch.Tensor  # (T,) coarse tokens, EOS excluded
    truncated: bool
    nucleus_sizes: list[int] = field(default_factory=list)


@torch.no_grad()
def generate(model: PrefixLM, phonemes: list[int] | torch.Tensor, speaker_id: int, top_p: float = 0.9,
             temperature: float = 1.0, max_len: int = 512, seed: int = 0, greedy: bool = False) -> GenerationResult:
    """Autoregressive decoding until EOS or ``max_len`` tokens."""
    was_training = model.training
    model.eval()
    ph = torch.as_tensor(phonemes, dtype=torch.long).reshape(1, -1)
    lengths = torch.tensor([ph.shape[1]])
    spk = torch.tensor([speaker_id])
    gen = torch.Generator().manual_seed(seed)
    cfg = model.cfg
    max_len = min(max_len, cfg.max_speech)
    seq = [cfg.bos]
    sizes, truncated = [], True
    for _ in range(max_len):
        logits = model(ph, lengths, spk, torch.tensor([seq]))[0, -1]
        logits[cfg.bos] = -math.inf
        if greedy:
            token = int(logits.argmax())
            sizes.append(1)
        else:
            tok, keep = top_p_sample(logits, top_p, temperature, gen)
            token = int(tok)
            assert bool(keep[token]), "sampled token outside the nucleus"
            sizes.append(int(keep.sum()))
        if token == cfg.eos:
            truncated = False
            break
        seq.append(token)
    model.train(was_training)
    return GenerationResult(torch.tensor(seq[1:], dtype=torch.long), truncated, sizes)
