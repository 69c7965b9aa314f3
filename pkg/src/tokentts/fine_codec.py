"""Waveform <-> frame-feature autoencoder with a residual VQ bottleneck."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dsp import SAMPLE_RATE, Waveform, pad_to_frames
from .quantize import QuantizeResult, ResidualVQ


@dataclass
class FineCodecConfig:
    strides: tuple[int, ...] = (4, 5, 5, 6)
    # one width per resolution, from the waveform side to the latent side
    channels: tuple[int, ...] = (32, 48, 64, 96, 128)
    latent_dim: int = 128
    n_q: int = 16
    codebook_size: int = 256
    res_dilations: tuple[int, ...] = (1, 3)
    sample_rate: int = SAMPLE_RATE
    ema_decay: float = 0.99
    commitment: float = 0.25
    dead_horizon: int = 100

    def __post_init__(self):
        self.strides = tuple(self.strides)
        self.channels = tuple(self.channels)
        self.res_dilations = tuple(self.res_dilations)
        if len(self.channels) != len(self.strides) + 1:
            raise ValueError("channels needs one more entry than strides")

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def to_dict(self) -> dict:
        return asdict(self)


def full_fine_config() -> FineCodecConfig:
    """Full-size layout: four stride layers totalling 600x, 16 quantizers of 256 entries."""
    return FineCodecConfig(channels=(64, 128, 256, 384, 512), latent_dim=256)


def fc_bitrate(cfg: FineCodecConfig | None = None, *, frame_rate: float | None = None, n_q: int | None = None,
               codebook_size: int | None = None) -> float:
    """Token bitrate in kbps: frames/s x quantizers x bits per index."""
    frame_rate = frame_rate if frame_rate is not None else cfg.frame_rate
    n_q = n_q if n_q is not None else cfg.n_q
    codebook_size = codebook_size if codebook_size is not None else cfg.codebook_size
    return frame_rate * n_q * math.log2(codebook_size) / 1000.0


class ResUnit(nn.Module):
    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ELU(),
            nn.Conv1d(channels, channels, 3, dilation=dilation, padding=dilation),
            nn.ELU(),
            nn.Conv1d(channels, channels, 1),
        )

    def forward(self, x):
        return x + self.block(x)


class Down(nn.Module):
    """Residual units, then a stride-s convolution that maps length L to exactly L / s."""

    def __init__(self, c_in: int, c_out: int, stride: int, dilations):
        super().__init__()
        self.res = nn.Sequential(*[ResUnit(c_in, d) for d in dilations])
        self.stride = stride
        self.conv = nn.Conv1d(c_in, c_out, 2 * stride, stride=stride)

    def forward(self, x):
        x = F.elu(self.res(x))
        s = self.stride
        return self.conv(F.pad(x, (s // 2, s - s // 2)))


class Up(nn.Module):
    """Transposed convolution mapping length L to exactly L * s, then residual units."""

    def __init__(self, c_in: int, c_out: int, stride: int, dilations):
        super().__init__()
        self.stride = stride
        self.conv = nn.ConvTranspose1d(c_in, c_out, 2 * stride, stride=stride)
        self.res = nn.Sequential(*[ResUnit(c_out, d) for d in dilations])

    def forward(self, x):
        n = x.shape[-1]
        s = self.stride
        x = self.conv(F.elu(x))
        x = x[..., s // 2 : s // 2 + n * s]
        return self.res(x)


class FineEncoder(nn.Module):
    def __init__(self, cfg: FineCodecConfig):
        super().__init__()
        ch = cfg.channels
        self.conv_in = nn.Conv1d(1, ch[0], 7, padding=3)
        self.downs = nn.ModuleList(
            [Down(ch[i], ch[i + 1], s, cfg.res_dilations) for i, s in enumerate(cfg.strides)]
        )
        self.conv_out = nn.Conv1d(ch[-1], cfg.latent_dim, 3, padding=1)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, samples) -> (B, frames, latent_dim)."""
        x = self.conv_in(wav.unsqueeze(1))
        for down in self.downs:
            x = down(x)
        return self.conv_out(F.elu(x)).transpose(1, 2)


class FineDecoder(nn.Module):
    def __init__(self, cfg: FineCodecConfig):
        super().__init__()
        ch = cfg.channels
        self.conv_in = nn.Conv1d(cfg.latent_dim, ch[-1], 7, padding=3)
        self.ups = nn.ModuleList(
            [Up(ch[i + 1], ch[i], s, cfg.res_dilations) for i, s in reversed(list(enumerate(cfg.strides)))]
        )
        self.conv_out = nn.Conv1d(ch[0], 1, 7, padding=3)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, frames, latent_dim) -> (B, frames * hop), bounded by tanh."""
        x = self.conv_in(feats.transpose(1, 2))
        for up in self.ups:
            x = up(x)
        return torch.tanh(self.conv_out(F.elu(x))).squeeze(1)


class FineCodec(nn.Module):
    def __init__(self, cfg: FineCodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or FineCodecConfig()
        self.encoder = FineEncoder(self.cfg)
        self.rvq = ResidualVQ(
            self.cfg.n_q,
            self.cfg.codebook_size,
            self.cfg.latent_dim,
            decay=self.cfg.ema_decay,
            beta=self.cfg.commitment,
            dead_horizon=self.cfg.dead_horizon,
        )
        self.decoder = FineDecoder(self.cfg)

    @property
    def hop(self) -> int:
        return self.cfg.hop

    def encode(self, wav: torch.Tensor) -> torch.Tensor:
        if wav.shape[-1] % self.hop:
            raise ValueError(f"waveform length {wav.shape[-1]} is not a multiple of {self.hop}; pad first")
        return self.encoder(wav)

    def quantize(self, feats: torch.Tensor, n_active: int | None = None, update: bool = True) -> QuantizeResult:
        return self.rvq(feats, n_active=n_active, update=update)

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        return self.decoder(feats)

    def decode_tokens(self, grid: torch.Tensor) -> torch.Tensor:
        return self.decode(self.rvq.decode(grid))

    def forward(self, wav: torch.Tensor, n_active: int | None = None) -> tuple[torch.Tensor, QuantizeResult]:
        q = self.quantize(self.encode(wav), n_active)
        return self.decode(q.quantized), q


@dataclass
class FrameFeatures:
    frames: torch.Tensor  # (T, d)
    frame_rate: float
    original_len: int | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]


def _as_batch(w: Waveform | torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(w, Waveform):
        return w.tensor().unsqueeze(0)
    t = torch.as_tensor(w, dtype=torch.float32)
    return t.unsqueeze(0) if t.dim() == 1 else t


def fc_encode(w: Waveform, codec: FineCodec, pad: bool = True) -> FrameFeatures:
    """Waveform to frame features; with ``pad`` the input is zero-padded to a whole frame count."""
    samples = w.samples
    if len(samples) == 0:
        raise ValueError("empty waveform")
    if len(samples) % codec.hop:
        if not pad:
            raise ValueError(f"length {len(samples)} is not a multiple of {codec.hop} and padding is disabled")
        samples, _ = pad_to_frames(samples, codec.hop)
    with torch.no_grad():
        frames = codec.encode(torch.from_numpy(np.ascontiguousarray(samples)).unsqueeze(0))[0]
    return FrameFeatures(frames, codec.cfg.frame_rate, len(w))


def fc_quantize(f: FrameFeatures, codec: FineCodec, n_active: int | None = None):
    """-> (grid (T, n_active), quantized FrameFeatures, commit loss)."""
    with torch.no_grad():
        res = codec.rvq(f.frames, n_active=n_active, update=False)
    return res.indices, FrameFeatures(res.quantized, f.frame_rate, f.original_len), res.commit_loss


def fc_decode(f: FrameFeatures | torch.Tensor, codec: FineCodec, trim: bool = False) -> Waveform:
    frames = f.frames if isinstance(f, FrameFeatures) else f
    if frames.dim() != 2 or frames.shape[-1] != codec.cfg.latent_dim:
        raise ValueError(f"expected (T, {codec.cfg.latent_dim}) frames, got {tuple(frames.shape)}")
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame")
    with torch.no_grad():
        wav = codec.decode(frames.unsqueeze(0))[0].numpy()
    if trim and isinstance(f, FrameFeatures) and f.original_len is not None:
        wav = wav[: f.original_len]
    return Waveform(wav, codec.cfg.sample_rate)
