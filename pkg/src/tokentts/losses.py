"""Multi-period / multi-scale discriminators and the codec training objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .dsp import DEFAULT_RESOLUTIONS, STFTConfig, stft_magnitude

LRELU_SLOPE = 0.1


@dataclass
class DiscriminatorConfig:
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    scales: tuple[int, ...] = (1, 2, 4)
    period_channels: tuple[int, ...] = (16, 32, 64)
    scale_channels: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        self.periods = tuple(self.periods)
        self.scales = tuple(self.scales)
        self.period_channels = tuple(self.period_channels)
        self.scale_channels = tuple(self.scale_channels)
        if not self.periods or not self.scales:
            raise ValueError("need at least one period and one scale discriminator")
        if len(set(self.periods)) != len(self.periods):
            raise ValueError("periods must be distinct")


def full_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(period_channels=(32, 128, 512, 1024), scale_channels=(128, 256, 512, 1024))


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels: Sequence[int]):
        super().__init__()
        self.period = period
        convs, c_in = [], 1
        for c in channels:
            convs.append(nn.Conv2d(c_in, c, (5, 1), (3, 1), padding=(2, 0)))
            c_in = c
        convs.append(nn.Conv2d(c_in, c_in, (5, 1), 1, padding=(2, 0)))
        self.convs = nn.ModuleList(convs)
        self.out = nn.Conv2d(c_in, 1, (3, 1), 1, padding=(1, 0))

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T) -> (B, 1, ceil(T / period), period), reflect-padding the tail."""
        b, t = x.shape
        if t % self.period:
            x = F.pad(x.unsqueeze(1), (0, self.period - t % self.period), mode="reflect").squeeze(1)
        return x.view(b, 1, -1, self.period)

    def forward(self, x: torch.Tensor):
        h = self.fold(x)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            feats.append(h)
        logits = self.out(h)
        feats.append(logits)
        return logits.flatten(1), feats


class ScaleDiscriminator(nn.Module):
    def __init__(self, scale: int, channels: Sequence[int]):
        super().__init__()
        self.scale = scale
        n_pool = max(scale.bit_length() - 1, 0)
        self.pool = nn.Sequential(*[nn.AvgPool1d(4, 2, padding=2) for _ in range(n_pool)])
        convs = [nn.Conv1d(1, channels[0], 15, padding=7)]
        c_in = channels[0]
        for c in channels[1:]:
            convs.append(nn.Conv1d(c_in, c, 41, stride=4, groups=4 if c_in % 4 == 0 and c % 4 == 0 else 1, padding=20))
            c_in = c
        convs.append(nn.Conv1d(c_in, c_in, 5, padding=2))
        self.convs = nn.ModuleList(convs)
        self.out = nn.Conv1d(c_in, 1, 3, padding=1)

    def forward(self, x: torch.Tensor):
        h = self.pool(x.unsqueeze(1))
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            feats.append(h)
        logits = self.out(h)
        feats.append(logits)
        return logits.flatten(1), feats


@dataclass
class DiscOutput:
    name: str
    family: str  # "mpd" or "msd"
    logits: torch.Tensor
    feats: list[torch.Tensor]


class DiscriminatorBank(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        self.period_discriminators = nn.ModuleList(
            [PeriodDiscriminator(p, self.cfg.period_channels) for p in self.cfg.periods]
        )
        self.scale_discriminators = nn.ModuleList(
            [ScaleDiscriminator(s, self.cfg.scale_channels) for s in self.cfg.scales]
        )

    @property
    def min_length(self) -> int:
        return 2 * max(self.cfg.periods)

    def forward(self, wav: torch.Tensor) -> list[DiscOutput]:
        if wav.shape[-1] < self.min_length:
            raise ValueError(f"input of {wav.shape[-1]} samples is too short, need >= {self.min_length}")
        outs = []
        for d in self.period_discriminators:
            logits, feats = d(wav)
            outs.append(DiscOutput(f"mpd_p{d.period}", "mpd", logits, feats))
        for d in self.scale_discriminators:
            logits, feats = d(wav)
            outs.append(DiscOutput(f"msd_s{d.scale}", "msd", logits, feats))
        return outs


def disc_forward(wav: torch.Tensor, bank: DiscriminatorBank) -> list[DiscOutput]:
    return bank(wav)


# --------------------------------------------------------------------------- loss primitives


def adversarial_pair_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms: (discriminator loss, generator loss)."""
    if real_logits.shape != fake_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(real_logits.shape)} vs {tuple(fake_logits.shape)}")
    d_loss = (real_logits - 1).pow(2).mean() + fake_logits.pow(2).mean()
    g_loss = (fake_logits - 1).pow(2).mean()
    return d_loss, g_loss


def generator_adv_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return (fake_logits - 1).pow(2).mean()


def _flatten(maps) -> list[torch.Tensor]:
    if isinstance(maps, torch.Tensor):
        return [maps]
    out = []
    for m in maps:
        out.extend(_flatten(m))
    return out


def feature_match_loss(real_feats, fake_feats) -> torch.Tensor:
    """Mean absolute difference per feature map, averaged over all maps.

    Accepts a tensor, a list of tensors, or nested lists (one list per discriminator).
    """
    real, fake = _flatten(real_feats), _flatten(fake_feats)
    if len(real) != len(fake):
        raise ValueError(f"feature lists differ in length: {len(real)} vs {len(fake)}")
    if not real:
        raise ValueError("no feature maps")
    terms = []
    for r, f in zip(real, fake):
        if r.shape != f.shape:
            raise ValueError(f"feature map shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        terms.append((r - f).abs().mean())
    return torch.stack(terms).mean()


def spectral_convergence(x_mag: torch.Tensor, y_mag: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    return torch.linalg.norm(y_mag - x_mag) / torch.linalg.norm(y_mag).clamp(min=eps)


def log_magnitude_l1(x_mag: torch.Tensor, y_mag: torch.Tensor, floor: float = 1e-5) -> torch.Tensor:
    return (x_mag.clamp(min=floor).log() - y_mag.clamp(min=floor).log()).abs().mean()


def mrs_loss(x: torch.Tensor, x_hat: torch.Tensor, resolutions: Sequence[STFTConfig] = DEFAULT_RESOLUTIONS) -> torch.Tensor:
    """Sum over resolutions of spectral convergence plus log-magnitude L1; ``x`` is the reference."""
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    total = x.new_zeros(())
    for cfg in resolutions:
        ref = stft_magnitude(x, cfg)
        est = stft_magnitude(x_hat, cfg)
        total = total + spectral_convergence(est, ref) + log_magnitude_l1(est, ref)
    return total


# --------------------------------------------------------------------------- assembled objectives


@dataclass
class LossWeights:
    adv: float = 1.0
    fm: float = 2.0
    mrs: float = 1.0
    q: float = 1.0
    # optional extras, zero unless a preset turns them on
    wav_l1: float = 0.0
    feature_mse: float = 0.0
    token_ce: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    adv: float
    fm: float
    mrs: float
    rvq_or_vq: float
    total: float
    extras: dict[str, float] = field(default_factory=dict)
    per_discriminator: dict[str, float] = field(default_factory=dict)
    disc_mpd: float | None = None
    disc_msd: float | None = None
    total_tensor: torch.Tensor | None = field(default=None, repr=False)

    def row(self) -> dict:
        out = {"adv": self.adv, "fm": self.fm, "mrs": self.mrs, "q": self.rvq_or_vq, "total": self.total}
        out.update(self.extras)
        if self.disc_mpd is not None:
            out["d_mpd"] = self.disc_mpd
            out["d_msd"] = self.disc_msd
        out.update({f"g_{k}": v for k, v in self.per_discriminator.items()})
        return out


def discriminator_loss(real: list[DiscOutput], fake: list[DiscOutput]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Discriminator-side objective summed over the bank; also returns the mpd/msd split."""
    parts = {"mpd": real[0].logits.new_zeros(()), "msd": real[0].logits.new_zeros(())}
    for r, f in zip(real, fake):
        d, _ = adversarial_pair_loss(r.logits, f.logits)
        parts[r.family] = parts[r.family] + d
    return parts["mpd"] + parts["msd"], parts


def _generator_terms(x, x_hat, real: list[DiscOutput] | None, fake: list[DiscOutput] | None, resolutions):
    zero = x_hat.new_zeros(())
    adv, fm, per = zero, zero, {}
    if fake is not None:
        for f in fake:
            g = generator_adv_loss(f.logits)
            per[f.name] = float(g.detach())
            adv = adv + g
        fm = feature_match_loss([[m.detach() for m in r.feats] for r in real], [f.feats for f in fake])
    mrs = mrs_loss(x, x_hat, resolutions)
    return adv, fm, mrs, per


def _assemble(adv, fm, mrs, q, extras: dict[str, torch.Tensor], weights: LossWeights, per) -> LossReport:
    total = weights.adv * adv + weights.fm * fm + weights.mrs * mrs + weights.q * q
    for name, value in extras.items():
        total = total + getattr(weights, name) * value
    return LossReport(
        adv=float(adv.detach()),
        fm=float(fm.detach()),
        mrs=float(mrs.detach()),
        rvq_or_vq=float(q.detach()),
        total=float(total.detach()),
        extras={k: float(v.detach()) for k, v in extras.items()},
        per_discriminator=per,
        total_tensor=total,
    )


def fine_codec_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    disc_real: list[DiscOutput] | None,
    disc_fake: list[DiscOutput] | None,
    commit: torch.Tensor,
    weights: LossWeights | None = None,
    resolutions: Sequence[STFTConfig] = DEFAULT_RESOLUTIONS,
) -> LossReport:
    """Generator-side objective of the fine codec.

    ``disc_real`` / ``disc_fake`` may be None before the discriminators are switched on,
    in which case the adversarial and feature-matching terms are zero.
    """
    weights = weights or LossWeights()
    adv, fm, mrs, per = _generator_terms(x, x_hat, disc_real, disc_fake, resolutions)
    extras = {}
    if weights.wav_l1:
        extras["wav_l1"] = (x - x_hat).abs().mean()
    return _assemble(adv, fm, mrs, commit, extras, weights, per)


class FrozenParametersError(RuntimeError):
    pass


def coarse_codec_loss(
    target: torch.Tensor,
    x_hat: torch.Tensor,
    disc_real: list[DiscOutput] | None,
    disc_fake: list[DiscOutput] | None,
    vq_loss: torch.Tensor,
    weights: LossWeights | None = None,
    resolutions: Sequence[STFTConfig] = DEFAULT_RESOLUTIONS,
    *,
    fine_codec: nn.Module | None = None,
    fine_checksum: str | None = None,
    feature_target: torch.Tensor | None = None,
    feature_estimate: torch.Tensor | None = None,
    token_logits: torch.Tensor | None = None,
    token_target: torch.Tensor | None = None,
) -> LossReport:
    """Generator-side objective of the coarse codec.

    ``target`` is the frozen fine codec's reconstruction of the ground truth and ``x_hat``
    the fine decoder's output on the coarse reconstruction. When ``fine_checksum`` is
    given, the fine codec parameters must still hash to it.
    """
    from .checkpoint import parameter_checksum

    if fine_checksum is not None:
        if fine_codec is None:
            raise ValueError("fine_checksum given without fine_codec")
        if parameter_checksum(fine_codec) != fine_checksum:
            raise FrozenParametersError("fine codec parameters changed during coarse training")
    weights = weights or LossWeights()
    adv, fm, mrs, per = _generator_terms(target, x_hat, disc_real, disc_fake, resolutions)
    extras = {}
    if weights.wav_l1:
        extras["wav_l1"] = (target - x_hat).abs().mean()
    if weights.feature_mse and feature_target is not None:
        extras["feature_mse"] = F.mse_loss(feature_estimate, feature_target)
    if weights.token_ce and token_logits is not None:
        extras["token_ce"] = F.cross_entropy(token_logits.reshape(-1, token_logits.shape[-1]), token_target.reshape(-1))
    return _assemble(adv, fm, mrs, vq_loss, extras, weights, per)
