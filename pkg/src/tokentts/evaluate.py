"""Objective reconstruction metrics and the quantizer-count ablation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .coarse_codec import cc_bitrate
from .dsp import DEFAULT_RESOLUTIONS, DatasetManifest, STFTConfig, Waveform, pad_to_frames, snr_db
from .fine_codec import FineCodec, fc_bitrate
from .losses import mrs_loss
from .pipeline import Models, tokens_to_waveform
from .quantize import perplexity


def stft_distance(reference: np.ndarray, estimate: np.ndarray,
                  resolutions: Sequence[STFTConfig] = DEFAULT_RESOLUTIONS) -> float:
    """Multi-resolution spectral distance; resolutions longer than the signal are skipped."""
    usable = [r for r in resolutions if r.fft_size <= len(reference)]
    if not usable:
        return float("nan")
    ref = torch.as_tensor(np.asarray(reference, dtype=np.float32))[None]
    est = torch.as_tensor(np.asarray(estimate, dtype=np.float32))[None]
    with torch.no_grad():
        return float(mrs_loss(ref, est, usable))


def reconstruction_metrics(reference: np.ndarray, estimate: np.ndarray) -> dict:
    if len(reference) != len(estimate):
        raise ValueError(f"length mismatch: {len(reference)} vs {len(estimate)}")
    return {"snr_db": snr_db(reference, estimate), "stft_distance": stft_distance(reference, estimate)}


@dataclass
class ReconstructionReport:
    per_utterance: list[dict]
    mean: dict
    perplexity: dict
    bitrate_kbps: dict
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_utterance": self.per_utterance,
            "mean": self.mean,
            "perplexity": self.perplexity,
            "bitrate_kbps": self.bitrate_kbps,
            **self.extras,
        }


def _mean_rows(rows: list[dict]) -> dict:
    keys = [k for k in rows[0] if isinstance(rows[0][k], (int, float))]
    return {k: float(np.nanmean([r[k] for r in rows])) for k in keys}


@torch.no_grad()
def _fine_roundtrip(fine: FineCodec, x: np.ndarray, n_active: int | None = None) -> tuple[np.ndarray, torch.Tensor]:
    feats = fine.encode(torch.from_numpy(x)[None])
    q = fine.rvq(feats, n_active=n_active, update=False)
    return fine.decode(q.quantized)[0].numpy(), q.indices[0]


@torch.no_grad()
def _coarse_tokens(models: Models, x: np.ndarray) -> torch.Tensor:
    feats = models.fine.encode(torch.from_numpy(x)[None])
    return models.coarse.encode(feats, update=False).indices[0]


def eval_reconstruction(models: Models, manifest: DatasetManifest, split: str = "eval") -> ReconstructionReport:
    """Round-trip every utterance of ``split`` through the loaded codec stages.

    Fine metrics compare the input with the fine reconstruction. With a coarse codec loaded,
    ``coarse_*`` metrics compare the input with the coarse -> fine reconstruction. Token
    agreement re-encodes the reconstruction and counts matching token positions.
    """
    manifest.validate()
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} entries")
    fine = models.fine
    counts = [torch.zeros(fine.cfg.codebook_size) for _ in range(fine.cfg.n_q)]
    coarse_counts = torch.zeros(models.coarse.cfg.codebook_size) if models.coarse is not None else None
    rows = []
    for e in entries:
        x, _ = pad_to_frames(manifest.load_audio(e).samples)
        x_hat, grid = _fine_roundtrip(fine, x)
        row = {"id": e.id, **reconstruction_metrics(x, x_hat)}
        for layer in range(fine.cfg.n_q):
            counts[layer] += torch.bincount(grid[:, layer], minlength=fine.cfg.codebook_size).float()
        _, grid_again = _fine_roundtrip(fine, x_hat)
        row["fine_token_agreement"] = float((grid_again[:, 0] == grid[:, 0]).float().mean())
        if models.coarse is not None:
            tokens = _coarse_tokens(models, x)
            coarse_counts += torch.bincount(tokens, minlength=models.coarse.cfg.codebook_size).float()
            y, _ = tokens_to_waveform(tokens, models)
            coarse_metrics = reconstruction_metrics(x, y.samples)
            row.update({f"coarse_{k}": v for k, v in coarse_metrics.items()})
            row["token_agreement"] = float((_coarse_tokens(models, x_hat) == tokens).float().mean())
        rows.append(row)

    ppl = {
        "fine_layers_usage": [perplexity(c) for c in counts],
        "fine_layers_ema": fine.rvq.perplexities(),
    }
    bitrate = {"fine": fc_bitrate(fine.cfg)}
    if models.coarse is not None:
        ppl["coarse_usage"] = perplexity(coarse_counts)
        ppl["coarse_ema"] = perplexity(models.coarse.vq.cluster_size)
        bitrate["coarse"] = cc_bitrate(models.coarse.cfg, fine.cfg.frame_rate)
    return ReconstructionReport(rows, _mean_rows(rows), ppl, bitrate, {"split": split})


def ablate_quantizers(fine: FineCodec, waveforms: Sequence[Waveform | np.ndarray],
                      n_active: Sequence[int]) -> list[dict]:
    """One row per entry of ``n_active``: mean and per-utterance reconstruction error."""
    for n in n_active:
        if not 1 <= n <= fine.cfg.n_q:
            raise ValueError(f"n_active must be in [1, {fine.cfg.n_q}], got {n}")
    signals = [pad_to_frames(w.samples if isinstance(w, Waveform) else np.asarray(w, np.float32))[0] for w in waveforms]
    if not signals:
        raise ValueError("no waveforms to evaluate")
    table = []
    for n in n_active:
        per = [reconstruction_metrics(x, _fine_roundtrip(fine, x, n)[0]) for x in signals]
        table.append({
            "n_active": int(n),
            "bitrate_kbps": fc_bitrate(frame_rate=fine.cfg.frame_rate, n_q=n, codebook_size=fine.cfg.codebook_size),
            "mean_stft_distance": float(np.nanmean([p["stft_distance"] for p in per])),
            "mean_snr_db": float(np.mean([p["snr_db"] for p in per])),
            "stft_distance": [p["stft_distance"] for p in per],
        })
    return table
