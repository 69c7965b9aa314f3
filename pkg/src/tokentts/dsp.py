"""Audio I/O, segmentation, STFT features, synthetic corpora and text tokenization."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

SAMPLE_RATE = 16000
FRAME_LEN = 600  # product of the fine codec strides


class ShortWaveformError(ValueError):
    pass


class SplitOverlapError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("non-mono input")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.samples.copy())


@dataclass(frozen=True)
class STFTConfig:
    fft_size: int
    hop: int
    window: int

    def __post_init__(self):
        if min(self.fft_size, self.hop, self.window) <= 0:
            raise ValueError("STFT sizes must be positive")
        if not self.hop <= self.window <= self.fft_size:
            raise ValueError("need hop <= window <= fft_size")


DEFAULT_RESOLUTIONS = (
    STFTConfig(512, 128, 512),
    STFTConfig(1024, 256, 1024),
    STFTConfig(2048, 512, 2048),
)


# --------------------------------------------------------------------------- wav io


def load_waveform(path: str | Path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaled to [-1, 1).

    Files at any rate other than ``sample_rate`` are rejected; nothing is resampled.
    """
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise ValueError(f"unreadable file {path}: {exc}") from exc
    if n_channels != 1:
        raise ValueError("non-mono input")
    if width != 2:
        raise ValueError(f"unsupported sample width {8 * width} bits, expected 16-bit PCM")
    if rate != sample_rate:
        raise ValueError(f"unsupported sample rate {rate} Hz (expected {sample_rate}, no resampling)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32)
    return Waveform(pcm / 32768.0, rate)


def save_waveform(w: Waveform, path: str | Path) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------- segmentation


def pad_to_frames(samples: np.ndarray, frame_len: int = FRAME_LEN) -> tuple[np.ndarray, int]:
    """Right-pad with zeros to a positive multiple of ``frame_len``; returns (padded, original_len)."""
    n = len(samples)
    target = max(1, -(-n // frame_len)) * frame_len
    if target == n:
        return samples, n
    out = np.zeros(target, dtype=np.float32)
    out[:n] = samples
    return out, n


def segment_waveform(
    w: Waveform,
    segment_len: int,
    rng_seed: int,
    n_segments: int | None = None,
    frame_len: int = FRAME_LEN,
    align: int = 1,
) -> list[Waveform]:
    """Cut random fixed-length chunks out of ``w``.

    By default ``len(w) // segment_len`` chunks are drawn. Chunk starts are multiples of
    ``align`` drawn from ``numpy.random.default_rng(rng_seed)``, so the result is reproducible.
    """
    if segment_len <= 0 or segment_len % frame_len:
        raise ValueError(f"segment_len {segment_len} is not a positive multiple of the frame length {frame_len}")
    if len(w) < segment_len:
        raise ShortWaveformError(f"waveform has {len(w)} samples, shorter than segment_len {segment_len}")
    if n_segments is None:
        n_segments = len(w) // segment_len
    rng = np.random.default_rng(rng_seed)
    starts = align * rng.integers(0, (len(w) - segment_len) // align + 1, size=n_segments)
    return [Waveform(w.samples[s : s + segment_len].copy(), w.sample_rate) for s in starts]


# --------------------------------------------------------------------------- spectral features


def stft_magnitude(x: torch.Tensor | Waveform, cfg: STFTConfig) -> torch.Tensor:
    """Magnitude STFT without centre padding; returns ``(..., frames, fft_size // 2 + 1)``.

    A Hann window of ``cfg.window`` samples is centred inside each ``fft_size`` frame.
    """
    if isinstance(x, Waveform):
        x = x.tensor()
    if x.shape[-1] < cfg.fft_size:
        raise ShortWaveformError(f"input of {x.shape[-1]} samples is shorter than fft_size {cfg.fft_size}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    window = torch.hann_window(cfg.window, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        win_length=cfg.window,
        window=window,
        center=False,
        return_complex=True,
    )
    mag = spec.abs().transpose(-1, -2)
    return mag.reshape(*lead, *mag.shape[-2:])


def dominant_frequency(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, pad_factor: int = 8) -> float:
    """Frequency of the largest FFT magnitude (Hann-windowed, zero-padded, parabolic refinement)."""
    x = np.asarray(samples, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    nfft = 1 << int(np.ceil(np.log2(n * pad_factor)))
    mag = np.abs(np.fft.rfft(x * np.hanning(n), nfft))
    k = int(np.argmax(mag[1:])) + 1
    if 1 <= k < len(mag) - 1:
        a, b, c = np.log(mag[k - 1 : k + 2] + 1e-12)
        denom = a - 2 * b + c
        if denom != 0:
            k = k + 0.5 * (a - c) / denom
    return float(k * sample_rate / nfft)


def snr_db(reference: np.ndarray, estimate: np.ndarray, cap: float = 100.0) -> float:
    """10 log10 of reference power over error power, capped at ``cap`` dB."""
    ref = np.asarray(reference, dtype=np.float64)
    err = ref - np.asarray(estimate, dtype=np.float64)
    signal = float(np.sum(ref**2))
    noise = float(np.sum(err**2))
    if noise <= signal * 10 ** (-cap / 10):
        return cap
    if signal == 0.0:
        return -cap
    return float(10 * np.log10(signal / noise))


# --------------------------------------------------------------------------- tokenization


@dataclass
class Vocab:
    """Symbol table. Multi-character symbols are matched greedily, longest first."""

    table: dict[str, int]
    unk_id: int = 1
    pad_id: int = 0

    def __post_init__(self):
        ids = list(self.table.values())
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate token ids in vocab")
        if self.unk_id in ids or self.pad_id in ids:
            raise ValueError("vocab entries collide with reserved ids")
        self._inverse = {v: k for k, v in self.table.items()}
        self._max_len = max((len(k) for k in self.table), default=1)

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "Vocab":
        return cls({s: i + 2 for i, s in enumerate(symbols)})

    @property
    def size(self) -> int:
        return max([self.unk_id, self.pad_id, *self.table.values()]) + 1

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._inverse.get(int(i), "<unk>") for i in ids]

    def to_json(self) -> dict:
        return {"table": self.table, "unk_id": self.unk_id, "pad_id": self.pad_id}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(dict(d["table"]), d["unk_id"], d["pad_id"])


@dataclass
class PhonemeSequence:
    tokens: list[int]
    unknown_count: int = 0

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize_text(text: str, vocab: Vocab) -> PhonemeSequence:
    if not text:
        raise ValueError("empty text: a phoneme sequence needs at least one token")
    tokens, unknown, i = [], 0, 0
    while i < len(text):
        for n in range(min(vocab._max_len, len(text) - i), 0, -1):
            tok = vocab.table.get(text[i : i + n])
            if tok is not None:
                tokens.append(tok)
                i += n
                break
        else:
            tokens.append(vocab.unk_id)
            unknown += 1
            i += 1
    return PhonemeSequence(tokens, unknown)


# --------------------------------------------------------------------------- synthetic corpus


@dataclass
class SynthConfig:
    """Harmonic-tone corpus: each token is a pitch held for a fixed duration.

    Speaker ``s`` multiplies every token pitch by ``speaker_scales[s]``.
    """

    alphabet: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "A": (200.0, 0.15),
            "B": (240.0, 0.15),
            "C": (280.0, 0.1125),
            "D": (320.0, 0.15),
            "E": (360.0, 0.1125),
            "F": (400.0, 0.075),
        }
    )
    speaker_scales: list[float] = field(default_factory=lambda: [1.0, 1.5])
    utterances: int = 16
    eval_utterances: int = 4
    min_tokens: int = 2
    max_tokens: int = 4
    harmonics: list[float] = field(default_factory=lambda: [1.0, 0.35, 0.15])
    noise: float = 0.002
    sample_rate: int = SAMPLE_RATE
    peak: float = 0.95

    def validate(self) -> None:
        if not self.alphabet:
            raise ValueError("empty token alphabet")
        if len(self.speaker_scales) < 2:
            raise ValueError("synthetic corpus needs at least two speakers")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ValueError("bad token count range")


@dataclass
class ManifestEntry:
    id: str
    source: str | dict
    text: str
    speaker_id: int
    split: str

    def to_json(self) -> dict:
        return {"id": self.id, "source": self.source, "text": self.text, "speaker_id": self.speaker_id, "split": self.split}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    speakers: list[int]
    sample_rate: int = SAMPLE_RATE
    symbols: list[str] = field(default_factory=list)
    root: Path | None = None

    FORMAT = "tokentts-manifest"
    VERSION = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        declared = set(self.speakers)
        for e in self.entries:
            if e.speaker_id not in declared:
                raise ValueError(f"entry {e.id}: speaker {e.speaker_id} not in declared set {sorted(declared)}")
            if e.split not in ("train", "eval"):
                raise ValueError(f"entry {e.id}: unknown split {e.split!r}")
        overlap = {e.id for e in self.split("train")} & {e.id for e in self.split("eval")}
        overlap |= self._content_keys("train") & self._content_keys("eval")
        if overlap:
            raise SplitOverlapError(f"eval entries also present in train: {sorted(map(str, overlap))}")

    def _content_keys(self, split: str) -> set:
        return {json.dumps(e.source, sort_keys=True) for e in self.split(split)}

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def dumps(self) -> str:
        header = {
            "format": self.FORMAT,
            "version": self.VERSION,
            "sample_rate": self.sample_rate,
            "speakers": self.speakers,
            "symbols": self.symbols,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(e.to_json(), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.get("format") != cls.FORMAT:
            raise ValueError(f"{path} is not a manifest file")
        if header.get("version") != cls.VERSION:
            raise ValueError(f"unsupported manifest version {header.get('version')}")
        entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
        return cls(entries, header["speakers"], header["sample_rate"], header.get("symbols", []), path.parent)

    def vocab(self) -> Vocab:
        symbols = self.symbols or sorted({ch for e in self.entries for ch in e.text})
        return Vocab.from_symbols(symbols)

    def load_audio(self, entry: ManifestEntry) -> Waveform:
        if isinstance(entry.source, dict):
            return render_recipe(entry.source)
        path = Path(entry.source)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return load_waveform(path, self.sample_rate)


def make_recipe(cfg: SynthConfig, text: str, speaker_id: int, seed: int) -> dict:
    scale = cfg.speaker_scales[speaker_id]
    segments = []
    for ch in text:
        freq, dur = cfg.alphabet[ch]
        segments.append([ch, round(freq * scale, 6), int(round(dur * cfg.sample_rate))])
    return {
        "synth": {
            "seed": seed,
            "sample_rate": cfg.sample_rate,
            "segments": segments,
            "harmonics": list(cfg.harmonics),
            "noise": cfg.noise,
            "peak": cfg.peak,
        }
    }


def render_recipe(recipe: dict) -> Waveform:
    """Render a synthesis recipe to audio. Pure function of the recipe."""
    r = recipe["synth"]
    sr = r["sample_rate"]
    rng = np.random.default_rng(r["seed"])
    freqs = np.concatenate([np.full(n, f, dtype=np.float64) for _, f, n in r["segments"]])
    # phase-continuous across token boundaries
    phase = 2 * np.pi * np.cumsum(freqs) / sr + rng.uniform(0, 2 * np.pi)
    x = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(r["harmonics"]))
    x = x + r["noise"] * rng.standard_normal(len(x))
    x = x * (r["peak"] / max(np.max(np.abs(x)), 1e-9))
    return Waveform(x.astype(np.float32), sr)


def token_frequencies(recipe: dict) -> list[tuple[str, float, int]]:
    """(token, pitch_hz, n_samples) for each rendered segment."""
    return [(t, float(f), int(n)) for t, f, n in recipe["synth"]["segments"]]


def build_synthetic_dataset(cfg: SynthConfig, seed: int) -> DatasetManifest:
    """Draw ``cfg.utterances`` train and ``cfg.eval_utterances`` eval utterances.

    Speakers are assigned round-robin; every (text, speaker) pair is unique across both splits.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    symbols = list(cfg.alphabet)
    n_spk = len(cfg.speaker_scales)
    total = cfg.utterances + cfg.eval_utterances
    seen: set[tuple[str, int]] = set()
    entries = []
    attempts = 0
    while len(entries) < total:
        attempts += 1
        if attempts > 1000 * total:
            raise ValueError("alphabet too small to draw unique utterances")
        spk = len(entries) % n_spk
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        text = "".join(symbols[i] for i in rng.integers(0, len(symbols), size=n))
        if (text, spk) in seen:
            continue
        seen.add((text, spk))
        idx = len(entries)
        split = "train" if idx < cfg.utterances else "eval"
        utt_seed = int(rng.integers(0, 2**31 - 1))
        entries.append(ManifestEntry(f"{split}-{idx:04d}", make_recipe(cfg, text, spk, utt_seed), text, spk, split))
    return DatasetManifest(entries, list(range(n_spk)), cfg.sample_rate, symbols)
