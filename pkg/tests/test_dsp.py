import json
import wave

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tokentts.dsp import (
    FRAME_LEN,
    DatasetManifest,
    ManifestEntry,
    ShortWaveformError,
    SplitOverlapError,
    STFTConfig,
    SynthConfig,
    Vocab,
    Waveform,
    build_synthetic_dataset,
    dominant_frequency,
    load_waveform,
    pad_to_frames,
    render_recipe,
    save_waveform,
    segment_waveform,
    snr_db,
    stft_magnitude,
    token_frequencies,
    tokenize_text,
)


def _write_pcm(path, pcm, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(np.asarray(pcm, dtype="<i2").tobytes() if width == 2 else bytes(pcm))


def test_load_silence(tmp_path):
    _write_pcm(tmp_path / "s.wav", np.zeros(16000))
    w = load_waveform(tmp_path / "s.wav")
    assert len(w) == 16000 and w.sample_rate == 16000
    assert not w.samples.any()


def test_load_full_scale(tmp_path):
    _write_pcm(tmp_path / "f.wav", [32767, -32768])
    w = load_waveform(tmp_path / "f.wav")
    assert w.samples[0] == pytest.approx(32767 / 32768)
    assert w.samples[1] == -1.0


def test_load_rejects_stereo(tmp_path):
    _write_pcm(tmp_path / "st.wav", np.zeros(200), channels=2)
    with pytest.raises(ValueError, match="non-mono input"):
        load_waveform(tmp_path / "st.wav")


def test_load_rejects_other_rate(tmp_path):
    _write_pcm(tmp_path / "r.wav", np.zeros(100), rate=22050)
    with pytest.raises(ValueError, match="sample rate"):
        load_waveform(tmp_path / "r.wav")


def test_load_rejects_8bit_and_garbage(tmp_path):
    _write_pcm(tmp_path / "b.wav", bytes(100), width=1)
    with pytest.raises(ValueError):
        load_waveform(tmp_path / "b.wav")
    (tmp_path / "g.wav").write_bytes(b"not a wav")
    with pytest.raises(ValueError, match="unreadable"):
        load_waveform(tmp_path / "g.wav")


def test_save_load_roundtrip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 999).astype(np.float32)
    save_waveform(Waveform(x), tmp_path / "x.wav")
    y = load_waveform(tmp_path / "x.wav").samples
    assert np.max(np.abs(x - y)) <= 1 / 32768 + 1e-7


def test_waveform_rejects_2d():
    with pytest.raises(ValueError, match="non-mono"):
        Waveform(np.zeros((2, 10)))


def test_segment_lengths_and_determinism():
    w = Waveform(np.random.default_rng(1).standard_normal(48000).astype(np.float32))
    a = segment_waveform(w, 24000, rng_seed=7)
    b = segment_waveform(w, 24000, rng_seed=7)
    assert len(a) == 2
    assert all(len(s) == 24000 and len(s) // FRAME_LEN == 40 for s in a)
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))


def test_segment_exact_length_and_alignment():
    x = np.arange(3600, dtype=np.float32)
    (only,) = segment_waveform(Waveform(x), 3600, rng_seed=0)
    assert np.array_equal(only.samples, x)
    long = Waveform(np.arange(12000, dtype=np.float32))
    for s in segment_waveform(long, 1200, rng_seed=3, n_segments=20, align=FRAME_LEN):
        assert s.samples[0] % FRAME_LEN == 0


def test_segment_errors():
    w = Waveform(np.zeros(6000))
    with pytest.raises(ValueError, match="multiple"):
        segment_waveform(w, 601, 0)
    with pytest.raises(ShortWaveformError):
        segment_waveform(w, 6600, 0)


@given(st.integers(1, 5000))
def test_pad_to_frames(n):
    x, orig = pad_to_frames(np.ones(n, dtype=np.float32))
    assert orig == n and len(x) % FRAME_LEN == 0 and len(x) - n < FRAME_LEN
    assert x[:n].all() and not x[n:].any()


def test_stft_config_validation():
    with pytest.raises(ValueError):
        STFTConfig(512, 600, 512)
    with pytest.raises(ValueError):
        STFTConfig(512, 128, 1024)


def test_stft_zero_and_shape():
    cfg = STFTConfig(512, 128, 512)
    mag = stft_magnitude(torch.zeros(2048), cfg)
    assert mag.shape == (1 + (2048 - 512) // 128, 257)
    assert not mag.any()
    with pytest.raises(ShortWaveformError):
        stft_magnitude(torch.zeros(100), cfg)


def test_stft_bin_centred_sine():
    cfg = STFTConfig(512, 128, 512)
    k = 37
    t = torch.arange(4096, dtype=torch.float64)
    mag = stft_magnitude(torch.sin(2 * torch.pi * k * t / 512), cfg)
    assert (mag.argmax(-1) == k).all()


def test_stft_parseval():
    # sum_k |X_k|^2 over the full spectrum equals fft_size * sum_n (w_n x_n)^2 per frame
    cfg = STFTConfig(512, 128, 512)
    x = torch.randn(4096, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    mag = stft_magnitude(x, cfg)
    full = mag.pow(2).sum(-1) * 2 - mag[:, 0].pow(2) - mag[:, -1].pow(2)
    win = torch.hann_window(512, dtype=torch.float64)
    frames = x.unfold(0, 512, 128)
    energy = cfg.fft_size * (frames * win).pow(2).sum(-1)
    assert torch.allclose(full, energy, rtol=1e-3)


def test_dominant_frequency_and_snr():
    t = np.arange(2400) / 16000
    assert dominant_frequency(np.sin(2 * np.pi * 217.0 * t)) == pytest.approx(217.0, abs=1.0)
    x = np.random.default_rng(0).standard_normal(1000)
    assert snr_db(x, x) == 100.0
    assert snr_db(x, 0.9 * x) == pytest.approx(20.0)


def test_tokenize():
    vocab = Vocab({"A": 3, "B": 4})
    assert tokenize_text("AB", vocab).tokens == [3, 4]
    seq = tokenize_text("AXB", vocab)
    assert seq.tokens == [3, vocab.unk_id, 4] and seq.unknown_count == 1
    with pytest.raises(ValueError):
        tokenize_text("", vocab)


def test_tokenize_longest_match_and_roundtrip():
    vocab = Vocab.from_symbols(["a", "ab", "b"])
    seq = tokenize_text("aba", vocab)
    assert vocab.decode(seq.tokens) == ["ab", "a"]
    again = Vocab.from_json(json.loads(json.dumps(vocab.to_json())))
    assert again.table == vocab.table and again.size == vocab.size


def test_vocab_reserved_ids():
    with pytest.raises(ValueError):
        Vocab({"A": 1})


def test_synthetic_dataset_contract():
    cfg = SynthConfig(utterances=8, eval_utterances=2)
    m = build_synthetic_dataset(cfg, seed=0)
    assert len(m.split("train")) == 8 and len(m.split("eval")) == 2
    assert {e.speaker_id for e in m.entries} == {0, 1}
    assert len({(e.text, e.speaker_id) for e in m.entries}) == 10
    assert m.dumps() == build_synthetic_dataset(cfg, seed=0).dumps()
    assert m.dumps() != build_synthetic_dataset(cfg, seed=1).dumps()


def test_synthetic_errors():
    with pytest.raises(ValueError):
        build_synthetic_dataset(SynthConfig(alphabet={}), 0)
    with pytest.raises(ValueError):
        build_synthetic_dataset(SynthConfig(speaker_scales=[1.0]), 0)


def test_render_is_pure_and_frame_aligned():
    m = build_synthetic_dataset(SynthConfig(), seed=3)
    e = m.entries[0]
    a, b = render_recipe(e.source), render_recipe(e.source)
    assert np.array_equal(a.samples, b.samples)
    assert len(a) % FRAME_LEN == 0
    assert np.max(np.abs(a.samples)) == pytest.approx(0.95, abs=1e-6)


def test_token_a_peak():
    cfg = SynthConfig()
    m = build_synthetic_dataset(cfg, seed=0)
    from tokentts.dsp import make_recipe

    w = render_recipe(make_recipe(cfg, "A", 0, seed=5))
    assert dominant_frequency(w.samples) == pytest.approx(200.0, abs=2.0)
    for e in m.entries[:4]:
        w = m.load_audio(e)
        start = 0
        for _, freq, n in token_frequencies(e.source):
            seg = w.samples[start + n // 4 : start + 3 * n // 4]
            assert dominant_frequency(seg) == pytest.approx(freq, abs=5.0)
            start += n


def test_manifest_roundtrip_and_validation(tmp_path):
    m = build_synthetic_dataset(SynthConfig(), seed=0)
    m.save(tmp_path / "m.jsonl")
    again = DatasetManifest.load(tmp_path / "m.jsonl")
    assert again.dumps() == m.dumps()
    assert again.vocab().table == m.vocab().table

    e = m.entries[0]
    with pytest.raises(ValueError, match="speaker"):
        DatasetManifest([ManifestEntry("x", e.source, e.text, 5, "train")], [0, 1])
    leak = [ManifestEntry("a", e.source, e.text, 0, "train"), ManifestEntry("b", e.source, e.text, 0, "eval")]
    with pytest.raises(SplitOverlapError):
        DatasetManifest(leak, [0, 1])


def test_manifest_wav_sources(tmp_path):
    x = np.zeros(1200, dtype=np.float32)
    save_waveform(Waveform(x), tmp_path / "a.wav")
    m = DatasetManifest([ManifestEntry("a", "a.wav", "A", 0, "train")], [0], symbols=["A"])
    m.save(tmp_path / "m.jsonl")
    loaded = DatasetManifest.load(tmp_path / "m.jsonl")
    assert len(loaded.load_audio(loaded.entries[0])) == 1200


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_segments_reproducible(seed):
    w = Waveform(np.random.default_rng(0).standard_normal(9000).astype(np.float32))
    a = segment_waveform(w, 1800, seed)
    b = segment_waveform(w, 1800, seed)
    assert [s.samples.tobytes() for s in a] == [s.samples.tobytes() for s in b]
