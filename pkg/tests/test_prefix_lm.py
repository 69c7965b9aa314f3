import math

import pytest
import torch

from tokentts.prefix_lm import (
    IGNORE,
    LMConfig,
    PrefixLM,
    build_attention_mask,
    generate,
    lm_forward_loss,
    make_batch,
    nucleus_mask,
    full_lm_config,
    sequence_cross_entropy,
    top_p_sample,
)

TOY = LMConfig(speech_codebook_size=16, phoneme_vocab=10, speakers=2, width=32, heads=2, decoder_layers=4,
               phoneme_encoder_blocks=1, ff_mult=2, max_prefix=16, max_speech=32)


@pytest.fixture(scope="module")
def lm():
    torch.manual_seed(0)
    return PrefixLM(TOY).eval()


def _brute_mask(p, s):
    n = p + s
    rows = [[j < p or (i >= p and j <= i) for j in range(n)] for i in range(n)]
    return torch.tensor(rows, dtype=torch.bool).reshape(n, n)


@pytest.mark.parametrize("p", range(9))
def test_mask_matches_enumeration(p):
    for s in range(9):
        assert torch.equal(build_attention_mask(p, s), _brute_mask(p, s))


def test_mask_small_example():
    assert build_attention_mask(2, 2).int().tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]]
    with pytest.raises(ValueError):
        build_attention_mask(-1, 2)


def _inputs(tokens):
    ph = torch.tensor([[1, 2, 3, 4]])
    return ph, torch.tensor([4]), torch.tensor([0]), torch.tensor([tokens])


def test_causality_occlusion(lm):
    ph, pl, spk, speech = _inputs([TOY.bos, 3, 5, 7, 9, 11])
    base = lm(ph, pl, spk, speech)
    for t in range(1, speech.shape[1]):
        changed = speech.clone()
        changed[0, t] = (changed[0, t] + 1) % TOY.speech_codebook_size
        out = lm(ph, pl, spk, changed)
        assert torch.allclose(out[0, :t], base[0, :t], atol=1e-6)
        assert not torch.allclose(out[0, t:], base[0, t:], atol=1e-6)


def test_prefix_is_bidirectional(lm):
    # changing the last phoneme must affect the encoding of the first prefix positions
    ph, pl, spk, _ = _inputs([TOY.bos])
    a, _ = lm.encode_prefix(ph, pl, spk)
    other = ph.clone()
    other[0, -1] = 7
    b, _ = lm.encode_prefix(other, pl, spk)
    assert not torch.allclose(a[0, 1], b[0, 1], atol=1e-6)
    assert a.shape[1] == ph.shape[1] + 1


def test_padding_does_not_leak(lm):
    batch = make_batch([[1, 2, 3]], [1], [[4, 5, 6]], TOY.eos)
    logits, loss = lm_forward_loss(lm, batch)
    padded = make_batch([[1, 2, 3], [1, 2, 3, 4, 5, 6]], [1, 0], [[4, 5, 6], [1, 2, 3, 4, 5, 6, 7]], TOY.eos)
    garbage = padded.phonemes.clone()
    padded_logits, _ = lm_forward_loss(lm, padded)
    assert torch.allclose(padded_logits[0, :4], logits[0], atol=1e-5)
    garbage[0, 3:] = 9
    padded.phonemes = garbage
    again, _ = lm_forward_loss(lm, padded)
    assert torch.allclose(again[0, :4], logits[0], atol=1e-5)


def test_two_token_loss_oracle():
    logits = torch.tensor([[[2.0, 0.5, -1.0, 0.0], [0.3, 0.1, 1.5, -0.2], [9.0, 9.0, 9.0, 9.0]]], dtype=torch.float64)
    targets = torch.tensor([[0, 2, IGNORE]])
    ls = logits[0, :2].log_softmax(-1)
    oracle = -(ls[0, 0] + ls[1, 2]) / 2
    assert float(sequence_cross_entropy(logits, targets)) == pytest.approx(float(oracle), abs=1e-6)
    by_hand = -((2.0 - math.log(math.exp(2) + math.exp(0.5) + math.exp(-1) + 1))
                + (1.5 - math.log(math.exp(0.3) + math.exp(0.1) + math.exp(1.5) + math.exp(-0.2)))) / 2
    assert float(oracle) == pytest.approx(by_hand, abs=1e-12)


def test_uniform_logits_give_log_v():
    v = TOY.speech_vocab
    loss = sequence_cross_entropy(torch.zeros(3, 5, v, dtype=torch.float64), torch.randint(0, v, (3, 5)))
    assert float(loss) == pytest.approx(math.log(v), abs=1e-6)


def test_model_loss_matches_manual(lm):
    batch = make_batch([[1, 2], [3]], [0, 1], [[4], [5, 6]], TOY.eos)
    assert batch.targets.tolist() == [[4, TOY.eos, IGNORE], [5, 6, TOY.eos]]
    logits, loss = lm_forward_loss(lm, batch)
    ls = logits.log_softmax(-1)
    terms = [ls[0, 0, 4], ls[0, 1, TOY.eos], ls[1, 0, 5], ls[1, 1, 6], ls[1, 2, TOY.eos]]
    assert loss.item() == pytest.approx((-sum(terms) / 5).item(), abs=1e-6)


def test_nucleus_set():
    probs = torch.tensor([0.5, 0.3, 0.2])
    assert nucleus_mask(probs, 0.7).tolist() == [True, True, False]
    assert nucleus_mask(probs, 0.5).tolist() == [True, False, False]
    assert nucleus_mask(probs, 1.0).all()
    assert nucleus_mask(torch.tensor([0.2, 0.5, 0.3]), 0.01).tolist() == [False, True, False]
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            nucleus_mask(probs, bad)


def test_top_p_frequencies():
    logits = torch.tensor([0.5, 0.3, 0.2]).log().expand(10_000, 3)
    tokens, keep = top_p_sample(logits, 0.7, generator=torch.Generator().manual_seed(0))
    assert keep[torch.arange(10_000), tokens].all()
    freq = torch.bincount(tokens, minlength=3).double() / 10_000
    assert freq[2] == 0
    assert float(freq[0]) == pytest.approx(0.625, abs=0.02)
    assert float(freq[1]) == pytest.approx(0.375, abs=0.02)
    full, _ = top_p_sample(logits, 1.0, generator=torch.Generator().manual_seed(1))
    freq = torch.bincount(full, minlength=3).double() / 10_000
    assert torch.allclose(freq, torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64), atol=0.02)


def test_top_p_to_zero_is_greedy(lm):
    logits = torch.randn(50, 20)
    tokens, _ = top_p_sample(logits, 1e-9, generator=torch.Generator().manual_seed(0))
    assert torch.equal(tokens, logits.argmax(-1))
    a = generate(lm, [1, 2, 3], 0, top_p=1e-9, max_len=6, seed=5)
    b = generate(lm, [1, 2, 3], 0, greedy=True, max_len=6)
    assert torch.equal(a.tokens, b.tokens)
    with pytest.raises(ValueError):
        top_p_sample(logits, 0.9, temperature=0.0)


def test_generation_contract(lm):
    res = generate(lm, [1, 2, 3], 1, top_p=0.9, max_len=5, seed=3)
    assert len(res.tokens) <= 5 and len(res.nucleus_sizes) >= len(res.tokens)
    assert bool((res.tokens < TOY.speech_codebook_size).all())
    assert res.truncated == (len(res.tokens) == 5)
    again = generate(lm, [1, 2, 3], 1, top_p=0.9, max_len=5, seed=3)
    assert torch.equal(res.tokens, again.tokens)
    assert lm.training is False


def test_truncation_flag():
    torch.manual_seed(0)
    model = PrefixLM(TOY).eval()
    with torch.no_grad():
        model.head.bias[TOY.eos] = -1e4
    res = generate(model, [1, 2], 0, greedy=True, max_len=4)
    assert res.truncated and len(res.tokens) == 4
    with torch.no_grad():
        model.head.bias[TOY.eos] = 1e4
    res = generate(model, [1, 2], 0, greedy=True, max_len=4)
    assert not res.truncated and len(res.tokens) == 0


def test_unknown_speaker_and_phoneme(lm):
    with pytest.raises(ValueError, match="speaker"):
        generate(lm, [1, 2], 5)
    with pytest.raises(ValueError, match="phoneme"):
        generate(lm, [1, 99], 0)


def test_config_guards():
    with pytest.raises(ValueError):
        LMConfig(speech_codebook_size=1)
    full = full_lm_config()
    assert full.speech_vocab == 1026 and full.decoder_layers == 16
