import math

import numpy as np
import pytest

from tempkg.corpus import MaskedSample, build_vocab, tokenize
from tempkg.encoder import (PAPER_PRETRAIN, EncoderConfig, PretrainHyper, SequenceTooLong,
                            TrainingDiverged, encode, encode_cls, grad_check, init_encoder,
                            mlm_forward_backward, positional_encoding, pretrain,
                            tensor_shapes)
from tempkg.sentences import SentenceConfig, TemplateTable, build_bundle

from conftest import random_tkg


def small(seed=0, vocab=12, d=4, layers=1, scale=0.5):
    return init_encoder(EncoderConfig(vocab, d_model=d, n_layers=layers, max_positions=16,
                                      init_scale=scale, rng_seed=seed))


def sample_for(vocab, q, rng, k=3):
    ids = rng.integers(5, vocab, size=q)
    pos = np.sort(rng.choice(q, size=k, replace=False))
    return MaskedSample(np.where(np.isin(np.arange(q), pos), 3, ids), pos, ids[pos].copy())


def test_init_is_deterministic_and_shaped():
    a, b = small(1), small(1)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    assert small(0, vocab=10, d=4)["embed"].size == 40
    z = small(scale=0.0)
    assert all(not v.any() for v in z.tensors.values())
    assert set(a.tensors) == set(tensor_shapes(a.config))
    with pytest.raises(ValueError):
        EncoderConfig(10, d_model=5)


def test_zero_params_give_position_table():
    p = small(scale=0.0, d=6)
    hs = encode(p, [5, 6, 7])
    assert np.allclose(hs.H, positional_encoding(3, 6))


def test_single_token_attention_and_cls():
    hs = encode(small(), [7])
    assert np.allclose(hs.attention[0], [[1.0]])
    assert np.array_equal(hs.cls, hs.H[0])


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = small(layers=2, scale=1.0)
    for _ in range(20):
        hs = encode(p, rng.integers(0, 12, size=rng.integers(1, 16)))
        for a in hs.attention:
            assert np.allclose(a.sum(axis=1), 1.0, atol=1e-9)


def test_permutation_changes_output():
    p = small(scale=1.0)
    toks = [5, 6, 7, 8, 9]
    assert not np.allclose(encode(p, toks).H, encode(p, toks[::-1]).H[::-1])


def test_too_long_and_purity():
    p = small()
    with pytest.raises(SequenceTooLong):
        encode(p, list(range(12)) + [0] * 5)
    a = encode(p, [5, 6]).H
    encode(p, [9, 9, 9])
    assert np.array_equal(a, encode(p, [5, 6]).H)


def test_padding_does_not_leak():
    p = small(scale=1.0)
    seqs = [np.array([5, 6, 7]), np.array([8, 9, 10, 11, 5, 6])]
    batched = encode_cls(p, seqs)
    assert np.allclose(batched[0], encode(p, seqs[0]).cls)
    assert np.allclose(batched[1], encode(p, seqs[1]).cls)


def test_uniform_logits_give_log_vocab():
    p = small(scale=0.0)
    s = sample_for(12, 6, np.random.default_rng(0))
    loss, _ = mlm_forward_backward(p, s)
    assert math.isclose(loss, math.log(12), rel_tol=1e-12)


def test_confident_prediction_gives_near_zero_loss():
    p = small(scale=0.0)
    s = sample_for(12, 4, np.random.default_rng(0), k=1)
    p["mlm_bias"][s.labels[0]] = 60.0
    assert mlm_forward_backward(p, s)[0] < 1e-20


def test_no_positions_is_an_error():
    p = small()
    with pytest.raises(ValueError):
        mlm_forward_backward(p, MaskedSample(np.array([5, 6]), np.array([], dtype=int),
                                             np.array([], dtype=int)))


def test_weight_tying():
    p = small(scale=1.0)
    s = sample_for(12, 5, np.random.default_rng(2))
    before = mlm_forward_backward(p, s)[0]
    p["embed"][s.labels] *= 3.0  # the output layer reads the same matrix
    assert mlm_forward_backward(p, s)[0] != before


@pytest.mark.parametrize("seed", range(5))
def test_mlm_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = small(seed, vocab=9, d=4, layers=1 + seed % 2, scale=0.7)
    s = sample_for(9, int(rng.integers(3, 7)), rng, k=2)
    assert grad_check(p, s) < 1e-4


def test_grad_check_catches_a_corrupted_gradient():
    p = small(3, vocab=9, scale=0.7)
    s = sample_for(9, 5, np.random.default_rng(3))
    _, g = mlm_forward_backward(p, s)
    g["embed"] = g["embed"] * 2.0
    assert grad_check(p, s, grads=g) > 1e-2
    assert np.isfinite(grad_check(small(scale=0.0), s))


def toy_corpus(n_edges=60, seed=0):
    g = random_tkg(seed, num_edges=n_edges)
    v = build_vocab(g, TemplateTable())
    sents = []
    for q in g.edges:
        b = build_bundle(g, q, 4, TemplateTable(), SentenceConfig(walks=16),
                         np.random.default_rng(seed))
        sents += [tokenize(s, v) for s in b.sentences]
    return v, sents


@pytest.mark.parametrize("seed", range(2))
def test_pretraining_lowers_the_loss(seed):
    v, corpus = toy_corpus(seed=seed)
    assert len(corpus) >= 200
    p = init_encoder(EncoderConfig(len(v), d_model=16, init_scale=0.1, rng_seed=seed))
    hist = pretrain(corpus[:200], p, v, PretrainHyper(lr=3e-3, epochs=10, batch=16, seed=seed))
    assert len(hist) == 10 and hist[-1] < hist[0]


def test_zero_epochs_leave_params_untouched():
    v, corpus = toy_corpus()
    p = init_encoder(EncoderConfig(len(v), d_model=8))
    before = {k: a.copy() for k, a in p.tensors.items()}
    assert pretrain(corpus, p, v, PretrainHyper(epochs=0)) == []
    assert all(np.array_equal(before[k], p[k]) for k in before)
    with pytest.raises(ValueError):
        pretrain([], p, v, PretrainHyper())


def test_divergence_is_reported():
    v, corpus = toy_corpus()
    p = init_encoder(EncoderConfig(len(v), d_model=8))
    p["embed"][:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        pretrain(corpus[:20], p, v, PretrainHyper(epochs=1))


def test_paper_preset_is_recorded():
    assert (PAPER_PRETRAIN.lr, PAPER_PRETRAIN.batch, PAPER_PRETRAIN.accumulation) == (5e-4, 8, 32)
