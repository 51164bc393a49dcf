import math

import numpy as np
import pytest

from vtprune.attention import (
    Modality,
    ModelConfig,
    TokenSequence,
    attention_layer,
    build_model,
    decoder_forward,
    encoder_forward,
)
from vtprune.errors import LayoutError, ShapeError
from vtprune.linalg import make_rng, rand_matrix

from conftest import make_sequence


def naive_attention(x, params, causal):
    """Per-head, per-query loop in float64."""
    x = x.astype(np.float64)
    q, k, v = x @ params.wq, x @ params.wk, x @ params.wv
    n, d_model = x.shape
    d = d_model // params.heads
    mixed = np.zeros_like(x)
    weights = np.zeros((params.heads, n, n))
    for h in range(params.heads):
        cols = slice(h * d, (h + 1) * d)
        for i in range(n):
            keys = range(i + 1) if causal else range(n)
            logits = [float(q[i, cols] @ k[j, cols]) / math.sqrt(d) for j in keys]
            top = max(logits)
            exps = [math.exp(z - top) for z in logits]
            total = sum(exps)
            for j, e in zip(keys, exps):
                weights[h, i, j] = e / total
                mixed[i, cols] += (e / total) * v[j, cols]
    out = x + mixed @ params.wo
    if params.w1 is not None:
        out = out + np.maximum(out @ params.w1, 0) @ params.w2
    return out, weights


def visual_sequence(n, hidden, seed=0):
    emb = rand_matrix(make_rng(seed), n, hidden, 1.0)
    return TokenSequence(emb, np.full(n, Modality.VISUAL), np.arange(n))


def test_single_token_causal(backend, small_cfg):
    params = build_model(small_cfg).decoder[0]
    _, attn = attention_layer(visual_sequence(1, 32), params, causal=True)
    assert attn.weights.shape == (4, 1, 1)
    np.testing.assert_array_equal(attn.weights[:, 0, 0], 1.0)


def test_causal_upper_triangle_zero(backend, small_cfg):
    params = build_model(small_cfg).decoder[0]
    _, attn = attention_layer(visual_sequence(4, 32), params, causal=True)
    upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
    for h in range(attn.heads):
        assert np.all(attn.weights[h][upper] == 0.0)


@pytest.mark.parametrize("causal", [False, True])
def test_layer_matches_naive_oracle(backend, small_cfg, causal):
    params = build_model(small_cfg).encoder[0]
    seq = visual_sequence(9, 32, seed=3)
    out, attn = attention_layer(seq, params, causal)
    ref_out, ref_w = naive_attention(seq.embeddings, params, causal)
    np.testing.assert_allclose(out.embeddings, ref_out, atol=1e-5)
    np.testing.assert_allclose(attn.weights, ref_w, atol=1e-6)
    d = 32 // 4
    for h in range(4):
        np.testing.assert_allclose(attn.key_vectors[h], (seq.embeddings.astype(np.float64) @ params.wk)[:, h * d:(h + 1) * d], atol=1e-6)


def test_layer_rejects_wrong_hidden(small_cfg):
    params = build_model(small_cfg).encoder[0]
    with pytest.raises(ShapeError):
        attention_layer(visual_sequence(3, 16), params, causal=False)


def test_config_hidden_divisible_by_heads():
    with pytest.raises(ShapeError):
        ModelConfig(hidden_dim=30, heads=4)


def test_encoder_with_cls_shapes(backend):
    cfg = ModelConfig(hidden_dim=32, heads=4, encoder_layers=3, decoder_layers=2)
    out, tensors = encoder_forward(visual_sequence(16, 32), cfg)
    assert len(tensors) == 3
    for t in tensors:
        assert t.weights.shape == (4, 17, 17)
        assert t.key_vectors.shape == (4, 17, 8)
    assert out.modality[0] == Modality.CLS and out.orig_pos[0] == -1
    assert len(out.visual_rows) == 16


def test_encoder_without_cls(backend):
    cfg = ModelConfig(hidden_dim=32, heads=4, encoder_layers=1, has_cls=False)
    out, tensors = encoder_forward(visual_sequence(16, 32), cfg)
    assert tensors[0].weights.shape == (4, 16, 16)
    assert not np.any(out.modality == Modality.CLS)


def test_encoder_deterministic(small_cfg):
    seq = visual_sequence(16, 32)
    a, ta = encoder_forward(seq, small_cfg)
    b, tb = encoder_forward(seq, ModelConfig(**vars(small_cfg)))
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert all(x.weights.tobytes() == y.weights.tobytes() for x, y in zip(ta, tb))


def test_encoder_is_bidirectional(small_cfg):
    _, tensors = encoder_forward(visual_sequence(6, 32), small_cfg)
    assert np.all(tensors[0].weights > 0)


def test_encoder_permutation_equivariance(backend):
    cfg = ModelConfig(hidden_dim=32, heads=4, encoder_layers=2, has_cls=True, positional=False, seed=2)
    seq = visual_sequence(8, 32, seed=4)
    perm = np.arange(8)
    perm[[2, 5]] = perm[[5, 2]]
    swapped = seq.replace(embeddings=seq.embeddings[perm])
    a, _ = encoder_forward(seq, cfg)
    b, _ = encoder_forward(swapped, cfg)
    np.testing.assert_allclose(b.embeddings[1:], a.embeddings[1:][perm], atol=1e-5)
    np.testing.assert_allclose(b.embeddings[0], a.embeddings[0], atol=1e-5)


def test_encoder_rejects_text():
    seq = make_sequence(ModelConfig(hidden_dim=32), n_visual=4)
    with pytest.raises(LayoutError):
        encoder_forward(seq, ModelConfig(hidden_dim=32))


def test_decoder_causal_pattern_every_layer(backend, small_cfg):
    seq = make_sequence(small_cfg)
    _, tensors = decoder_forward(seq, small_cfg)
    assert len(tensors) == small_cfg.decoder_layers
    upper = np.triu(np.ones((len(seq), len(seq)), dtype=bool), k=1)
    for t in tensors:
        assert t.causal
        assert np.all(t.weights[:, upper] == 0.0)
        np.testing.assert_allclose(t.weights.sum(axis=2, dtype=np.float64), 1.0, atol=1e-6)


def test_decoder_upto_zero_is_identity(small_cfg):
    seq = make_sequence(small_cfg)
    out, tensors = decoder_forward(seq, small_cfg, upto_layer=0)
    assert out is seq and tensors == []


def test_staged_equals_monolithic(backend, small_cfg):
    seq = make_sequence(small_cfg)
    full, full_t = decoder_forward(seq, small_cfg)
    mid, first = decoder_forward(seq, small_cfg, upto_layer=2)
    end, rest = decoder_forward(mid, small_cfg, start_layer=2)
    np.testing.assert_allclose(end.embeddings, full.embeddings, atol=1e-6)
    assert len(first) + len(rest) == len(full_t)


def test_decoder_rejects_bad_layout(small_cfg):
    seq = make_sequence(small_cfg)
    mod = seq.modality.copy()
    mod[0] = Modality.TEXT_INSTR
    with pytest.raises(LayoutError):
        decoder_forward(seq.replace(modality=mod), small_cfg)


def test_decoder_rejects_layer_overflow(small_cfg):
    with pytest.raises(ShapeError):
        decoder_forward(make_sequence(small_cfg), small_cfg, upto_layer=99)


def test_visual_rows_ignore_instruction_content(backend, small_cfg):
    seq = make_sequence(small_cfg)
    emb = seq.embeddings.copy()
    instr = seq.rows(Modality.TEXT_INSTR)
    emb[instr] = rand_matrix(make_rng(99), len(instr), 32, 3.0)
    other = seq.replace(embeddings=emb)
    a, ta = decoder_forward(seq, small_cfg)
    b, tb = decoder_forward(other, small_cfg)
    vis = seq.visual_rows
    upto = vis.max() + 1
    assert a.embeddings[:upto].tobytes() == b.embeddings[:upto].tobytes()
    for x, y in zip(ta, tb):
        assert x.weights[:, vis].tobytes() == y.weights[:, vis].tobytes()
        assert not np.array_equal(x.weights[:, instr], y.weights[:, instr])


def test_token_sequence_invariants():
    with pytest.raises(LayoutError):
        TokenSequence(np.zeros((2, 4)), [1, 1], [1, 0])
    with pytest.raises(ShapeError):
        TokenSequence(np.zeros((2, 4)), [1], [0, 1])
