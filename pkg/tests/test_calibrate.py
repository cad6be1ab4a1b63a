import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rampkit import calibrate
from rampkit.calibrate import (CalibrationStats, EmbeddingContext, LayerStats, build_embedding, collect_act_scales,
                               model_embeddings, standardize)
from rampkit.errors import ValidationError
from rampkit.tinylm import LayerRecord, TinyModelSpec, generate_model, quantizable_layers, rmsnorm


def record(kind="o_proj", n_in=64, n_out=64, scale=0.01, seed=0):
    w = np.random.default_rng(seed).normal(0, scale, size=(n_out, n_in))
    return LayerRecord(f"blocks.0.{kind}", kind, 0, n_in, n_out, w)


def stats_for(rec, value=1e-3):
    return CalibrationStats({rec.name: LayerStats(np.full(rec.in_features, value), 1)})


def test_act_scales_equal_hand_recorded_inputs():
    spec = TinyModelSpec(vocab_size=8, d_model=8, n_heads=2, n_blocks=1, d_ff=8, max_seq_len=8, seed=0)
    model = generate_model(spec)
    model.tok_emb = (np.eye(8) * np.arange(1, 9)[:, None]).astype(np.float32)
    model.pos_emb[:] = 0
    seq = [2, 5, 7]
    stats = collect_act_scales(model, [seq])
    x = model.tok_emb[seq].astype(np.float64)
    expected = np.abs(rmsnorm(x, model.blocks[0].norm_in.astype(np.float64))).max(axis=0)
    np.testing.assert_allclose(stats["blocks.0.q_proj"].act_scales, expected, rtol=1e-12)
    assert stats["blocks.0.q_proj"].sequences_seen == 1


def test_more_sequences_never_lower_scales(small_model, small_corpus):
    few = collect_act_scales(small_model, small_corpus.calibration, 2)
    many = collect_act_scales(small_model, small_corpus.calibration, 4)
    for name in few:
        assert np.all(many[name].act_scales >= few[name].act_scales)


def test_halves_merge_to_full(small_model, small_corpus):
    seqs = small_corpus.calibration
    full = collect_act_scales(small_model, seqs)
    merged = collect_act_scales(small_model, seqs[:2]).merge(collect_act_scales(small_model, seqs[2:]))
    for name in full:
        np.testing.assert_array_equal(full[name].act_scales, merged[name].act_scales)
        assert merged[name].sequences_seen == len(seqs)


def test_collect_rejects_empty(small_model):
    with pytest.raises(ValidationError):
        collect_act_scales(small_model, [])
    with pytest.raises(ValidationError):
        collect_act_scales(small_model, [[1, 2]], 0)


def test_stats_cover_all_layers(small_model, small_stats):
    for l in quantizable_layers(small_model):
        assert small_stats[l.name].act_scales.shape == (l.in_features,)
        assert np.all(small_stats[l.name].act_scales >= 0)
        s = small_stats[l.name]
        assert s.mean_act_scale == pytest.approx(np.mean(s.act_scales))


def test_depth_endpoints():
    rec = record()
    st_ = stats_for(rec)
    assert build_embedding(rec, st_, EmbeddingContext(None, 0.0, 0, 12))[0] == 0.0
    assert build_embedding(rec, st_, EmbeddingContext(None, 0.0, 11, 12))[0] == 1.0
    assert build_embedding(rec, st_, EmbeddingContext(None, 0.0, 0, 1))[0] == 0.0


def test_log_dims():
    rec = record(n_in=4096, n_out=32)
    e = build_embedding(rec, stats_for(rec), EmbeddingContext(None, 0.0, 0, 2))
    assert e[1] == 8.0
    assert e[2] == 1.0


@pytest.mark.parametrize("kind,value", [("q_proj", 0.0), ("k_proj", 0.0), ("v_proj", 0.0), ("o_proj", 0.25),
                                        ("gate_proj", 0.5), ("up_proj", 0.6), ("down_proj", 0.75),
                                        ("lm_head", 1.0)])
def test_kind_scalar(kind, value):
    rec = record(kind)
    assert build_embedding(rec, stats_for(rec), EmbeddingContext(None, 0.0, 0, 2))[5] == value


def test_position_category():
    assert [calibrate.position_category(i, 21) for i in (0, 1, 2, 10, 18, 19, 20)] == \
        [0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 1.0]


def test_context_dims():
    rec = record()
    e = build_embedding(rec, stats_for(rec), EmbeddingContext(4, 3.5, 3, 6))
    assert e[9] == 0.5
    assert e[10] == 3.5 / 8
    first = build_embedding(rec, stats_for(rec), EmbeddingContext(None, 0.0, 0, 6))
    assert first[9] == 0.0


def test_weight_and_activation_dims():
    rec = record(scale=0.01, seed=2)
    acts = np.linspace(0, 4e-4, rec.in_features)
    st_ = CalibrationStats({rec.name: LayerStats(acts, 1)})
    e = build_embedding(rec, st_, EmbeddingContext(None, 0.0, 0, 2))
    assert e[3] == pytest.approx(rec.weights.std() * 10)
    assert e[4] == pytest.approx(np.abs(rec.weights).mean() * 10)
    assert e[7] == pytest.approx(acts.mean() * 100)
    assert e[8] == pytest.approx(0.4)


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(1e-6, 1e3), act=st.floats(0, 1e4), idx=st.integers(0, 9))
def test_clamped_dims_within_unit_interval(scale, act, idx):
    rec = record(scale=scale)
    e = build_embedding(rec, stats_for(rec, act), EmbeddingContext(5, 4.0, idx, 10))
    for d in (0, 3, 4, 5, 6, 7, 8, 9, 10):
        assert 0.0 <= e[d] <= 1.0
    assert e[1] >= 0 and e[2] >= 0


def test_build_embedding_requires_stats_and_index():
    rec = record()
    with pytest.raises(ValidationError):
        build_embedding(rec, CalibrationStats(), EmbeddingContext(None, 0.0, 0, 2))
    with pytest.raises(ValidationError):
        build_embedding(rec, stats_for(rec), EmbeddingContext(None, 0.0, 2, 2))


def test_standardize_centres_each_dimension(rng):
    emb = rng.normal(size=(2, 11))
    std, _, _ = standardize(emb)
    np.testing.assert_allclose(std.mean(axis=0), 0, atol=1e-9)


def test_standardize_constant_dimension_maps_to_zero(rng):
    emb = rng.normal(size=(5, 11))
    emb[:, 4] = 0.3
    std, _, sigma = standardize(emb)
    assert sigma[4] == 0
    assert np.all(std[:, 4] == 0)


def test_standardize_matches_two_pass(small_model, small_stats):
    emb = model_embeddings(small_model, small_stats)
    assert emb.shape == (14, 11)
    std, mu, sigma = standardize(emb)
    n = emb.shape[0]
    for d in range(11):
        m = sum(emb[:, d]) / n
        s = (sum((v - m) ** 2 for v in emb[:, d]) / n) ** 0.5
        assert mu[d] == pytest.approx(m, abs=1e-9)
        assert sigma[d] == pytest.approx(s, abs=1e-9)
        if s > 1e-12:
            np.testing.assert_allclose(std[:, d], (emb[:, d] - m) / (s + 1e-8), atol=1e-9)


def test_standardize_needs_two_rows():
    with pytest.raises(ValidationError):
        standardize(np.zeros((1, 11)))


def test_structural_dims_match_across_widths(small_corpus):
    a = generate_model(TinyModelSpec(vocab_size=64, d_model=32, n_heads=4, n_blocks=2, d_ff=64, seed=1))
    b = generate_model(TinyModelSpec(vocab_size=64, d_model=64, n_heads=4, n_blocks=2, d_ff=128, seed=2))
    ea = model_embeddings(a, collect_act_scales(a, small_corpus.calibration))
    eb = model_embeddings(b, collect_act_scales(b, small_corpus.calibration))
    for d in (0, 5, 6):
        np.testing.assert_array_equal(ea[:, d], eb[:, d])
    assert not np.array_equal(ea[:, 1], eb[:, 1])


def test_embeddings_json_round_trip(tmp_path, small_model, small_stats):
    layers = quantizable_layers(small_model)
    emb = model_embeddings(small_model, small_stats)
    _, mu, sigma = standardize(emb)
    path = tmp_path / "e.json"
    calibrate.save_embeddings(path, calibrate.embeddings_document(layers, emb, mu, sigma, small_stats))
    doc = json.loads(path.read_text())
    assert doc["layers"][3] == {"layer_name": "blocks.0.o_proj", "kind": "o_proj", "block": 0,
                                "dims": emb[3].tolist()}
    _, emb2, mu2, sigma2, stats2 = calibrate.load_embeddings(path)
    np.testing.assert_array_equal(emb, emb2)
    np.testing.assert_array_equal(mu, mu2)
    np.testing.assert_array_equal(sigma, sigma2)
    np.testing.assert_array_equal(stats2["blocks.1.down_proj"].act_scales,
                                  small_stats["blocks.1.down_proj"].act_scales)
