import csv
import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from rampkit import oracles
from rampkit.errors import ValidationError
from rampkit.oracles import ExactOracle, ProxyOracle, brute_force_search, make_oracle
from rampkit.quantcore import BitPalette, apply_allocation, fake_quantize, relative_frobenius_error
from rampkit.rlenv import EnvConfig, composite_reward
from rampkit.scalefold import compute_fold_params, fold_model
from rampkit.seeding import substream
from rampkit.tinylm import TinyModelSpec, generate_model, make_corpus, perplexity, quantizable_layers


class ScriptedOracle:
    """PPL from a fixed lookup on the bit vector."""

    def __init__(self, table, base=10.0):
        self.table = table
        self.ppl_base = base
        self.calls = 0

    def evaluate(self, bits):
        self.calls += 1
        return SimpleNamespace(ppl=self.table(tuple(bits)))


def test_all_eight_bit_matches_base_on_default_model():
    model = generate_model(TinyModelSpec(seed=0))
    seqs = make_corpus(256, 1, 16, 32, substream(0, "corpus")).evaluation
    oracle = ExactOracle(model, seqs, group_size=32)
    assert abs(oracle.evaluate([8] * 14).ppl / oracle.ppl_base - 1) < 5e-3


def test_exact_oracle_matches_manual_pipeline(small_model, small_corpus, small_stats):
    fold = compute_fold_params(small_stats, 2)
    bits = [3, 4, 5, 4, 3, 5, 4] * 2
    res = ExactOracle(small_model, small_corpus.evaluation, fold).evaluate(bits)
    q, report = apply_allocation(small_model, bits, fold)
    assert res.ppl == perplexity(q, small_corpus.evaluation)
    np.testing.assert_array_equal(res.per_layer_errors, report.errors)
    again = ExactOracle(small_model, small_corpus.evaluation, fold).evaluate(bits)
    assert again.ppl == res.ppl


def test_exact_base_is_unquantized(small_model, small_corpus):
    oracle = ExactOracle(small_model, small_corpus.evaluation)
    assert oracle.ppl_base == perplexity(small_model, small_corpus.evaluation)


def test_proxy_formula(small_model, small_stats):
    fold = compute_fold_params(small_stats, 2)
    oracle = ProxyOracle(small_model, 12.0, fold, kappa=2.0)
    bits = [3, 5] * 7
    folded = quantizable_layers(fold_model(small_model, fold))
    errs = [relative_frobenius_error(l.weights, fake_quantize(l.weights, b)) for l, b in zip(folded, bits)]
    assert oracle.evaluate(bits).ppl == pytest.approx(12.0 * math.exp(2.0 * np.mean(errs)), rel=1e-12)


def test_proxy_kappa_zero_is_base(small_model):
    assert ProxyOracle(small_model, 7.5, kappa=0.0).evaluate([3] * 14).ppl == 7.5


def test_proxy_monotone_in_bits(small_model):
    oracle = ProxyOracle(small_model, 10.0)
    ppls = [oracle.evaluate([b] * 14).ppl for b in range(3, 9)]
    assert all(a > b for a, b in zip(ppls, ppls[1:]))
    assert all(p > 10.0 for p in ppls)


def test_proxy_zero_error_on_representable_weights(small_model):
    m = small_model.copy()
    for blk in m.blocks:
        for name in ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"):
            w = getattr(blk, name)
            # eight levels spanning [-1.5, 2] sit exactly on the 3-bit grid (s = 0.5, z = 3)
            row = (np.arange(w.shape[1]) % 8 - 3) * 0.5
            setattr(blk, name, np.broadcast_to(row, w.shape).astype(np.float32).copy())
    assert ProxyOracle(m, 10.0).evaluate([3] * 14).ppl == pytest.approx(10.0, abs=1e-9)


def test_proxy_layer_subset_and_length_check(small_model):
    names = ["blocks.0.q_proj", "blocks.1.up_proj"]
    oracle = ProxyOracle(small_model, 10.0, layer_names=names)
    assert oracle.evaluate([4, 4]).per_layer_errors.shape == (2,)
    with pytest.raises(ValidationError):
        oracle.evaluate([4] * 3)
    with pytest.raises(ValidationError):
        ProxyOracle(small_model, 0.0)


def test_make_oracle_kinds(small_model, small_corpus):
    seqs = small_corpus.evaluation
    assert make_oracle(small_model, seqs, EnvConfig()).kind == "exact_ppl"
    proxy = make_oracle(small_model, seqs, EnvConfig(oracle="proxy"))
    assert proxy.kind == "proxy" and proxy.ppl_base == perplexity(small_model, seqs)


def test_eight_bits_closer_to_base_than_three(small_model, small_corpus):
    seqs = small_corpus.evaluation
    exact = make_oracle(small_model, seqs, EnvConfig())
    gap8 = abs(exact.evaluate([8] * 14).ppl / exact.ppl_base - 1)
    gap3 = abs(exact.evaluate([3] * 14).ppl / exact.ppl_base - 1)
    assert gap8 < gap3


def test_single_layer_search():
    table = {(3,): 12.0, (4,): 10.5, (5,): 10.1}
    res = brute_force_search(ScriptedOracle(table.get), 1, BitPalette())
    # R: 3 -> -1.0, 4 -> -0.25, 5 -> -0.05 - 11.25
    assert res.best_bits == (4,)
    assert res.best_reward == pytest.approx(-0.25)
    assert res.n_evaluated == 3


def test_two_layer_search_and_order():
    oracle = ScriptedOracle(lambda b: 10.0 * (1 + 0.05 * (5 - np.mean(b))))
    res = brute_force_search(oracle, 2, BitPalette())
    assert [row.bits for row in res.table] == list(itertools.product((3, 4, 5), repeat=2))
    # avg 4 has ratio 1.05 -> -0.25; avg 4.5 pays 20 * 0.0625 = 1.25 on top of -0.125
    assert res.best_bits == (3, 5)
    assert oracle.calls == 9


def test_search_ties_go_to_smallest():
    res = brute_force_search(ScriptedOracle(lambda b: 10.0), 2, BitPalette())
    assert res.best_bits == (3, 3)


def test_search_dominates_every_row(small_model):
    oracle = ProxyOracle(small_model, 10.0, layer_names=[l.name for l in quantizable_layers(small_model)][:4])
    res = brute_force_search(oracle, 4, BitPalette())
    assert res.n_evaluated == 81
    assert all(res.best_reward >= row.R for row in res.table)
    for row in res.table[::10]:
        assert row.R == composite_reward(row.ppl, 10.0, row.avg_bits)[2]


def test_search_bound():
    with pytest.raises(ValidationError):
        brute_force_search(ScriptedOracle(lambda b: 1.0), 13, BitPalette())


def test_search_csv(tmp_path):
    res = brute_force_search(ScriptedOracle(lambda b: 10.0 + sum(b)), 2, BitPalette((3, 4)))
    path = tmp_path / "s.csv"
    res.write_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4
    assert rows[0]["b0"] == "3" and float(rows[0]["ppl"]) == 16.0
    assert float(rows[3]["avg_bits"]) == 4.0


def test_threaded_search_matches_serial(monkeypatch, small_model, small_corpus):
    names = [l.name for l in quantizable_layers(small_model)][:2]
    oracle = ExactOracle(small_model, small_corpus.evaluation[:2], layer_names=names)
    serial = brute_force_search(oracle, 2, BitPalette())
    monkeypatch.setenv("RAMPKIT_THREADS", "2")
    assert oracles.max_workers() == 2
    threaded = brute_force_search(oracle, 2, BitPalette())
    assert [r.R for r in serial.table] == [r.R for r in threaded.table]
    assert serial.best_bits == threaded.best_bits
