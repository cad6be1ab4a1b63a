"""Quality oracles (exact perplexity, reconstruction-error proxy) and the
exhaustive allocation search used as ground truth on small instances."""

from __future__ import annotations

import csv
import itertools
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .quantcore import BitPalette, apply_allocation, fake_quantize, relative_frobenius_error
from .rlenv import EnvConfig, composite_reward
from .tinylm import TinyModel, perplexity, quantizable_layers

MAX_COMBINATIONS = 10**6
TABLE_LIMIT = 10**5


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("RAMPKIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class OracleResult:
    ppl: float
    per_layer_errors: np.ndarray
    kind: str
    wall_ms: float = 0.0


class ExactOracle:
    """Fake-quantize and measure perplexity on the evaluation sequences."""

    kind = "exact_ppl"

    def __init__(self, model: TinyModel, sequences, fold=None, layer_names: Sequence[str] | None = None,
                 group_size: int = 128):
        self.model = model
        self.sequences = list(sequences)
        self.fold = fold
        self.layer_names = list(layer_names) if layer_names is not None else None
        self.group_size = group_size
        self.ppl_base = perplexity(model, self.sequences)

    def evaluate(self, bits: Sequence[int]) -> OracleResult:
        t0 = time.perf_counter()
        qmodel, report = apply_allocation(self.model, list(bits), self.fold, self.group_size, self.layer_names)
        ppl = perplexity(qmodel, self.sequences)
        return OracleResult(ppl, report.errors, self.kind, 1e3 * (time.perf_counter() - t0))


class ProxyOracle:
    """PPL_base * exp(kappa * mean relative Frobenius error).

    Per-layer errors depend only on (layer, bits) and are cached.
    """

    kind = "proxy"

    def __init__(self, model: TinyModel, ppl_base: float, fold=None, layer_names: Sequence[str] | None = None,
                 kappa: float = 1.0, group_size: int = 128):
        from .scalefold import fold_model

        if ppl_base <= 0:
            raise ValidationError("ppl_base must be positive")
        self.ppl_base = float(ppl_base)
        self.kappa = float(kappa)
        self.group_size = group_size
        src = fold_model(model, fold) if fold is not None else model
        records = {l.name: l for l in quantizable_layers(src)}
        names = list(records) if layer_names is None else list(layer_names)
        self.weights = [records[n].weights for n in names]
        self._cache: dict[tuple[int, int], float] = {}

    def layer_error(self, index: int, bits: int) -> float:
        key = (index, int(bits))
        if key not in self._cache:
            w = self.weights[index]
            self._cache[key] = relative_frobenius_error(w, fake_quantize(w, int(bits), self.group_size))
        return self._cache[key]

    def evaluate(self, bits: Sequence[int]) -> OracleResult:
        t0 = time.perf_counter()
        if len(bits) != len(self.weights):
            raise ValidationError(f"allocation has {len(bits)} entries, oracle covers {len(self.weights)} layers")
        errs = np.array([self.layer_error(i, b) for i, b in enumerate(bits)])
        ppl = self.ppl_base * float(np.exp(self.kappa * errs.mean()))
        return OracleResult(ppl, errs, self.kind, 1e3 * (time.perf_counter() - t0))


def exact_oracle(model: TinyModel, alloc, fold, sequences, group_size: int = 128) -> OracleResult:
    bits = list(getattr(alloc, "bits", alloc))
    names = getattr(alloc, "layer_names", None)
    return ExactOracle(model, sequences, fold, names, group_size).evaluate(bits)


def proxy_oracle(model: TinyModel, alloc, fold, ppl_base: float, kappa: float = 1.0,
                 group_size: int = 128) -> OracleResult:
    bits = list(getattr(alloc, "bits", alloc))
    names = getattr(alloc, "layer_names", None)
    return ProxyOracle(model, ppl_base, fold, names, kappa, group_size).evaluate(bits)


def make_oracle(model: TinyModel, sequences, cfg: EnvConfig, fold=None,
                layer_names: Sequence[str] | None = None):
    exact = ExactOracle(model, sequences, fold, layer_names, cfg.group_size)
    if cfg.oracle == "exact_ppl":
        return exact
    return ProxyOracle(model, exact.ppl_base, fold, layer_names, cfg.kappa, cfg.group_size)


@dataclass
class SearchRow:
    bits: tuple[int, ...]
    ppl: float
    r_q: float
    r_b: float
    R: float

    @property
    def avg_bits(self) -> float:
        return float(np.mean(self.bits))


@dataclass
class SearchResult:
    best_bits: tuple[int, ...]
    best_reward: float
    n_evaluated: int
    table: list[SearchRow] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        if not self.table:
            raise ValidationError("enumeration table was not retained")
        n = len(self.table[0].bits)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"b{i}" for i in range(n)] + ["avg_bits", "ppl", "r_q", "r_b", "R"])
            for row in self.table:
                w.writerow(list(row.bits) + [repr(row.avg_bits), repr(row.ppl), repr(row.r_q), repr(row.r_b), repr(row.R)])


def enumerate_allocations(palette: BitPalette, n_layers: int):
    """Odometer order, the last layer varying fastest."""
    return itertools.product(palette.bits, repeat=n_layers)


def brute_force_search(oracle, n_layers: int, palette: BitPalette, cfg: EnvConfig | None = None,
                       keep_table: bool | None = None) -> SearchResult:
    """Score every allocation with the composite reward; ties resolve to the
    lexicographically smallest bit vector."""
    cfg = cfg or EnvConfig(palette=palette)
    count = len(palette) ** n_layers
    if count > MAX_COMBINATIONS:
        raise ValidationError(f"{count} allocations exceed the enumeration bound of {MAX_COMBINATIONS}")
    if keep_table is None:
        keep_table = count <= TABLE_LIMIT

    def score(bits):
        res = oracle.evaluate(bits)
        rq, rb, R = composite_reward(res.ppl, oracle.ppl_base, float(np.mean(bits)), cfg)
        return SearchRow(tuple(bits), res.ppl, rq, rb, R)

    allocs = list(enumerate_allocations(palette, n_layers))
    workers = max_workers()
    if workers > 1 and not isinstance(oracle, ProxyOracle):
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(score, allocs, chunksize=max(1, len(allocs) // (4 * workers))))
    else:
        rows = [score(a) for a in allocs]
    best = rows[0]
    for row in rows[1:]:
        # rows arrive in lexicographic order, so strict > keeps the smallest on ties
        if row.R > best.R:
            best = row
    return SearchResult(best.bits, best.R, len(rows), rows if keep_table else [])
