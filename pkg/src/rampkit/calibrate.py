"""Calibration statistics and the 11-dimensional per-layer state vectors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .tinylm import LayerRecord, TinyModel, forward_logits, quantizable_layers

N_DIMS = 11
STD_EPS = 1e-8

KIND_SCALAR = {
    "q_proj": 0.0,
    "k_proj": 0.0,
    "v_proj": 0.0,
    "o_proj": 0.25,
    "gate_proj": 0.5,
    "up_proj": 0.6,
    "down_proj": 0.75,
}


@dataclass
class LayerStats:
    act_scales: np.ndarray  # per input channel max |x|
    sequences_seen: int = 0

    @property
    def mean_act_scale(self) -> float:
        return float(np.mean(self.act_scales))


class CalibrationStats(dict):
    """Mapping layer name -> LayerStats."""

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        """Element-wise max of two statistics (e.g. from disjoint corpus halves)."""
        out = CalibrationStats()
        for name in self.keys() | other.keys():
            a, b = self.get(name), other.get(name)
            if a is None or b is None:
                out[name] = LayerStats((a or b).act_scales.copy(), (a or b).sequences_seen)
            else:
                out[name] = LayerStats(np.maximum(a.act_scales, b.act_scales),
                                       a.sequences_seen + b.sequences_seen)
        return out


@dataclass
class EmbeddingContext:
    prev_bits: int | None
    running_avg_bits: float
    layer_index: int
    n_layers: int


LayerEmbedding = np.ndarray  # float64 vector of length 11


def collect_act_scales(model: TinyModel, sequences: Sequence[Sequence[int]],
                       n_sequences: int | None = None) -> CalibrationStats:
    """Per-input-channel max |activation| for every quantizable layer."""
    if n_sequences is None:
        n_sequences = len(sequences)
    if n_sequences < 1:
        raise ValidationError("n_sequences must be >= 1")
    if len(sequences) == 0:
        raise ValidationError("calibration split is empty")
    stats = CalibrationStats()

    def hook(name, x):
        m = np.abs(x).max(axis=0)
        if name in stats:
            np.maximum(stats[name].act_scales, m, out=stats[name].act_scales)
        else:
            stats[name] = LayerStats(m.copy())

    used = sequences[:n_sequences]
    for seq in used:
        forward_logits(model, seq, hook=hook)
    for s in stats.values():
        s.sequences_seen = len(used)
    return stats


def collect_layer_inputs(model: TinyModel, sequences: Sequence[Sequence[int]]) -> dict[str, np.ndarray]:
    """Stacked input activations (tokens x in_features) per quantizable layer."""
    acc: dict[str, list[np.ndarray]] = {}
    for seq in sequences:
        forward_logits(model, seq, hook=lambda n, x: acc.setdefault(n, []).append(x))
    return {n: np.concatenate(xs, axis=0) for n, xs in acc.items()}


def position_category(layer_index: int, n_layers: int) -> float:
    depth = layer_index / (n_layers - 1) if n_layers > 1 else 0.0
    if depth < 0.1:
        return 0.0
    if depth > 0.9:
        return 1.0
    return 0.5


def build_embedding(layer: LayerRecord, stats: CalibrationStats, ctx: EmbeddingContext) -> LayerEmbedding:
    if layer.name not in stats:
        raise ValidationError(f"no calibration stats for {layer.name}")
    if not 0 <= ctx.layer_index < ctx.n_layers:
        raise ValidationError(f"layer_index {ctx.layer_index} outside [0, {ctx.n_layers})")
    w = np.asarray(layer.weights, dtype=np.float64)
    act = stats[layer.name].act_scales
    i, n = ctx.layer_index, ctx.n_layers
    return np.array([
        i / (n - 1) if n > 1 else 0.0,
        np.log2(layer.in_features / 16),
        np.log2(layer.out_features / 16),
        min(w.std() * 10, 1.0),
        min(np.abs(w).mean() * 10, 1.0),
        KIND_SCALAR.get(layer.kind, 1.0),
        position_category(i, n),
        min(float(np.mean(act)) * 100, 1.0),
        min(float(np.max(act)) * 1000, 1.0),
        0.0 if ctx.prev_bits is None else ctx.prev_bits / 8,
        ctx.running_avg_bits / 8,
    ], dtype=np.float64)


def model_embeddings(model: TinyModel, stats: CalibrationStats,
                     layers: Sequence[LayerRecord] | None = None) -> np.ndarray:
    """Raw embeddings (L x 11) with an empty context (dims 10-11 = 0)."""
    layers = quantizable_layers(model) if layers is None else layers
    n = len(layers)
    return np.stack([
        build_embedding(layer, stats, EmbeddingContext(None, 0.0, i, n))
        for i, layer in enumerate(layers)
    ])


def standardize(embeddings) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s - mu) / (sigma + eps) per dimension, statistics taken across layers.

    Returns the standardized matrix together with ``mu`` and ``sigma`` so a
    transfer target can be normalized with the source model's statistics.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValidationError("standardize needs at least 2 embeddings")
    mu = e.mean(axis=0)
    sigma = e.std(axis=0)
    return apply_standardization(e, mu, sigma), mu, sigma


def apply_standardization(embeddings, mu, sigma) -> np.ndarray:
    """Standardize with given statistics. Dimensions that were constant in
    the reference set (sigma == 0) carry no information and map to 0."""
    e = np.asarray(embeddings, dtype=np.float64)
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    if e.shape[-1] != N_DIMS or mu.shape != (N_DIMS,) or sigma.shape != (N_DIMS,):
        raise ValidationError("embedding/statistics dimension mismatch")
    out = (e - mu) / (sigma + STD_EPS)
    out[..., sigma <= 1e-12] = 0.0
    return out


def embeddings_document(layers: Sequence[LayerRecord], embeddings: np.ndarray,
                        mu: np.ndarray, sigma: np.ndarray, stats: CalibrationStats | None = None) -> dict:
    doc = {
        "layers": [
            {"layer_name": l.name, "kind": l.kind, "block": l.block_index,
             "dims": [float(x) for x in e]}
            for l, e in zip(layers, embeddings)
        ],
        "mu": [float(x) for x in mu],
        "sigma": [float(x) for x in sigma],
    }
    if stats is not None:
        doc["stats"] = {
            name: {"act_scales": [float(x) for x in s.act_scales],
                   "mean_act_scale": s.mean_act_scale, "sequences_seen": s.sequences_seen}
            for name, s in stats.items()
        }
    return doc


def save_embeddings(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


def load_embeddings(path: str | Path) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray, CalibrationStats]:
    """Returns (document, raw embeddings, mu, sigma, stats)."""
    try:
        doc = json.loads(Path(path).read_text())
        emb = np.array([l["dims"] for l in doc["layers"]], dtype=np.float64)
        mu = np.array(doc["mu"], dtype=np.float64)
        sigma = np.array(doc["sigma"], dtype=np.float64)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed embeddings document ({exc})") from None
    if emb.ndim != 2 or emb.shape[1] != N_DIMS or mu.shape != (N_DIMS,) or sigma.shape != (N_DIMS,):
        raise ParseError(f"{path}: embeddings must have {N_DIMS} dims")
    stats = CalibrationStats()
    for name, s in doc.get("stats", {}).items():
        stats[name] = LayerStats(np.array(s["act_scales"], dtype=np.float64), int(s["sequences_seen"]))
    return doc, emb, mu, sigma, stats
