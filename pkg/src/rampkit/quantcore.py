"""Per-group asymmetric affine quantization, allocations and size accounting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ShapeError, ValidationError
from .tinylm import TinyModel, quantizable_layers

SCALE_EPS = 1e-8
DEFAULT_GROUP_SIZE = 128


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class BitPalette:
    bits: tuple[int, ...] = (3, 4, 5)

    def __post_init__(self):
        b = tuple(int(x) for x in self.bits)
        object.__setattr__(self, "bits", b)
        if not b:
            raise ValidationError("palette is empty")
        if any(x < 2 or x > 8 for x in b):
            raise ValidationError(f"palette bits must lie in [2, 8]: {b}")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValidationError(f"palette must be strictly ascending: {b}")

    @property
    def min(self) -> int:
        return self.bits[0]

    @property
    def max(self) -> int:
        return self.bits[-1]

    def __contains__(self, b) -> bool:
        return b in self.bits

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)


@dataclass
class QuantizedLayer:
    bits: int
    group_size: int
    scales: np.ndarray  # (rows, n_groups) float32
    zeros: np.ndarray  # (rows, n_groups) uint8
    codes: np.ndarray  # (rows, cols) uint8, one code per entry
    shape: tuple[int, int]

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    def packed_codes(self) -> bytes:
        return pack_codes(self.codes.ravel(), self.bits)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Little-endian bitstream, ``bits`` bits per code."""
    c = np.asarray(codes, dtype=np.uint8)
    planes = ((c[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: count * bits]
    planes = flat.reshape(count, bits).astype(np.uint8)
    return (planes << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def _group_bounds(cols: int, group_size: int) -> list[tuple[int, int]]:
    return [(a, min(a + group_size, cols)) for a in range(0, cols, group_size)]


def quantize_layer(w, bits: int, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedLayer:
    """Asymmetric min/max quantization of contiguous groups along each row.

    The group range is widened to include zero, which keeps the zero-point
    inside [0, 2^b - 1] for one-signed and constant groups.
    """
    if not 2 <= bits <= 8:
        raise ValidationError(f"bits must lie in [2, 8], got {bits}")
    if group_size < 1:
        raise ValidationError("group_size must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("non-finite weights")
    rows, cols = w.shape
    qmax = 2**bits - 1
    bounds = _group_bounds(cols, group_size)
    scales = np.empty((rows, len(bounds)), dtype=np.float32)
    zeros = np.empty((rows, len(bounds)), dtype=np.uint8)
    codes = np.empty((rows, cols), dtype=np.uint8)
    for g, (a, b) in enumerate(bounds):
        blk = w[:, a:b]
        # the range always spans zero, so z never needs clamping
        lo = np.minimum(blk.min(axis=1), 0.0)
        hi = np.maximum(blk.max(axis=1), 0.0)
        s = np.maximum((hi - lo) / qmax, SCALE_EPS).astype(np.float32).astype(np.float64)
        z = np.clip(round_half_away(-lo / s), 0, qmax)
        q = np.clip(round_half_away(blk / s[:, None] + z[:, None]), 0, qmax)
        scales[:, g] = s
        zeros[:, g] = z
        codes[:, a:b] = q
    return QuantizedLayer(bits, group_size, scales, zeros, codes, (rows, cols))


def dequantize_layer(q: QuantizedLayer) -> np.ndarray:
    """s * (code - z) per element, float64."""
    rows, cols = q.shape
    out = np.empty((rows, cols), dtype=np.float64)
    for g, (a, b) in enumerate(_group_bounds(cols, q.group_size)):
        s = q.scales[:, g].astype(np.float64)[:, None]
        z = q.zeros[:, g].astype(np.float64)[:, None]
        out[:, a:b] = s * (q.codes[:, a:b].astype(np.float64) - z)
    return out


def fake_quantize(w, bits: int, group_size: int = DEFAULT_GROUP_SIZE) -> np.ndarray:
    return dequantize_layer(quantize_layer(w, bits, group_size))


def relative_frobenius_error(w, w_hat) -> float:
    w = np.asarray(w, dtype=np.float64)
    denom = np.linalg.norm(w)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(w - np.asarray(w_hat, dtype=np.float64)) / denom)


def output_error(w, w_hat, x) -> float:
    """Relative error of the layer output on activations ``x`` (tokens x in)."""
    w = np.asarray(w, dtype=np.float64)
    ref = x @ w.T
    denom = np.linalg.norm(ref)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(x @ (w - w_hat).T) / denom)


@dataclass
class Allocation:
    bits: list[int]
    model_bytes: int | None = None
    layer_names: list[str] | None = None

    @property
    def avg_bits(self) -> float:
        return float(np.mean(self.bits)) if self.bits else 0.0

    def check_palette(self, palette: BitPalette) -> None:
        bad = [b for b in self.bits if b not in palette]
        if bad:
            raise ValidationError(f"bits {bad} not in palette {palette.bits}")


@dataclass
class LayerReport:
    name: str
    bits: int
    rel_frob_error: float


@dataclass
class QuantReport:
    layers: list[LayerReport] = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([l.rel_frob_error for l in self.layers])


def apply_allocation(
    model: TinyModel,
    alloc: Allocation | Sequence[int],
    fold=None,
    group_size: int = DEFAULT_GROUP_SIZE,
    layer_names: Sequence[str] | None = None,
) -> tuple[TinyModel, QuantReport]:
    """Fake-quantized copy of ``model`` (optionally scale-folded first).

    ``layer_names`` selects which quantizable layers the allocation covers;
    by default all of them, in block order.
    """
    from .scalefold import fold_model

    bits = list(alloc.bits if isinstance(alloc, Allocation) else alloc)
    if layer_names is None and isinstance(alloc, Allocation) and alloc.layer_names:
        layer_names = alloc.layer_names
    qmodel = fold_model(model, fold) if fold is not None else model.copy()
    records = {l.name: l for l in quantizable_layers(qmodel)}
    names = list(records) if layer_names is None else list(layer_names)
    if len(bits) != len(names):
        raise ShapeError(f"allocation has {len(bits)} entries, expected {len(names)}")
    report = QuantReport()
    for name, b in zip(names, bits):
        if name not in records:
            raise ValidationError(f"unknown layer {name}")
        w = records[name].weights
        w_hat = fake_quantize(w, int(b), group_size)
        report.layers.append(LayerReport(name, int(b), relative_frobenius_error(w, w_hat)))
        qmodel.set(name, w_hat.astype(np.float32))
    return qmodel, report


def model_bytes(alloc: Allocation | Sequence[int], model: TinyModel, mapping=None) -> int:
    """Container payload bytes: mapped block codecs for quantizable layers,
    f16 for every other tensor."""
    from .ggufx import DEFAULT_TYPE_MAP

    mapping = DEFAULT_TYPE_MAP if mapping is None else mapping
    bits = list(alloc.bits if isinstance(alloc, Allocation) else alloc)
    layers = quantizable_layers(model)
    if len(bits) != len(layers):
        raise ShapeError(f"allocation has {len(bits)} entries, model has {len(layers)} layers")
    quantized = {l.name for l in layers}
    total = 0
    for layer, b in zip(layers, bits):
        entry = mapping.lookup(int(b))
        total += math.ceil(layer.weights.size / entry.block_size) * entry.block_bytes
    for name, arr in model.named_parameters():
        if name not in quantized:
            total += 2 * arr.size
    return total


def allocation_document(alloc: Allocation, palette: BitPalette, report: QuantReport | None = None,
                        fold=None, extra: dict | None = None) -> dict:
    doc = {
        "palette": list(palette.bits),
        "bits": [int(b) for b in alloc.bits],
        "avg_bits": alloc.avg_bits,
        "model_bytes": alloc.model_bytes,
    }
    if alloc.layer_names:
        doc["layer_names"] = list(alloc.layer_names)
    if report is not None:
        doc["per_layer"] = [
            {"name": l.name, "bits": l.bits, "rel_frob_error": l.rel_frob_error} for l in report.layers
        ]
    if fold is not None:
        doc["fold"] = fold.to_json()
    if extra:
        doc.update(extra)
    return doc


def save_allocation(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_allocation(path: str | Path) -> tuple[Allocation, BitPalette, dict]:
    try:
        doc = json.loads(Path(path).read_text())
        alloc = Allocation([int(b) for b in doc["bits"]], doc.get("model_bytes"), doc.get("layer_names"))
        palette = BitPalette(tuple(doc["palette"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed allocation document ({exc})") from None
    return alloc, palette, doc
