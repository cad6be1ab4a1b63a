"""GGUF v3 export: bit-width to container type mapping, Q4_0/Q5_0/Q8_0 block
codecs, and a validating reader.

K-quant types are recorded as labels only; their payloads are written with
the simple 32-element block formats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ParseError, ShapeError, ValidationError
from .quantcore import Allocation, round_half_away
from .tinylm import TinyModel, TinyModelSpec, quantizable_layers, skeleton_model

GGUF_MAGIC = b"GGUF"
GGUF_VERSION = 3
DEFAULT_ALIGNMENT = 32
QK = 32

# ggml tensor type ids
F32, F16, Q4_0, Q5_0, Q8_0 = 0, 1, 2, 6, 8
TYPE_NAMES = {F32: "F32", F16: "F16", Q4_0: "Q4_0", Q5_0: "Q5_0", Q8_0: "Q8_0"}
TYPE_IDS = {v: k for k, v in TYPE_NAMES.items()}
# (elements per block, bytes per block)
TYPE_LAYOUT = {F32: (1, 4), F16: (1, 2), Q4_0: (QK, 18), Q5_0: (QK, 22), Q8_0: (QK, 34)}

# metadata value types
(GGUF_U8, GGUF_I8, GGUF_U16, GGUF_I16, GGUF_U32, GGUF_I32, GGUF_F32, GGUF_BOOL,
 GGUF_STRING, GGUF_ARRAY, GGUF_U64, GGUF_I64, GGUF_F64) = range(13)
_SCALAR_FMT = {
    GGUF_U8: "<B", GGUF_I8: "<b", GGUF_U16: "<H", GGUF_I16: "<h", GGUF_U32: "<I",
    GGUF_I32: "<i", GGUF_F32: "<f", GGUF_BOOL: "<?", GGUF_U64: "<Q", GGUF_I64: "<q", GGUF_F64: "<d",
}


@dataclass(frozen=True)
class TypeEntry:
    bits: int
    nominal_label: str
    payload_type: str
    block_size: int
    block_bytes: int
    note: str = ""

    @property
    def type_id(self) -> int:
        return TYPE_IDS[self.payload_type]

    @property
    def bpw(self) -> float:
        return 8.0 * self.block_bytes / self.block_size


@dataclass
class GGUFTypeMap:
    entries: dict[int, TypeEntry]
    fallback: TypeEntry

    def lookup(self, b: int) -> TypeEntry:
        if b in self.entries:
            return self.entries[b]
        if b < min(self.entries):
            raise ValidationError(f"no container type for {b} bits (smallest mapped is {min(self.entries)})")
        return self.fallback


_Q8 = TypeEntry(8, "Q8_0", "Q8_0", QK, 34)
DEFAULT_TYPE_MAP = GGUFTypeMap(
    entries={
        3: TypeEntry(3, "Q3_K_M", "Q4_0", QK, 18, "downgraded: Q3_K_M payload stored as Q4_0"),
        4: TypeEntry(4, "Q4_K_M", "Q4_0", QK, 18, "Q4_K_M payload stored as Q4_0"),
        5: TypeEntry(5, "Q5_K_M", "Q5_0", QK, 22, "Q5_K_M payload stored as Q5_0"),
        6: TypeEntry(6, "Q6_K", "Q8_0", QK, 34, "Q6_K payload stored as Q8_0"),
        8: _Q8,
    },
    fallback=_Q8,
)


def map_bits_to_type(b: int, mapping: GGUFTypeMap = DEFAULT_TYPE_MAP) -> TypeEntry:
    return mapping.lookup(int(b))


# --- block codecs -----------------------------------------------------------

def _as_blocks(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float32)
    if v.ndim == 1:
        if v.size != QK:
            raise ShapeError(f"a block holds exactly {QK} values, got {v.size}")
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != QK:
        raise ShapeError(f"expected (n, {QK}) blocks, got {v.shape}")
    return v


def _signed_absmax(v: np.ndarray) -> np.ndarray:
    idx = np.abs(v).argmax(axis=1)[:, None]
    return np.take_along_axis(v, idx, axis=1)


def _inv(d: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(d == 0, 0.0, 1.0 / d.astype(np.float64))


def encode_q4_0(values) -> bytes:
    v = _as_blocks(values)
    d = (_signed_absmax(v) / -8).astype(np.float32)
    q = np.clip(round_half_away(v.astype(np.float64) * _inv(d)) + 8, 0, 15).astype(np.uint8)
    qs = q[:, :16] | (q[:, 16:] << 4)
    return np.concatenate([d.astype("<f2").view(np.uint8), qs], axis=1).tobytes()


def decode_q4_0(buf: bytes) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 18)
    d = raw[:, :2].copy().view("<f2").astype(np.float32)
    qs = raw[:, 2:]
    q = np.concatenate([qs & 0x0F, qs >> 4], axis=1).astype(np.int8) - 8
    return d * q.astype(np.float32)


def encode_q5_0(values) -> bytes:
    v = _as_blocks(values)
    d = (_signed_absmax(v) / -16).astype(np.float32)
    q = np.clip(round_half_away(v.astype(np.float64) * _inv(d)) + 16, 0, 31).astype(np.uint8)
    qh = np.packbits((q >> 4) & 1, axis=1, bitorder="little")  # 4 bytes = u32 little-endian
    qs = (q[:, :16] & 0x0F) | ((q[:, 16:] & 0x0F) << 4)
    return np.concatenate([d.astype("<f2").view(np.uint8), qh, qs], axis=1).tobytes()


def decode_q5_0(buf: bytes) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 22)
    d = raw[:, :2].copy().view("<f2").astype(np.float32)
    high = np.unpackbits(raw[:, 2:6], axis=1, bitorder="little")
    qs = raw[:, 6:]
    low = np.concatenate([qs & 0x0F, qs >> 4], axis=1)
    q = (low | (high << 4)).astype(np.int8) - 16
    return d * q.astype(np.float32)


def encode_q8_0(values) -> bytes:
    v = _as_blocks(values)
    d = (np.abs(v).max(axis=1, keepdims=True) / 127).astype(np.float32)
    q = np.clip(round_half_away(v.astype(np.float64) * _inv(d)), -127, 127).astype(np.int8)
    return np.concatenate([d.astype("<f2").view(np.uint8), q.view(np.uint8)], axis=1).tobytes()


def decode_q8_0(buf: bytes) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 34)
    d = raw[:, :2].copy().view("<f2").astype(np.float32)
    return d * raw[:, 2:].copy().view(np.int8).astype(np.float32)


ENCODERS = {Q4_0: encode_q4_0, Q5_0: encode_q5_0, Q8_0: encode_q8_0}
DECODERS = {Q4_0: decode_q4_0, Q5_0: decode_q5_0, Q8_0: decode_q8_0}


def encode_tensor(w: np.ndarray, type_id: int) -> bytes:
    w = np.asarray(w, dtype=np.float32)
    if type_id == F32:
        return w.astype("<f4").tobytes()
    if type_id == F16:
        return w.astype("<f2").tobytes()
    if w.shape[-1] % QK:
        raise ShapeError(f"row length {w.shape[-1]} is not a multiple of {QK}")
    return ENCODERS[type_id](w.reshape(-1, QK))


def decode_tensor(buf: bytes, type_id: int, shape: Sequence[int]) -> np.ndarray:
    if type_id == F32:
        return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    if type_id == F16:
        return np.frombuffer(buf, dtype="<f2").reshape(shape).astype(np.float32)
    return DECODERS[type_id](buf).reshape(shape)


def tensor_nbytes(shape: Sequence[int], type_id: int) -> int:
    block, nbytes = TYPE_LAYOUT[type_id]
    n = int(np.prod(shape))
    return -(-n // block) * nbytes


# --- document model ---------------------------------------------------------

@dataclass
class TensorInfo:
    name: str
    shape: tuple[int, ...]  # row-major (rows, cols); GGUF dims are the reverse
    type_id: int
    offset: int  # relative to the data section
    nbytes: int

    @property
    def dims(self) -> list[int]:
        return list(reversed(self.shape))


@dataclass
class GGUFDocument:
    version: int
    metadata: dict[str, tuple[int, Any]]
    tensors: list[TensorInfo]
    alignment: int = DEFAULT_ALIGNMENT
    data_offset: int = 0
    payloads: dict[str, bytes] = field(default_factory=dict)

    def value(self, key: str, default=None):
        item = self.metadata.get(key)
        return default if item is None else item[1]

    def tensor(self, name: str) -> np.ndarray:
        info = next(t for t in self.tensors if t.name == name)
        return decode_tensor(self.payloads[name], info.type_id, info.shape)


def _pad(n: int, alignment: int) -> int:
    return (alignment - n % alignment) % alignment


def _pack_string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<Q", len(b)) + b


def _pack_value(vtype: int, value) -> bytes:
    if vtype == GGUF_STRING:
        return _pack_string(value)
    if vtype == GGUF_ARRAY:
        etype, items = value
        body = b"".join(_pack_value(etype, x) for x in items)
        return struct.pack("<IQ", etype, len(items)) + body
    return struct.pack(_SCALAR_FMT[vtype], value)


# --- export -----------------------------------------------------------------

@dataclass
class EncodedTensor:
    name: str
    shape: tuple[int, ...]
    type_id: int
    payload: bytes


def encode_model(model: TinyModel, alloc: Allocation, fold=None,
                 mapping: GGUFTypeMap = DEFAULT_TYPE_MAP) -> list[EncodedTensor]:
    """Encode every tensor: quantizable layers with their mapped block codec
    (after optional folding), everything else as F16."""
    from .scalefold import fold_model

    src = fold_model(model, fold) if fold is not None else model
    layers = quantizable_layers(src)
    if len(alloc.bits) != len(layers):
        raise ShapeError(f"allocation has {len(alloc.bits)} entries, model has {len(layers)} layers")
    types = {l.name: mapping.lookup(int(b)).type_id for l, b in zip(layers, alloc.bits)}
    out = []
    for name, arr in src.named_parameters():
        tid = types.get(name, F16)
        if tid != F16 and arr.shape[-1] % QK:
            raise ShapeError(f"{name}: row length {arr.shape[-1]} is not a multiple of {QK}")
        out.append(EncodedTensor(name, tuple(arr.shape), tid, encode_tensor(arr, tid)))
    return out


def build_metadata(model: TinyModel, alloc: Allocation, fold=None, name: str = "rampkit-tinylm",
                   mapping: GGUFTypeMap = DEFAULT_TYPE_MAP, extra: dict | None = None) -> list[tuple[str, int, Any]]:
    spec = model.spec
    entries = [mapping.lookup(int(b)) for b in alloc.bits]
    kv: list[tuple[str, int, Any]] = [
        ("general.architecture", GGUF_STRING, "tinylm"),
        ("general.name", GGUF_STRING, name),
        ("general.alignment", GGUF_U32, DEFAULT_ALIGNMENT),
        ("ramp.quantization_type", GGUF_STRING, "mixed-precision"),
        ("ramp.bit_allocation", GGUF_ARRAY, (GGUF_I32, [int(b) for b in alloc.bits])),
        ("ramp.paper_types", GGUF_ARRAY, (GGUF_STRING, [e.nominal_label for e in entries])),
        ("ramp.payload_types", GGUF_ARRAY, (GGUF_STRING, [e.payload_type for e in entries])),
        ("ramp.avg_bits", GGUF_F32, float(alloc.avg_bits)),
        ("ramp.scale_folding", GGUF_BOOL, fold is not None),
    ]
    for key in ("vocab_size", "d_model", "n_heads", "n_blocks", "d_ff", "max_seq_len"):
        kv.append((f"tinylm.{key}", GGUF_U32, int(getattr(spec, key))))
    kv.append(("tinylm.seed", GGUF_U64, int(spec.seed)))
    for key in ("outlier_fraction", "outlier_boost", "init_scale"):
        kv.append((f"tinylm.{key}", GGUF_F64, float(getattr(spec, key))))
    if fold is not None:
        kv.append(("ramp.fold_eps", GGUF_F32, float(fold.eps)))
        for i, bf in enumerate(fold.blocks):
            kv.append((f"ramp.fold_scales.{i}.attn", GGUF_ARRAY, (GGUF_F32, [float(x) for x in bf.s_attn])))
            kv.append((f"ramp.fold_scales.{i}.ffn", GGUF_ARRAY, (GGUF_F32, [float(x) for x in bf.s_ffn])))
    for key, value in (extra or {}).items():
        if isinstance(value, bool):
            kv.append((key, GGUF_BOOL, value))
        elif isinstance(value, int):
            kv.append((key, GGUF_I64, value))
        elif isinstance(value, float):
            kv.append((key, GGUF_F64, value))
        else:
            kv.append((key, GGUF_STRING, str(value)))
    return kv


def serialize_gguf(metadata: Sequence[tuple[str, int, Any]], tensors: Sequence[EncodedTensor],
                   alignment: int = DEFAULT_ALIGNMENT) -> bytes:
    header = [GGUF_MAGIC, struct.pack("<IQQ", GGUF_VERSION, len(tensors), len(metadata))]
    for key, vtype, value in metadata:
        header.append(_pack_string(key) + struct.pack("<I", vtype) + _pack_value(vtype, value))
    offset = 0
    for t in tensors:
        dims = list(reversed(t.shape))
        header.append(_pack_string(t.name) + struct.pack("<I", len(dims))
                      + struct.pack(f"<{len(dims)}Q", *dims) + struct.pack("<IQ", t.type_id, offset))
        offset += len(t.payload) + _pad(len(t.payload), alignment)
    head = b"".join(header)
    parts = [head, b"\x00" * _pad(len(head), alignment)]
    for t in tensors:
        parts.append(t.payload)
        parts.append(b"\x00" * _pad(len(t.payload), alignment))
    return b"".join(parts)


def write_gguf(model: TinyModel, alloc: Allocation, fold, path: str | Path, name: str = "rampkit-tinylm",
               mapping: GGUFTypeMap = DEFAULT_TYPE_MAP, extra: dict | None = None) -> list[EncodedTensor]:
    tensors = encode_model(model, alloc, fold, mapping)
    meta = build_metadata(model, alloc, fold, name, mapping, extra)
    Path(path).write_bytes(serialize_gguf(meta, tensors))
    return tensors


# --- reader -----------------------------------------------------------------

class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ParseError(f"unexpected end of file reading {fmt}", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals[0] if len(vals) == 1 else vals

    def string(self) -> str:
        start = self.pos
        n = self.take("<Q")
        if self.pos + n > len(self.data):
            raise ParseError("string runs past end of file", start)
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("invalid utf-8 in string", start) from None

    def value(self, vtype: int):
        if vtype == GGUF_STRING:
            return self.string()
        if vtype == GGUF_ARRAY:
            start = self.pos
            etype, count = self.take("<IQ")
            if etype == GGUF_ARRAY or (etype not in _SCALAR_FMT and etype != GGUF_STRING):
                raise ParseError(f"unsupported array element type {etype}", start)
            if etype != GGUF_STRING and self.pos + count * struct.calcsize(_SCALAR_FMT[etype]) > len(self.data):
                raise ParseError("array runs past end of file", start)
            return (etype, [self.value(etype) for _ in range(count)])
        if vtype not in _SCALAR_FMT:
            raise ParseError(f"unknown metadata value type {vtype}", self.pos - 4)
        return self.take(_SCALAR_FMT[vtype])


def parse_gguf(data: bytes) -> GGUFDocument:
    cur = _Cursor(data)
    if len(data) < 4 or data[:4] != GGUF_MAGIC:
        raise ParseError("bad magic (expected GGUF)", 0)
    cur.pos = 4
    version = cur.take("<I")
    if version != GGUF_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    n_tensors, n_kv = cur.take("<QQ")
    metadata: dict[str, tuple[int, Any]] = {}
    for _ in range(n_kv):
        at = cur.pos
        key = cur.string()
        vtype = cur.take("<I")
        if key in metadata:
            raise ParseError(f"duplicate metadata key {key!r}", at)
        metadata[key] = (vtype, cur.value(vtype))
    alignment = metadata.get("general.alignment", (GGUF_U32, DEFAULT_ALIGNMENT))[1]
    if not isinstance(alignment, int) or alignment <= 0 or alignment % 8:
        raise ParseError(f"invalid alignment {alignment}")
    infos = []
    for _ in range(n_tensors):
        at = cur.pos
        name = cur.string()
        n_dims = cur.take("<I")
        if not 1 <= n_dims <= 4:
            raise ParseError(f"tensor {name}: invalid n_dims {n_dims}", at)
        dims = [cur.take("<Q") for _ in range(n_dims)]
        type_id, offset = cur.take("<IQ")
        if type_id not in TYPE_LAYOUT:
            raise ParseError(f"tensor {name}: unsupported type {type_id}", at)
        shape = tuple(reversed(dims))
        if type_id not in (F32, F16) and dims[0] % QK:
            raise ParseError(f"tensor {name}: row length {dims[0]} not a multiple of {QK}", at)
        if offset % alignment:
            raise ParseError(f"tensor {name}: offset {offset} violates {alignment}-byte alignment", at)
        infos.append(TensorInfo(name, shape, type_id, offset, tensor_nbytes(shape, type_id)))
    data_offset = cur.pos + _pad(cur.pos, alignment)
    doc = GGUFDocument(version, metadata, infos, alignment, data_offset)
    prev_end = 0
    for info in infos:
        if info.offset < prev_end:
            raise ParseError(f"tensor {info.name}: offset {info.offset} overlaps previous tensor", data_offset + info.offset)
        start = data_offset + info.offset
        end = start + info.nbytes
        if end > len(data):
            raise ParseError(f"tensor {info.name}: payload runs past end of file", start)
        doc.payloads[info.name] = data[start:end]
        prev_end = info.offset + info.nbytes
    return doc


def read_gguf(path: str | Path) -> GGUFDocument:
    return parse_gguf(Path(path).read_bytes())


def model_from_gguf(doc: GGUFDocument) -> TinyModel:
    """Rebuild a float model from the dequantized tensors of an export."""
    try:
        kw = {k: doc.value(f"tinylm.{k}") for k in TinyModelSpec.__dataclass_fields__}
        spec = TinyModelSpec(**kw)
        model = skeleton_model(spec)
    except (TypeError, ValidationError) as exc:
        raise ParseError(f"GGUF file lacks a valid tinylm spec ({exc})") from None
    for name, _ in model.named_parameters():
        if name not in doc.payloads:
            raise ParseError(f"missing tensor {name}")
        model.set(name, doc.tensor(name))
    return model


def inspect_report(doc: GGUFDocument, file_size: int | None = None) -> dict:
    def plain(item):
        vtype, value = item
        if vtype == GGUF_ARRAY:
            return value[1]
        return value

    return {
        "version": doc.version,
        "tensor_count": len(doc.tensors),
        "kv_count": len(doc.metadata),
        "alignment": doc.alignment,
        "data_offset": doc.data_offset,
        "file_size": file_size,
        "metadata": {k: plain(v) for k, v in doc.metadata.items()},
        "tensors": [
            {"name": t.name, "dims": t.dims, "type": TYPE_NAMES[t.type_id],
             "offset": t.offset, "nbytes": t.nbytes}
            for t in doc.tensors
        ],
    }


def inspect_json(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return json.dumps(inspect_report(parse_gguf(data), len(data)), indent=1)
