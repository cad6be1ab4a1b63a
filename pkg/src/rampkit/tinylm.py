"""A toy decoder-only transformer used as quantization target.

Pre-norm blocks: RMSNorm -> causal multi-head attention -> residual, then
RMSNorm -> gated SiLU feed-forward -> residual. Learned additive position
vectors stand in for rotary embeddings. Parameters are stored as float32;
the forward pass runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

RMS_EPS = 1e-6
LAYER_KINDS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")


@dataclass(frozen=True)
class TinyModelSpec:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 256
    max_seq_len: int = 128
    seed: int = 0
    outlier_fraction: float = 0.01
    outlier_boost: float = 32.0
    init_scale: float = 1.0

    def validate(self) -> None:
        dims = (self.d_model, self.n_heads, self.n_blocks, self.d_ff, self.max_seq_len)
        if any(int(d) < 1 for d in dims):
            raise ValidationError(f"all model dimensions must be >= 1: {self}")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValidationError("outlier_fraction must lie in [0, 1]")
        if self.outlier_boost <= 0 or self.init_scale <= 0:
            raise ValidationError("outlier_boost and init_scale must be positive")


@dataclass
class Block:
    norm_in: np.ndarray
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    o_proj: np.ndarray
    norm_post: np.ndarray
    gate_proj: np.ndarray
    up_proj: np.ndarray
    down_proj: np.ndarray

    FIELDS = ("norm_in", "q_proj", "k_proj", "v_proj", "o_proj",
              "norm_post", "gate_proj", "up_proj", "down_proj")


@dataclass
class TinyModel:
    spec: TinyModelSpec
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: list[Block]
    norm_final: np.ndarray
    lm_head: np.ndarray

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in fixed declaration order."""
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{f}", getattr(blk, f)) for f in Block.FIELDS]
        out += [("norm_final", self.norm_final), ("lm_head", self.lm_head)]
        return out

    def copy(self) -> "TinyModel":
        blocks = [Block(*(getattr(b, f).copy() for f in Block.FIELDS)) for b in self.blocks]
        return TinyModel(self.spec, self.tok_emb.copy(), self.pos_emb.copy(), blocks,
                         self.norm_final.copy(), self.lm_head.copy())

    def get(self, name: str) -> np.ndarray:
        return dict(self.named_parameters())[name]

    def set(self, name: str, value: np.ndarray) -> None:
        if name.startswith("blocks."):
            _, idx, f = name.split(".")
            old = getattr(self.blocks[int(idx)], f)
            if old.shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
            setattr(self.blocks[int(idx)], f, value.astype(np.float32))
        else:
            old = getattr(self, name)
            if old.shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
            setattr(self, name, value.astype(np.float32))


@dataclass
class LayerRecord:
    name: str
    kind: str
    block_index: int
    in_features: int
    out_features: int
    weights: np.ndarray  # (out_features, in_features)


@dataclass
class Corpus:
    calibration: list[np.ndarray] = field(default_factory=list)
    evaluation: list[np.ndarray] = field(default_factory=list)

    def validate(self, vocab_size: int) -> None:
        for split in (self.calibration, self.evaluation):
            for seq in split:
                if len(seq) and (seq.min() < 0 or seq.max() >= vocab_size):
                    raise ValidationError(f"token id outside [0, {vocab_size})")
        cal = {tuple(s.tolist()) for s in self.calibration}
        if any(tuple(s.tolist()) in cal for s in self.evaluation):
            raise ValidationError("evaluation split overlaps calibration split")


def generate_model(spec: TinyModelSpec) -> TinyModel:
    """Seeded random model. Linear weights ~ N(0, (init_scale * sqrt(2/fan_in))^2).

    A fraction of the FFN input channels get their post-attention RMSNorm
    gain multiplied by ``outlier_boost``, so the activations entering
    gate_proj/up_proj carry a few large-magnitude channels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, f, v = spec.d_model, spec.d_ff, spec.vocab_size

    def linear(n_out, n_in):
        std = spec.init_scale * np.sqrt(2.0 / n_in)
        return (rng.standard_normal((n_out, n_in)) * std).astype(np.float32)

    tok_emb = rng.standard_normal((v, d)).astype(np.float32)
    pos_emb = (0.1 * rng.standard_normal((spec.max_seq_len, d))).astype(np.float32)
    blocks = []
    for _ in range(spec.n_blocks):
        norm_post = np.ones(d, dtype=np.float32)
        if spec.outlier_fraction > 0:
            n_out = max(1, int(round(spec.outlier_fraction * d)))
            chans = rng.choice(d, size=n_out, replace=False)
            norm_post[chans] *= spec.outlier_boost
        blocks.append(Block(
            norm_in=np.ones(d, dtype=np.float32),
            q_proj=linear(d, d), k_proj=linear(d, d), v_proj=linear(d, d), o_proj=linear(d, d),
            norm_post=norm_post,
            gate_proj=linear(f, d), up_proj=linear(f, d), down_proj=linear(d, f),
        ))
    return TinyModel(spec, tok_emb, pos_emb, blocks, np.ones(d, dtype=np.float32), linear(v, d))


def quantizable_layers(model: TinyModel) -> list[LayerRecord]:
    """The 7 linear projections of every block, in block order."""
    out = []
    for i, blk in enumerate(model.blocks):
        for kind in LAYER_KINDS:
            w = getattr(blk, kind)
            out.append(LayerRecord(f"blocks.{i}.{kind}", kind, i, w.shape[1], w.shape[0], w))
    return out


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


Hook = Callable[[str, np.ndarray], None]


def forward_logits(model: TinyModel, tokens: Sequence[int], hook: Hook | None = None) -> np.ndarray:
    """Logits (len x vocab). ``hook(layer_name, inputs)`` sees the input
    matrix of every quantizable layer."""
    spec = model.spec
    toks = np.asarray(tokens, dtype=np.int64)
    n = toks.shape[0]
    if toks.ndim != 1 or not 1 <= n <= spec.max_seq_len:
        raise ShapeError(f"sequence length {n} outside [1, {spec.max_seq_len}]")
    if toks.min() < 0 or toks.max() >= spec.vocab_size:
        raise ValidationError(f"token id outside [0, {spec.vocab_size})")
    f64 = np.float64
    x = model.tok_emb[toks].astype(f64) + model.pos_emb[:n].astype(f64)
    n_heads = spec.n_heads
    d_head = spec.d_model // n_heads
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    for i, blk in enumerate(model.blocks):
        h = rmsnorm(x, blk.norm_in.astype(f64))
        if hook:
            for kind in ("q_proj", "k_proj", "v_proj"):
                hook(f"blocks.{i}.{kind}", h)
        q = (h @ blk.q_proj.T.astype(f64)).reshape(n, n_heads, d_head).transpose(1, 0, 2)
        k = (h @ blk.k_proj.T.astype(f64)).reshape(n, n_heads, d_head).transpose(1, 0, 2)
        v = (h @ blk.v_proj.T.astype(f64)).reshape(n, n_heads, d_head).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(d_head)
        scores[:, mask] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        attn = (probs @ v).transpose(1, 0, 2).reshape(n, spec.d_model)
        if hook:
            hook(f"blocks.{i}.o_proj", attn)
        x = x + attn @ blk.o_proj.T.astype(f64)
        h2 = rmsnorm(x, blk.norm_post.astype(f64))
        if hook:
            hook(f"blocks.{i}.gate_proj", h2)
            hook(f"blocks.{i}.up_proj", h2)
        act = silu(h2 @ blk.gate_proj.T.astype(f64)) * (h2 @ blk.up_proj.T.astype(f64))
        if hook:
            hook(f"blocks.{i}.down_proj", act)
        x = x + act @ blk.down_proj.T.astype(f64)
    x = rmsnorm(x, model.norm_final.astype(f64))
    return x @ model.lm_head.T.astype(f64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_nll(logits: np.ndarray, tokens: Sequence[int]) -> tuple[float, int]:
    """Summed negative log-likelihood of tokens[1:] given logits[:-1]."""
    toks = np.asarray(tokens)
    if len(toks) < 2:
        return 0.0, 0
    lp = log_softmax(np.asarray(logits[:-1], dtype=np.float64))
    return float(-lp[np.arange(len(toks) - 1), toks[1:]].sum()), len(toks) - 1


def perplexity_from_logits(pairs: Sequence[tuple[np.ndarray, Sequence[int]]]) -> float:
    total, count = 0.0, 0
    for logits, toks in pairs:
        nll, n = sequence_nll(logits, toks)
        total += nll
        count += n
    if count == 0:
        raise ValidationError("no predicted tokens to score")
    return float(np.exp(total / count))


def perplexity(model: TinyModel, sequences: Sequence[Sequence[int]]) -> float:
    """exp of the mean next-token NLL over every predicted position."""
    if len(sequences) == 0:
        raise ValidationError("evaluation split is empty")
    return perplexity_from_logits([(forward_logits(model, s), s) for s in sequences])


# --- corpus ---------------------------------------------------------------

def zipf_probs(vocab_size: int, exponent: float = 1.2) -> np.ndarray:
    p = 1.0 / np.arange(1, vocab_size + 1, dtype=np.float64) ** exponent
    return p / p.sum()


def make_corpus(vocab_size: int, n_calibration: int, n_evaluation: int, seq_len: int,
                rng: np.random.Generator, exponent: float = 1.2) -> Corpus:
    """Zipf-distributed synthetic token sequences in two disjoint splits."""
    p = zipf_probs(vocab_size, exponent)
    seen: set[tuple] = set()
    splits: list[list[np.ndarray]] = [[], []]
    for split, count in zip(splits, (n_calibration, n_evaluation)):
        while len(split) < count:
            seq = rng.choice(vocab_size, size=seq_len, p=p).astype(np.int64)
            key = tuple(seq.tolist())
            if key in seen:
                continue
            seen.add(key)
            split.append(seq)
    return Corpus(calibration=splits[0], evaluation=splits[1])


def save_sequences(seqs: Sequence[np.ndarray], path: str | Path) -> None:
    Path(path).write_text("".join(" ".join(str(int(t)) for t in s) + "\n" for s in seqs))


def load_sequences(path: str | Path, vocab_size: int | None = None) -> list[np.ndarray]:
    seqs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            seq = np.array([int(t) for t in line.split()], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if vocab_size is not None and (seq.min() < 0 or seq.max() >= vocab_size):
            raise ParseError(f"{path}:{lineno}: token id outside [0, {vocab_size})")
        seqs.append(seq)
    return seqs


# --- model file -------------------------------------------------------------

MODEL_MAGIC = b"RMPM"
MODEL_VERSION = 1
_SPEC_INTS = ("vocab_size", "d_model", "n_heads", "n_blocks", "d_ff", "max_seq_len", "seed")
_SPEC_FLOATS = ("outlier_fraction", "outlier_boost", "init_scale")
_HEADER = struct.Struct("<4sI" + "Q" * len(_SPEC_INTS) + "d" * len(_SPEC_FLOATS))


def model_to_bytes(model: TinyModel) -> bytes:
    spec = asdict(model.spec)
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION,
                          *(spec[k] for k in _SPEC_INTS), *(spec[k] for k in _SPEC_FLOATS))
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for _, p in model.named_parameters())
    return header + payload


def save_model(model: TinyModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(data: bytes) -> TinyModel:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise ParseError("bad model magic", 0)
    if len(data) < 8:
        raise ParseError("truncated model header", len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if len(data) < _HEADER.size:
        raise ParseError("truncated model header", len(data))
    fields = _HEADER.unpack_from(data, 0)[2:]
    kw = dict(zip(_SPEC_INTS + _SPEC_FLOATS, fields))
    spec = TinyModelSpec(**kw)
    try:
        spec.validate()
    except ValidationError as exc:
        raise ParseError(f"invalid model spec: {exc}", 8) from None
    # shapes come from a zero-weight skeleton of the same spec
    skeleton = _skeleton(spec)
    off = _HEADER.size
    for name, arr in skeleton.named_parameters():
        nbytes = arr.size * 4
        if off + nbytes > len(data):
            raise ParseError(f"truncated payload in tensor {name}", off)
        skeleton.set(name, np.frombuffer(data, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape))
        off += nbytes
    if off != len(data):
        raise ParseError("trailing bytes after model payload", off)
    return skeleton


def load_model(path: str | Path) -> TinyModel:
    return model_from_bytes(Path(path).read_bytes())


def _skeleton(spec: TinyModelSpec) -> TinyModel:
    d, f, v = spec.d_model, spec.d_ff, spec.vocab_size
    z = lambda *shape: np.zeros(shape, dtype=np.float32)  # noqa: E731
    blocks = [Block(z(d), z(d, d), z(d, d), z(d, d), z(d, d), z(d), z(f, d), z(f, d), z(d, f))
              for _ in range(spec.n_blocks)]
    return TinyModel(spec, z(v, d), z(spec.max_seq_len, d), blocks, z(d), z(v, d))


def skeleton_model(spec: TinyModelSpec) -> TinyModel:
    """All-zero model with the tensor layout of ``spec``."""
    spec.validate()
    return _skeleton(spec)


def iter_layer_names(model: TinyModel) -> Iterator[str]:
    for i in range(len(model.blocks)):
        for kind in LAYER_KINDS:
            yield f"blocks.{i}.{kind}"
