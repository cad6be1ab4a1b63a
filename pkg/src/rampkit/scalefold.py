"""Scale folding: push activation outliers into consumer weight columns and
compensate through the preceding RMSNorm gain, leaving the float forward
pass unchanged."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrate import CalibrationStats
from .errors import ShapeError, ValidationError
from .tinylm import TinyModel

FOLD_EPS = 1e-5


@dataclass
class BlockFold:
    s_attn: np.ndarray
    s_ffn: np.ndarray


@dataclass
class FoldParams:
    blocks: list[BlockFold]
    eps: float = FOLD_EPS

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "blocks": [{"s_attn": b.s_attn.tolist(), "s_ffn": b.s_ffn.tolist()} for b in self.blocks],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FoldParams":
        return cls([BlockFold(np.array(b["s_attn"]), np.array(b["s_ffn"])) for b in doc["blocks"]],
                   doc.get("eps", FOLD_EPS))


def _scale_vector(act_scales: np.ndarray, eps: float) -> np.ndarray:
    s = np.sqrt(np.asarray(act_scales, dtype=np.float64)) + eps
    return s / s.mean()


def compute_fold_scales(stats: CalibrationStats, block: int, eps: float = FOLD_EPS) -> BlockFold:
    """s = sqrt(act_scale) + eps, normalized to mean 1; from the q_proj input
    for attention and the gate_proj input for the FFN."""
    try:
        attn = stats[f"blocks.{block}.q_proj"].act_scales
        ffn = stats[f"blocks.{block}.gate_proj"].act_scales
    except KeyError as exc:
        raise ValidationError(f"missing calibration stats for {exc.args[0]}") from None
    return BlockFold(_scale_vector(attn, eps), _scale_vector(ffn, eps))


def compute_fold_params(stats: CalibrationStats, n_blocks: int, eps: float = FOLD_EPS) -> FoldParams:
    return FoldParams([compute_fold_scales(stats, i, eps) for i in range(n_blocks)], eps)


def fold_block(model: TinyModel, block: int, fp: BlockFold) -> TinyModel:
    """In place: scale q/k/v and gate/up input columns, divide the matching
    RMSNorm gains. Results stay float64 so a fold/unfold pair does not round
    twice; files still store f32."""
    blk = model.blocks[block]
    d = blk.norm_in.shape[0]
    s_attn = np.asarray(fp.s_attn, dtype=np.float64)
    s_ffn = np.asarray(fp.s_ffn, dtype=np.float64)
    if s_attn.shape != (d,) or s_ffn.shape != (d,):
        raise ShapeError(f"fold vectors must have length {d}")
    if np.any(s_attn <= 0) or np.any(s_ffn <= 0):
        raise ValidationError("fold scales must be positive")
    for name in ("q_proj", "k_proj", "v_proj"):
        setattr(blk, name, np.asarray(getattr(blk, name), np.float64) * s_attn)
    blk.norm_in = np.asarray(blk.norm_in, np.float64) / s_attn
    for name in ("gate_proj", "up_proj"):
        setattr(blk, name, np.asarray(getattr(blk, name), np.float64) * s_ffn)
    blk.norm_post = np.asarray(blk.norm_post, np.float64) / s_ffn
    return model


def fold_model(model: TinyModel, fold: FoldParams) -> TinyModel:
    """Folded copy of ``model``."""
    if len(fold.blocks) != len(model.blocks):
        raise ShapeError(f"fold covers {len(fold.blocks)} blocks, model has {len(model.blocks)}")
    out = model.copy()
    for i, bf in enumerate(fold.blocks):
        fold_block(out, i, bf)
    return out


def inverse(fold: FoldParams) -> FoldParams:
    return FoldParams([BlockFold(1.0 / b.s_attn, 1.0 / b.s_ffn) for b in fold.blocks], fold.eps)
