"""Episodic bit-allocation MDP: one decision per quantizable layer, a
terminal quality evaluation, and the quality-first reward with budget cliff."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .quantcore import BitPalette


@dataclass
class EnvConfig:
    palette: BitPalette = field(default_factory=BitPalette)
    budget_soft: float = 4.0
    budget_hard: float = 4.25
    q_plus: float = 10.0
    q_minus: float = 5.0
    b_lin: float = 2.0
    b_quad: float = 20.0
    gamma: float = 0.99
    oracle: str = "exact_ppl"  # or "proxy"
    kappa: float = 1.0
    continuous_cliff: bool = False
    fold: bool = True
    group_size: int = 128

    def validate(self) -> None:
        if not self.budget_soft < self.budget_hard:
            raise ValidationError("budget_soft must be below budget_hard")
        if min(self.q_plus, self.q_minus, self.b_lin, self.b_quad) <= 0:
            raise ValidationError("reward coefficients must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValidationError("gamma must lie in [0, 1]")
        if self.oracle not in ("exact_ppl", "proxy"):
            raise ValidationError(f"unknown oracle {self.oracle!r}")
        if self.kappa < 0:
            raise ValidationError("kappa must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["palette"] = list(self.palette.bits)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        d["palette"] = BitPalette(tuple(d.get("palette", (3, 4, 5))))
        return cls(**d)


def quality_reward(ppl: float, ppl_base: float, cfg: EnvConfig | None = None) -> float:
    cfg = cfg or EnvConfig()
    if ppl <= 0 or ppl_base <= 0:
        raise ValidationError("perplexities must be positive")
    ratio = ppl / ppl_base
    if ratio <= 1.0:
        return cfg.q_plus * (1.0 - ratio)
    return -cfg.q_minus * (ratio - 1.0)


def budget_penalty(b_avg: float, cfg: EnvConfig | None = None) -> float:
    """Zero up to the soft budget, linear up to the hard budget, quadratic
    beyond. Discontinuous at the hard budget unless ``continuous_cliff``."""
    cfg = cfg or EnvConfig()
    if b_avg <= cfg.budget_soft:
        return 0.0
    if b_avg <= cfg.budget_hard:
        return -cfg.b_lin * (b_avg - cfg.budget_soft)
    pen = -cfg.b_quad * (b_avg - cfg.budget_hard) ** 2
    if cfg.continuous_cliff:
        pen -= cfg.b_lin * (cfg.budget_hard - cfg.budget_soft)
    return pen


def composite_reward(ppl: float, ppl_base: float, b_avg: float, cfg: EnvConfig | None = None) -> tuple[float, float, float]:
    """(r_q, r_b, R)."""
    rq = quality_reward(ppl, ppl_base, cfg)
    rb = budget_penalty(b_avg, cfg)
    return rq, rb, rq + rb


def action_to_bits(u: float, palette: BitPalette) -> int:
    """Nearest palette member to min + u (max - min); exact ties go down."""
    b_cont = palette.min + float(u) * (palette.max - palette.min)
    best, best_d = palette.bits[0], abs(palette.bits[0] - b_cont)
    for b in palette.bits[1:]:
        d = abs(b - b_cont)
        if d < best_d:
            best, best_d = b, d
    return best


def observation(std_emb: np.ndarray, index: int, prev_bits: int | None, avg_bits: float) -> np.ndarray:
    """Static (standardized) dims of layer ``index`` plus the two context
    dims, which are injected unstandardized as bits / 8."""
    s = np.array(std_emb[index], dtype=np.float64)
    s[9] = 0.0 if prev_bits is None else prev_bits / 8.0
    s[10] = avg_bits / 8.0
    return s


@dataclass
class StepInfo:
    bits: list[int]
    avg_bits: float
    ppl: float | None = None
    r_q: float | None = None
    r_b: float | None = None
    R: float | None = None


class QuantEnv:
    """One layer per step. ``oracle.evaluate(bits)`` returns an object with
    ``ppl``; ``oracle.ppl_base`` is the unquantized reference."""

    def __init__(self, std_embeddings: np.ndarray, oracle, cfg: EnvConfig | None = None,
                 layer_names: Sequence[str] | None = None):
        self.cfg = cfg or EnvConfig()
        self.cfg.validate()
        self.emb = np.asarray(std_embeddings, dtype=np.float64)
        if self.emb.ndim != 2 or self.emb.shape[0] < 1 or self.emb.shape[1] != 11:
            raise ValidationError("environment needs an (L x 11) embedding matrix with L >= 1")
        self.oracle = oracle
        self.layer_names = list(layer_names) if layer_names is not None else None
        self.n_layers = self.emb.shape[0]
        self.cursor = 0
        self.bits: list[int] = []
        self.avg_bits = 0.0
        self.done = True

    @property
    def ppl_base(self) -> float:
        return self.oracle.ppl_base

    def reset(self) -> np.ndarray:
        self.cursor = 0
        self.bits = []
        self.avg_bits = 0.0
        self.done = False
        return observation(self.emb, 0, None, 0.0)

    def step(self, u: float) -> tuple[np.ndarray, float, bool, StepInfo]:
        if self.done:
            raise ValidationError("step() called on a finished episode; call reset()")
        b = action_to_bits(u, self.cfg.palette)
        self.bits.append(b)
        self.cursor += 1
        i = self.cursor
        self.avg_bits = (i - 1) / i * self.avg_bits + b / i
        info = StepInfo(list(self.bits), self.avg_bits)
        if i < self.n_layers:
            return observation(self.emb, i, b, self.avg_bits), 0.0, False, info
        self.done = True
        result = self.oracle.evaluate(self.bits)
        info.ppl = result.ppl
        info.r_q, info.r_b, info.R = composite_reward(result.ppl, self.ppl_base, float(np.mean(self.bits)), self.cfg)
        return observation(self.emb, self.n_layers - 1, b, self.avg_bits), info.R, True, info

    def evaluate(self, bits: Sequence[int]) -> StepInfo:
        """Score a complete allocation without stepping."""
        bits = [int(b) for b in bits]
        if len(bits) != self.n_layers:
            raise ValidationError(f"allocation has {len(bits)} entries, environment has {self.n_layers} layers")
        result = self.oracle.evaluate(bits)
        b_avg = float(np.mean(bits))
        rq, rb, R = composite_reward(result.ppl, self.ppl_base, b_avg, self.cfg)
        return StepInfo(bits, b_avg, result.ppl, rq, rb, R)
