"""Run configuration: one JSON document drives every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .quantcore import BitPalette
from .rlenv import EnvConfig
from .sacagent import SACConfig
from .tinylm import TinyModelSpec


@dataclass
class CorpusConfig:
    n_calibration: int = 16
    n_evaluation: int = 16
    seq_len: int = 32
    zipf_exponent: float = 1.2


@dataclass
class RunConfig:
    model: TinyModelSpec = field(default_factory=TinyModelSpec)
    model_path: str | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    layer_subset: list[str] | None = None
    out_dir: str = "runs/default"
    seed: int = 0

    @property
    def palette(self) -> BitPalette:
        return self.env.palette

    def validate(self) -> None:
        try:
            self.model.validate()
            self.env.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        c = self.corpus
        if min(c.n_calibration, c.n_evaluation) < 1 or c.seq_len < 2:
            raise ConfigError("corpus needs >= 1 sequence per split and seq_len >= 2")
        if c.seq_len > self.model.max_seq_len:
            raise ConfigError(f"seq_len {c.seq_len} exceeds max_seq_len {self.model.max_seq_len}")
        s = self.sac
        if s.batch_size < 1 or s.buffer_capacity < s.batch_size:
            raise ConfigError("buffer_capacity must be at least batch_size >= 1")
        if not 0.0 <= s.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if s.max_episodes < 0 or s.warmup_episodes < 0:
            raise ConfigError("episode counts must be non-negative")
        if len(s.layernorm) != len(s.hidden):
            raise ConfigError("sac.layernorm needs one flag per hidden layer")

    def to_json(self) -> dict:
        return {
            "model": asdict(self.model),
            "model_path": self.model_path,
            "corpus": asdict(self.corpus),
            "env": self.env.to_json(),
            "sac": self.sac.to_json(),
            "layer_subset": self.layer_subset,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                model=TinyModelSpec(**doc.get("model", {})),
                model_path=doc.get("model_path"),
                corpus=CorpusConfig(**doc.get("corpus", {})),
                env=EnvConfig.from_json(doc.get("env", {})),
                sac=SACConfig.from_json(doc.get("sac", {})),
                layer_subset=doc.get("layer_subset"),
                out_dir=doc.get("out_dir", "runs/default"),
                seed=int(doc.get("seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        cfg.validate()
        return cfg

    def canonical(self) -> str:
        """Canonical JSON of everything that affects results; the run
        directory is left out so relocated runs hash identically."""
        doc = self.to_json()
        doc.pop("out_dir")
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_json(doc)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")


def demo_config() -> RunConfig:
    """Small 2-block configuration used by the README walkthrough."""
    cfg = RunConfig()
    cfg.env = EnvConfig(oracle="proxy")
    cfg.sac = SACConfig(max_episodes=40)
    return cfg
