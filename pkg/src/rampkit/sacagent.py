"""Soft Actor-Critic over a sigmoid-squashed scalar action.

The actor emits (mean, log-std) of a Gaussian; the sampled value is
squashed into (0, 1) and mapped to a bit-width by the environment. Twin
critics take the state concatenated with the squashed action.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nnkit
from .calibrate import apply_standardization
from .errors import ShapeError, ValidationError
from .nnkit import AdamState, DenseNet
from .quantcore import Allocation, BitPalette
from .rlenv import QuantEnv, action_to_bits, observation
from .seeding import substream

STATE_DIM = 11
LOGP_EPS = 1e-8
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class SACConfig:
    hidden: tuple[int, ...] = (512, 512, 256)
    layernorm: tuple[bool, ...] = (True, True, False)
    learning_rate: float = 3e-4
    batch_size: int = 128
    buffer_capacity: int = 30_000
    gamma: float = 0.99
    tau: float = 0.005
    grad_clip: float = 1.0
    init_alpha: float = 0.2
    target_entropy: float = -1.0
    warmup_episodes: int = 20
    max_episodes: int = 250
    updates_per_episode: int | None = None  # None: one update per layer
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    checkpoint_every: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["layernorm"] = list(self.layernorm)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SACConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", cls.hidden))
        d["layernorm"] = tuple(d.get("layernorm", cls.layernorm))
        return cls(**d)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Actor:
    net: DenseNet
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    @classmethod
    def create(cls, cfg: SACConfig, rng: np.random.Generator) -> "Actor":
        sizes = [STATE_DIM, *cfg.hidden, 2]
        return cls(DenseNet.create(sizes, rng, layernorm=cfg.layernorm), cfg.log_std_min, cfg.log_std_max)

    def heads(self, states) -> tuple[np.ndarray, np.ndarray, np.ndarray, object]:
        """(mean, clamped log-std, in-range mask, forward cache)."""
        out, cache = nnkit.forward_cached(self.net, np.atleast_2d(states))
        raw = out[:, 1]
        log_std = np.clip(raw, self.log_std_min, self.log_std_max)
        inside = (raw >= self.log_std_min) & (raw <= self.log_std_max)
        return out[:, 0], log_std, inside, cache


def squashed_log_prob(eps, log_std, u):
    """log density of u = sigmoid(mu + sigma * eps)."""
    return -0.5 * eps * eps - log_std - HALF_LOG_2PI - np.log(u * (1.0 - u) + LOGP_EPS)


def sample_action(actor: Actor, s, deterministic: bool = False, rng: np.random.Generator | None = None):
    """Returns (u, log_prob); log_prob is None in deterministic mode."""
    s = np.asarray(s, dtype=np.float32)
    single = s.ndim == 1
    if s.shape[-1] != STATE_DIM:
        raise ShapeError(f"state must have {STATE_DIM} dims, got {s.shape[-1]}")
    mu, log_std, _, _ = actor.heads(s)
    if deterministic:
        u = sigmoid(mu)
        return (float(u[0]) if single else u), None
    if rng is None:
        raise ValidationError("stochastic sampling needs a generator")
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    u = sigmoid(mu + np.exp(log_std) * eps)
    logp = squashed_log_prob(eps, log_std, u)
    if single:
        return float(u[0]), float(logp[0])
    return u, logp


class ReplayBuffer:
    def __init__(self, capacity: int = 30_000, state_dim: int = STATE_DIM):
        if capacity < 1:
            raise ValidationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim), dtype=np.float32)
        self.a = np.zeros(capacity, dtype=np.float32)
        self.r = np.zeros(capacity, dtype=np.float32)
        self.s2 = np.zeros((capacity, state_dim), dtype=np.float32)
        self.d = np.zeros(capacity, dtype=np.float32)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        if not done and r != 0:
            raise ValidationError("non-terminal transitions must carry zero reward")
        i = self.head
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size < batch_size:
            raise ValidationError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s2": self.s2[idx], "d": self.d[idx]}


@dataclass
class Transition:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    done: bool


def _critic_input(s, a) -> np.ndarray:
    return np.concatenate([np.asarray(s, dtype=np.float32), np.asarray(a, dtype=np.float32).reshape(-1, 1)], axis=1)


class SACAgent:
    def __init__(self, cfg: SACConfig | None = None, seed: int = 0):
        self.cfg = cfg or SACConfig()
        init = substream(seed, "actor-init")
        self.actor = Actor.create(self.cfg, init)
        csizes = [STATE_DIM + 1, *self.cfg.hidden, 1]
        self.q1 = DenseNet.create(csizes, substream(seed, "critic1-init"), layernorm=self.cfg.layernorm)
        self.q2 = DenseNet.create(csizes, substream(seed, "critic2-init"), layernorm=self.cfg.layernorm)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        lr = self.cfg.learning_rate
        self.actor_opt = AdamState.for_params(self.actor.net.params(), lr)
        self.q1_opt = AdamState.for_params(self.q1.params(), lr)
        self.q2_opt = AdamState.for_params(self.q2.params(), lr)
        self.log_alpha = np.array([math.log(self.cfg.init_alpha)], dtype=np.float64)
        self.alpha_opt = AdamState.for_params([self.log_alpha], lr)
        self.rng_actor = substream(seed, "actor")
        self.rng_batch = substream(seed, "batch-sampler")
        self.n_updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def critic_target(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        """y = r + gamma (1 - d) [min target Q(s', a') - alpha log pi(a'|s')]."""
        a2, logp2 = sample_action(self.actor, batch["s2"], rng=self.rng_actor)
        x2 = _critic_input(batch["s2"], a2)
        q_t = np.minimum(nnkit.forward(self.q1_target, x2)[:, 0], nnkit.forward(self.q2_target, x2)[:, 0])
        r = batch["r"].astype(np.float64)
        d = batch["d"].astype(np.float64)
        return r + self.cfg.gamma * (1.0 - d) * (q_t - self.alpha * logp2)

    def _step(self, net: DenseNet, opt: AdamState, grads) -> None:
        grads, _ = nnkit.clip_by_global_norm(grads, self.cfg.grad_clip)
        nnkit.adam_step(opt, net.params(), grads, net.param_names())

    def update(self, batch: dict[str, np.ndarray]) -> dict[str, float]:
        n = batch["s"].shape[0]
        if n == 0:
            raise ValidationError("empty batch")
        y = self.critic_target(batch).astype(np.float32)

        x = _critic_input(batch["s"], batch["a"])
        losses = {}
        for key, net, opt in (("critic1", self.q1, self.q1_opt), ("critic2", self.q2, self.q2_opt)):
            q, cache = nnkit.forward_cached(net, x)
            err = q[:, 0] - y
            losses[key] = float(np.mean(err.astype(np.float64) ** 2))
            grads, _ = nnkit.backward_cached(net, cache, (2.0 / n) * err[:, None])
            self._step(net, opt, grads)

        # actor: reparameterized sample through both (freshly updated) critics
        alpha = self.alpha
        mu, log_std, inside, acache = self.actor.heads(batch["s"])
        sigma = np.exp(log_std)
        eps = self.rng_actor.standard_normal(n).astype(np.float32)
        u = sigmoid(mu + sigma * eps)
        logp = squashed_log_prob(eps, log_std, u)
        xa = _critic_input(batch["s"], u)
        q1, c1 = nnkit.forward_cached(self.q1, xa)
        q2, c2 = nnkit.forward_cached(self.q2, xa)
        use1 = (q1[:, 0] <= q2[:, 0]).astype(np.float32)
        q_min = np.minimum(q1[:, 0], q2[:, 0])
        _, gx1 = nnkit.backward_cached(self.q1, c1, use1[:, None], need_params=False)
        _, gx2 = nnkit.backward_cached(self.q2, c2, (1.0 - use1)[:, None], need_params=False)
        dq_du = gx1[:, -1] + gx2[:, -1]
        losses["actor"] = float(np.mean(alpha * logp.astype(np.float64) - q_min))

        du_dx = u * (1.0 - u)
        dlogp_dx = -(1.0 - 2.0 * u) * du_dx / (du_dx + LOGP_EPS)
        dl_dx = alpha * dlogp_dx - dq_du * du_dx
        d_mu = dl_dx / n
        d_logstd = (dl_dx * sigma * eps - alpha) / n * inside
        agrads, _ = nnkit.backward_cached(self.actor.net, acache, np.stack([d_mu, d_logstd], axis=1))
        self._step(self.actor.net, self.actor_opt, agrads)

        # temperature: L = mean(-alpha (log pi + H)), gradient flows to log_alpha only
        lp_h = logp.astype(np.float64) + self.cfg.target_entropy
        losses["alpha"] = float(np.mean(-alpha * lp_h))
        g_alpha = np.array([np.mean(-alpha * lp_h)])
        g_alpha, _ = nnkit.clip_by_global_norm([g_alpha], self.cfg.grad_clip)
        nnkit.adam_step(self.alpha_opt, [self.log_alpha], g_alpha, ["log_alpha"])
        losses["mean_entropy"] = float(-np.mean(logp))

        nnkit.polyak_update(self.q1_target, self.q1, self.cfg.tau)
        nnkit.polyak_update(self.q2_target, self.q2, self.cfg.tau)
        self.n_updates += 1
        for k, v in losses.items():
            if not math.isfinite(v):
                raise ValidationError(f"non-finite {k} loss at update {self.n_updates}: {losses}")
        losses["alpha_value"] = self.alpha
        return losses


# --- policy and rollout -------------------------------------------------------

@dataclass
class Policy:
    actor: Actor
    mu: np.ndarray
    sigma: np.ndarray
    palette: BitPalette
    manifest: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        """Writes ``<path>`` (network checkpoint) and ``<path>.json`` (manifest)."""
        path = Path(path)
        nnkit.save_checkpoint(self.actor.net, path)
        doc = dict(self.manifest)
        doc.update({
            "palette": list(self.palette.bits),
            "mu": [float(x) for x in self.mu],
            "sigma": [float(x) for x in self.sigma],
            "log_std_min": self.actor.log_std_min,
            "log_std_max": self.actor.log_std_max,
        })
        path.with_name(path.name + ".json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        path = Path(path)
        net = nnkit.load_checkpoint(path)
        doc = json.loads(path.with_name(path.name + ".json").read_text())
        actor = Actor(net, doc.get("log_std_min", -5.0), doc.get("log_std_max", 2.0))
        return cls(actor, np.array(doc["mu"]), np.array(doc["sigma"]), BitPalette(tuple(doc["palette"])), doc)


def greedy_rollout(actor: Actor, std_emb: np.ndarray, palette: BitPalette) -> list[int]:
    """Deterministic layer-by-layer decisions with the same context updates
    as training."""
    bits: list[int] = []
    avg, prev = 0.0, None
    for i in range(std_emb.shape[0]):
        u, _ = sample_action(actor, observation(std_emb, i, prev, avg), deterministic=True)
        b = action_to_bits(u, palette)
        bits.append(b)
        avg = (len(bits) - 1) / len(bits) * avg + b / len(bits)
        prev = b
    return bits


def apply_policy(policy: Policy, embeddings, mu=None, sigma=None, palette: BitPalette | None = None,
                 layer_names: Sequence[str] | None = None) -> Allocation:
    """Zero-shot allocation for raw (unstandardized) embeddings, normalized
    with the source model statistics (the policy's by default)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != STATE_DIM:
        raise ShapeError(f"embeddings must be (L x {STATE_DIM}), got {emb.shape}")
    mu = policy.mu if mu is None else mu
    sigma = policy.sigma if sigma is None else sigma
    std = apply_standardization(emb, mu, sigma)
    bits = greedy_rollout(policy.actor, std, palette or policy.palette)
    return Allocation(bits, layer_names=list(layer_names) if layer_names is not None else None)


# --- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    agent: SACAgent
    episodes: list[dict]
    updates: list[dict]
    best_bits: list[int] | None
    best_reward: float
    greedy_bits: list[int]


def train(env: QuantEnv, cfg: SACConfig | None = None, seed: int = 0, max_episodes: int | None = None,
          agent: SACAgent | None = None, log_dir: str | Path | None = None,
          stop: Callable[[dict], bool] | None = None, policy_meta: dict | None = None) -> TrainResult:
    """Warm-up episodes act uniformly at random, then the actor samples.
    Each episode is committed to the replay buffer once its terminal reward
    is known, followed by one gradient update per layer step.

    ``stop(record)`` may end training early after any episode.
    """
    cfg = cfg or SACConfig()
    agent = agent or SACAgent(cfg, seed)
    n_episodes = cfg.max_episodes if max_episodes is None else max_episodes
    warm_rng = substream(seed, "warmup")
    buffer = ReplayBuffer(cfg.buffer_capacity)
    n_updates = cfg.updates_per_episode or env.n_layers
    episodes, updates = [], []
    best_bits, best_R = None, -math.inf
    log_dir = Path(log_dir) if log_dir is not None else None
    ep_fh = up_fh = None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        ep_fh = open(log_dir / "episodes.jsonl", "w")
        up_fh = open(log_dir / "updates.jsonl", "w")
    try:
        for ep in range(n_episodes):
            t0 = time.perf_counter()
            s = env.reset()
            pending: list[Transition] = []
            done = False
            while not done:
                if ep < cfg.warmup_episodes:
                    u = float(warm_rng.uniform(1e-6, 1.0 - 1e-6))
                else:
                    u, _ = sample_action(agent.actor, s, rng=agent.rng_actor)
                s2, r, done, info = env.step(u)
                pending.append(Transition(s, u, r, s2, done))
                s = s2
            for tr in pending:
                buffer.add(tr.s, tr.a, tr.r, tr.s_next, tr.done)
            ep_losses = []
            for _ in range(n_updates):
                if len(buffer) < cfg.batch_size:
                    break
                losses = agent.update(buffer.sample(cfg.batch_size, agent.rng_batch))
                ep_losses.append(losses)
                rec = {"episode": ep, "update": agent.n_updates, **losses}
                updates.append(rec)
                if up_fh:
                    up_fh.write(json.dumps(rec) + "\n")
            if info.R > best_R:
                best_R, best_bits = info.R, list(info.bits)
            record = {
                "episode": ep,
                "bits": list(info.bits),
                "avg_bits": info.avg_bits,
                "ppl": info.ppl,
                "ppl_base": env.ppl_base,
                "r_q": info.r_q,
                "r_b": info.r_b,
                "R": info.R,
                "best_R": best_R,
                "warmup": ep < cfg.warmup_episodes,
                "alpha": agent.alpha,
                "wall_ms": 1e3 * (time.perf_counter() - t0),
            }
            if ep_losses:
                for key in ("critic1", "critic2", "actor", "alpha", "mean_entropy"):
                    record[f"loss_{key}"] = float(np.mean([l[key] for l in ep_losses]))
            episodes.append(record)
            if ep_fh:
                ep_fh.write(json.dumps(record) + "\n")
                ep_fh.flush()
            if log_dir is not None and cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                nnkit.save_checkpoint(agent.actor.net, log_dir / f"actor_ep{ep + 1}.rmpn")
            if stop is not None and stop(record):
                break
    finally:
        if ep_fh:
            ep_fh.close()
            up_fh.close()
    greedy = greedy_rollout(agent.actor, env.emb, env.cfg.palette)
    return TrainResult(agent, episodes, updates, best_bits, best_R, greedy)


def make_policy(result: TrainResult, mu, sigma, palette: BitPalette, meta: dict | None = None) -> Policy:
    manifest = dict(meta or {})
    manifest.update({
        "episodes_trained": len(result.episodes),
        "best_reward": None if result.best_bits is None else result.best_reward,
        "best_bits": result.best_bits,
    })
    return Policy(result.agent.actor, np.asarray(mu), np.asarray(sigma), palette, manifest)
