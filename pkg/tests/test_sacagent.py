import copy
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from rampkit import nnkit
from rampkit.calibrate import standardize
from rampkit.errors import ShapeError, ValidationError
from rampkit.quantcore import BitPalette
from rampkit.rlenv import EnvConfig, QuantEnv
from rampkit.sacagent import (Actor, Policy, ReplayBuffer, SACAgent, SACConfig, apply_policy, greedy_rollout,
                              make_policy, sample_action, sigmoid, squashed_log_prob, train)

SMALL = SACConfig(hidden=(32, 32), layernorm=(True, False), batch_size=8, warmup_episodes=2)


class TableOracle:
    def __init__(self, base=10.0):
        self.ppl_base = base

    def evaluate(self, bits):
        return SimpleNamespace(ppl=self.ppl_base * (1 + 0.1 * (5 - np.mean(bits))))


def table_env(n_layers=3, seed=0):
    emb = np.random.default_rng(seed).normal(size=(n_layers, 11))
    return QuantEnv(emb, TableOracle(), EnvConfig())


def set_heads(actor, mu, log_std):
    """Zero the output layer so the heads are constant."""
    actor.net.weights[-1][:] = 0
    actor.net.biases[-1][:] = [mu, log_std]


def random_batch(n, rng, done_frac=0.3):
    d = (rng.random(n) < done_frac).astype(np.float32)
    return {"s": rng.normal(size=(n, 11)).astype(np.float32), "a": rng.random(n).astype(np.float32),
            "r": (rng.normal(size=n) * d).astype(np.float32), "s2": rng.normal(size=(n, 11)).astype(np.float32),
            "d": d}


def test_deterministic_zero_mean_gives_half():
    actor = Actor.create(SMALL, np.random.default_rng(0))
    set_heads(actor, 0.0, 0.0)
    u, logp = sample_action(actor, np.ones(11), deterministic=True)
    assert u == 0.5 and logp is None


def test_small_sigma_collapses_to_deterministic():
    actor = Actor.create(SMALL, np.random.default_rng(0))
    set_heads(actor, 0.7, -5.0)
    s = np.random.default_rng(1).normal(size=(200, 11))
    u, _ = sample_action(actor, s, rng=np.random.default_rng(2))
    assert np.max(np.abs(u - sigmoid(0.7))) < 0.05


def test_state_dimension_checked():
    actor = Actor.create(SMALL, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        sample_action(actor, np.ones(10), deterministic=True)
    with pytest.raises(ValidationError):
        sample_action(actor, np.ones(11))


@pytest.mark.parametrize("mu,log_std,eps", [(0.0, 0.0, 0.3), (1.2, -1.0, -0.8), (-0.5, 0.5, 1.1)])
def test_log_prob_matches_numerical_density(mu, log_std, eps):
    sigma = math.exp(log_std)
    u = sigmoid(mu + sigma * eps)

    def cdf(v):
        return 0.5 * (1 + math.erf((math.log(v / (1 - v)) - mu) / (sigma * math.sqrt(2))))

    h = 1e-6
    density = (cdf(u + h) - cdf(u - h)) / (2 * h)
    assert math.exp(squashed_log_prob(eps, log_std, u)) == pytest.approx(density, rel=1e-3)


def test_log_std_is_clamped():
    actor = Actor.create(SMALL, np.random.default_rng(0))
    set_heads(actor, 0.0, 9.0)
    _, log_std, inside, _ = actor.heads(np.zeros((2, 11)))
    assert np.all(log_std == 2.0) and not inside.any()


def test_critic_target_terminal_is_reward():
    agent = SACAgent(SMALL, seed=0)
    rng = np.random.default_rng(0)
    b = random_batch(8, rng)
    b["d"][:] = 1
    np.testing.assert_allclose(agent.critic_target(b), b["r"], rtol=0, atol=0)


def test_critic_target_gamma_zero_is_reward():
    agent = SACAgent(SACConfig(**{**SMALL.__dict__, "gamma": 0.0}), seed=0)
    b = random_batch(8, np.random.default_rng(1))
    np.testing.assert_allclose(agent.critic_target(b), b["r"], atol=0)


def test_critic_target_hand_assembled():
    agent = SACAgent(SMALL, seed=3)
    b = random_batch(8, np.random.default_rng(2))
    b["d"][:] = 0
    rng = copy.deepcopy(agent.rng_actor)
    y = agent.critic_target(b)
    a2, logp2 = sample_action(agent.actor, b["s2"], rng=rng)
    x2 = np.concatenate([b["s2"], a2[:, None].astype(np.float32)], axis=1)
    q = np.minimum(nnkit.forward(agent.q1_target, x2)[:, 0], nnkit.forward(agent.q2_target, x2)[:, 0])
    expected = b["r"] + 0.99 * (q - agent.alpha * logp2)
    np.testing.assert_allclose(y, expected, rtol=1e-6)


def _capture_actor_upstream(agent, monkeypatch):
    seen = {}
    orig = nnkit.backward_cached

    def spy(net, cache, upstream, **kw):
        if net is agent.actor.net:
            seen["up"] = np.array(upstream, dtype=np.float64)
        return orig(net, cache, upstream, **kw)

    monkeypatch.setattr(nnkit, "backward_cached", spy)
    return seen


def test_actor_head_gradients_match_finite_differences(monkeypatch):
    agent = SACAgent(SMALL, seed=5)
    for name in ("q1", "q2", "q1_target", "q2_target"):
        setattr(agent, name, getattr(agent, name).astype(np.float64))
    agent.actor.net = agent.actor.net.astype(np.float64)
    agent._step = lambda net, opt, grads: None  # freeze networks
    b = random_batch(8, np.random.default_rng(4))
    rng = copy.deepcopy(agent.rng_actor)
    seen = _capture_actor_upstream(agent, monkeypatch)
    alpha = agent.alpha
    agent.update(b)

    rng.standard_normal(8)  # consumed by the critic target
    eps = rng.standard_normal(8).astype(np.float32).astype(np.float64)
    mu0, ls0, _, _ = agent.actor.heads(b["s"])

    def loss(mu, ls):
        u = sigmoid(mu + np.exp(ls) * eps)
        logp = squashed_log_prob(eps, ls, u)
        x = np.concatenate([b["s"].astype(np.float64), u[:, None]], axis=1)
        q = np.minimum(nnkit.forward(agent.q1, x)[:, 0], nnkit.forward(agent.q2, x)[:, 0])
        return float(np.mean(alpha * logp - q))

    h = 1e-6
    for i in range(8):
        e = np.zeros(8)
        e[i] = h
        d_mu = (loss(mu0 + e, ls0) - loss(mu0 - e, ls0)) / (2 * h)
        d_ls = (loss(mu0, ls0 + e) - loss(mu0, ls0 - e)) / (2 * h)
        assert seen["up"][i, 0] == pytest.approx(d_mu, rel=1e-3, abs=1e-6)
        assert seen["up"][i, 1] == pytest.approx(d_ls, rel=1e-3, abs=1e-6)


def test_narrow_policy_is_pushed_wider(monkeypatch):
    agent = SACAgent(SMALL, seed=1)
    set_heads(agent.actor, 0.0, -4.0)
    seen = _capture_actor_upstream(agent, monkeypatch)
    agent.update(random_batch(8, np.random.default_rng(0)))
    assert seen["up"][:, 1].sum() < 0


@pytest.mark.parametrize("log_std,direction", [(-4.0, 1), (0.0, -1)])
def test_temperature_tracks_entropy_target(log_std, direction):
    agent = SACAgent(SMALL, seed=2)
    set_heads(agent.actor, 0.0, log_std)
    before = agent.alpha
    agent.update(random_batch(8, np.random.default_rng(0)))
    assert np.sign(agent.alpha - before) == direction


def test_update_reports_losses_and_moves_targets_slowly():
    agent = SACAgent(SMALL, seed=0)
    t_before = [p.copy() for p in agent.q1_target.params()]
    q_before = [p.copy() for p in agent.q1.params()]
    out = agent.update(random_batch(8, np.random.default_rng(0)))
    assert set(out) == {"critic1", "critic2", "actor", "alpha", "mean_entropy", "alpha_value"}
    assert all(math.isfinite(v) for v in out.values())
    for tb, qb, t, q in zip(t_before, q_before, agent.q1_target.params(), agent.q1.params()):
        np.testing.assert_allclose(t, 0.995 * tb + 0.005 * q, rtol=1e-5, atol=1e-7)


def test_update_is_deterministic():
    b = random_batch(8, np.random.default_rng(0))
    a1, a2 = SACAgent(SMALL, seed=7), SACAgent(SMALL, seed=7)
    assert a1.update(b) == a2.update(b)
    for p, q in zip(a1.actor.net.params(), a2.actor.net.params()):
        assert p.tobytes() == q.tobytes()


def test_replay_buffer_ring():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add(np.full(11, i), 0.5, 0.0, np.zeros(11), False)
    assert len(buf) == 3
    assert sorted(buf.s[:, 0].tolist()) == [2.0, 3.0, 4.0]
    sample = buf.sample(3, np.random.default_rng(0))
    assert sample["s"].shape == (3, 11)
    assert set(sample["s"][:, 0].tolist()) <= {2.0, 3.0, 4.0}


def test_replay_buffer_rules():
    buf = ReplayBuffer(4)
    with pytest.raises(ValidationError):
        buf.add(np.zeros(11), 0.5, 1.0, np.zeros(11), False)
    buf.add(np.zeros(11), 0.5, -1.0, np.zeros(11), True)
    with pytest.raises(ValidationError):
        buf.sample(2, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        ReplayBuffer(0)


def test_zero_episode_training_returns_initial_greedy():
    env = table_env()
    res = train(env, SMALL, seed=0, max_episodes=0)
    assert res.episodes == [] and res.updates == [] and res.best_bits is None
    fresh = SACAgent(SMALL, seed=0)
    assert res.greedy_bits == greedy_rollout(fresh.actor, env.emb, env.cfg.palette)


def test_training_logs(tmp_path):
    env = table_env(3)
    res = train(env, SMALL, seed=0, max_episodes=4, log_dir=tmp_path)
    eps = [json.loads(l) for l in (tmp_path / "episodes.jsonl").read_text().splitlines()]
    ups = (tmp_path / "updates.jsonl").read_text().splitlines()
    assert len(eps) == 4
    assert [e["warmup"] for e in eps] == [True, True, False, False]
    # 3 transitions per episode; updates start once 8 are buffered
    assert [sum(1 for u in res.updates if u["episode"] == k) for k in range(4)] == [0, 0, 3, 3]
    assert len(ups) == 6
    best = [e["best_R"] for e in eps]
    assert best == sorted(best) and best[-1] == max(e["R"] for e in eps) == res.best_reward
    assert "loss_critic1" in eps[2] and "loss_critic1" not in eps[0]
    for e in eps:
        assert len(e["bits"]) == 3 and e["ppl_base"] == 10.0


def test_training_is_reproducible():
    r1 = train(table_env(3), SMALL, seed=4, max_episodes=5)
    r2 = train(table_env(3), SMALL, seed=4, max_episodes=5)
    strip = lambda eps: [{k: v for k, v in e.items() if k != "wall_ms"} for e in eps]
    assert strip(r1.episodes) == strip(r2.episodes)
    assert r1.greedy_bits == r2.greedy_bits


def test_stop_callback_ends_early():
    res = train(table_env(2), SMALL, seed=0, max_episodes=10, stop=lambda rec: rec["episode"] == 2)
    assert len(res.episodes) == 3


def test_learns_single_layer_optimum():
    # bits 3/4/5 -> R = -1.0 / -0.5 / -11.25
    cfg = SACConfig(hidden=(32, 32), layernorm=(True, False), batch_size=16, warmup_episodes=10,
                    learning_rate=3e-3, updates_per_episode=4)
    res = train(table_env(1), cfg, seed=0, max_episodes=80)
    assert res.best_bits == [4]
    assert res.greedy_bits == [4]


def test_apply_policy_matches_greedy_on_standardized(tmp_path):
    env = table_env(5)
    raw = np.random.default_rng(9).normal(size=(5, 11))
    std, mu, sigma = standardize(raw)
    res = train(QuantEnv(std, TableOracle()), SMALL, seed=0, max_episodes=3)
    policy = make_policy(res, mu, sigma, BitPalette(), {"config_hash": "abc"})
    alloc = apply_policy(policy, raw)
    assert alloc.bits == greedy_rollout(policy.actor, std, BitPalette())
    path = tmp_path / "p.rmpn"
    policy.save(path)
    back = Policy.load(path)
    assert back.manifest["config_hash"] == "abc"
    assert apply_policy(back, raw).bits == alloc.bits
    np.testing.assert_array_equal(back.mu, mu)


def test_apply_policy_handles_longer_models():
    agent = SACAgent(SMALL, seed=0)
    raw = np.random.default_rng(0).normal(size=(14, 11))
    _, mu, sigma = standardize(raw)
    policy = Policy(agent.actor, mu, sigma, BitPalette())
    deep = np.random.default_rng(1).normal(size=(28, 11))
    alloc = apply_policy(policy, deep)
    assert len(alloc.bits) == 28 and set(alloc.bits) <= {3, 4, 5}
    with pytest.raises(ShapeError):
        apply_policy(policy, deep[:, :10])


def test_config_json_round_trip():
    assert SACConfig.from_json(json.loads(json.dumps(SMALL.to_json()))) == SMALL
