import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ulunas.blocks import BlockSpec
from ulunas.complexity import count_macs
from ulunas.errors import ConfigError, InvalidInputError
from ulunas.nas import (Controller, PPOConfig, PPOTrainer, ProxyEvaluator, RewardConfig, SearchConfig, SearchSpace,
                        ToyEvaluator, brute_force, decode, encode, evaluate_candidate, load_ranked,
                        load_search_config, ppo_update, read_trend, reward, sample, search, toy_space, write_ranked,
                        write_trend)
from ulunas.network import ArchitectureSpec, assemble

SPACE = SearchSpace()
SEARCHED_ARCH = ArchitectureSpec.from_lists(["XConv", "XMB", "XDWS", "XMB", "XDWS"], [2, 2, 1, 1, 1], [1, 2, 2, 2, 2],
                                     [12, 24, 24, 32, 16], [(3, 3), (2, 3), (2, 3), (1, 5), (1, 5)])


# ----- encoding -----

def test_all_zero_actions():
    arch = decode([0] * 25)
    assert arch.encoder_blocks == (BlockSpec("XConv", 1, 1, 12, (1, 5)),) * 5


def test_space_size():
    assert SPACE.size == (3 * 2 * 2 * 7 * 4) ** 5
    assert len(SPACE.option_counts) == 25


def test_round_trip_random_specs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        actions = [int(rng.integers(n)) for n in SPACE.option_counts]
        assert encode(decode(actions)) == actions


@given(st.lists(st.integers(0, 10 ** 6), min_size=25, max_size=25))
def test_decode_encode_bijection(raw):
    actions = [r % n for r, n in zip(raw, SPACE.option_counts)]
    arch = decode(actions)
    assert decode(encode(arch)) == arch


def test_searched_kernels_not_in_space():
    with pytest.raises(InvalidInputError, match="kernel"):
        encode(SEARCHED_ARCH)
    patched = ArchitectureSpec.from_lists(SEARCHED_ARCH.types, [2, 2, 1, 1, 1], [1, 2, 2, 2, 2], [12, 24, 24, 32, 16],
                                          [(3, 3), (2, 5), (2, 5), (1, 5), (1, 5)])
    assert decode(encode(patched)) == patched


def test_decode_rejects_bad_actions():
    with pytest.raises(InvalidInputError):
        decode([0] * 24)
    with pytest.raises(InvalidInputError):
        decode([0] * 24 + [4])


# ----- controller -----

def test_uniform_initial_marginals():
    from scipy import stats

    policy = Controller(SPACE.option_counts)
    actions, _ = policy.sample(10000, torch.Generator().manual_seed(0))
    pvalues = []
    for node, n in enumerate(SPACE.option_counts):
        counts = np.bincount(actions[:, node].numpy(), minlength=n)
        # every cell within 3 sigma after a Bonferroni correction over the 25 nodes' cells
        sigma = math.sqrt(10000 * (1 / n) * (1 - 1 / n))
        z = stats.norm.isf(0.0027 / 2 / sum(SPACE.option_counts))
        assert np.all(np.abs(counts - 10000 / n) < z * sigma)
        pvalues.append(stats.chisquare(counts).pvalue)
    assert min(pvalues) > 0.01 / len(pvalues)
    # node-level p-values of a uniform sampler are themselves uniform
    assert stats.kstest(pvalues, "uniform").pvalue > 0.01


def test_sampling_seeded():
    policy = Controller(SPACE.option_counts)
    a = sample(policy, 20, torch.Generator().manual_seed(3))
    b = sample(policy, 20, torch.Generator().manual_seed(3))
    assert a == b


def test_degenerate_logits_are_deterministic():
    policy = Controller([3, 4])
    with torch.no_grad():
        for head, keep in zip(policy.heads, (2, 1)):
            head.bias.fill_(-math.inf)
            head.bias[keep] = 0.0
    actions, logp = policy.sample(50)
    assert (actions[:, 0] == 2).all() and (actions[:, 1] == 1).all()
    assert torch.allclose(logp, torch.zeros(50))


def test_log_prob_matches_sampling():
    torch.manual_seed(0)
    policy = Controller([3, 2, 4])
    with torch.no_grad():
        for p in policy.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    actions, logp = policy.sample(30)
    assert torch.allclose(policy.log_prob(actions), logp, atol=1e-6)
    probs = policy.node_probs(actions)
    assert all(torch.allclose(p.sum(-1), torch.ones(30)) for p in probs)


# ----- reward -----

def mp_reward(q, m, cfg):
    mpmath.mp.dps = 50
    q, m = mpmath.mpf(q), mpmath.mpf(m)
    omega = mpmath.mpf(cfg.omega_plus) if m > cfg.target_macs else mpmath.mpf(cfg.omega_minus)
    return (q - cfg.q0) * mpmath.power(m / mpmath.mpf(cfg.target_macs), omega)


def test_reward_examples():
    assert reward(2.0, 30e6) == 1.0
    for m in (1e6, 30e6, 1e9):
        assert reward(1.0, m) == 0.0
    assert abs(reward(2.0, 60e6) - 2 ** -0.15) < 1e-15
    assert abs(reward(2.0, 60e6) - 0.9013) < 1e-4


def test_reward_high_precision_grid():
    cfg = RewardConfig()
    qs = np.linspace(1.0, 3.0, 10)
    ms = np.concatenate([np.linspace(5e6, 30e6, 5), np.linspace(31e6, 120e6, 5)])
    for q in qs:
        for m in ms:
            assert abs(reward(q, m, cfg) - float(mp_reward(q, m, cfg))) <= 1e-12


@settings(max_examples=60)
@given(q=st.floats(1.0, 3.0), m1=st.floats(1e6, 2e8), m2=st.floats(1e6, 2e8), dq=st.floats(1e-6, 1))
def test_reward_monotonicity(q, m1, m2, dq):
    cfg = RewardConfig()
    assert reward(q + dq, m1) > reward(q, m1)
    lo, hi = sorted((m1, m2))
    if q > cfg.q0 and lo > cfg.target_macs and hi > lo:
        assert reward(q, hi) < reward(q, lo)
    if hi <= cfg.target_macs:
        assert reward(q, hi) == reward(q, lo)


def test_reward_continuous_at_target():
    cfg = RewardConfig()
    for q in (1.5, 2.0, 3.0):
        at = reward(q, cfg.target_macs)
        assert abs(reward(q, cfg.target_macs * (1 + 1e-12)) - at) < 1e-11
        assert abs(reward(q, cfg.target_macs * (1 - 1e-12)) - at) < 1e-11


def test_reward_rejects_nonpositive_macs():
    with pytest.raises(InvalidInputError):
        reward(2.0, 0.0)


# ----- candidate evaluation -----

def tiny_proxy():
    return ProxyEvaluator(SPACE, train_steps=5, epochs=5, val_rounds=3, batch_size=2, train_items=4, val_items=2)


def test_proxy_evaluation_deterministic():
    actions = encode(ArchitectureSpec.from_lists(["XDWS"] * 5, [2, 2, 1, 1, 1], [1] * 5, [12] * 5, [(1, 5)] * 5))
    ev = tiny_proxy()
    a = evaluate_candidate(actions, ev, seed=7)
    b = evaluate_candidate(actions, ev, seed=7)
    assert a == b and a.ok
    assert a.macs == count_macs(assemble(SPACE.decode(actions)))
    assert 1.0 <= a.q <= 3.0


def test_toy_evaluator_is_analytic():
    from ulunas.nas.toy import toy_macs, toy_quality

    space = toy_space()
    ev = ToyEvaluator(space)
    actions = (1, 0, 0, 2, 0, 2, 1, 0, 0, 0)
    blocks = space.decode_blocks(actions)
    assert ev(actions, 0) == (toy_quality(blocks), toy_macs(blocks))
    cand = evaluate_candidate(actions, ev)
    assert cand.reward == reward(*ev(actions, 0))


def test_failed_candidate_gets_zero_reward():
    def broken(actions, seed):
        raise RuntimeError("boom")

    cand = evaluate_candidate((0, 1), broken)
    assert not cand.ok and cand.reward == 0.0 and "boom" in cand.error


# ----- PPO -----

def test_positive_advantage_raises_likelihood():
    torch.manual_seed(0)
    policy = Controller([3, 4, 2])
    trainer = PPOTrainer(policy)
    actions, logp = policy.sample(1)
    before = policy.log_prob(actions).item()
    trainer.update(actions, logp, [1.0], advantages=[1.0])
    assert policy.log_prob(actions).item() > before


def test_zero_advantage_keeps_parameters():
    torch.manual_seed(0)
    policy = Controller([3, 4, 2])
    trainer = PPOTrainer(policy)
    params = [p.detach().clone() for p in policy.parameters()]
    actions, logp = policy.sample(8)
    trainer.update(actions, logp, [0.5] * 8, advantages=[0.0] * 8)
    assert all(torch.allclose(a, b, atol=1e-7) for a, b in zip(params, policy.parameters()))


def test_sampling_does_not_change_likelihood():
    policy = Controller([3, 4])
    fixed = torch.tensor([[1, 2]])
    before = policy.log_prob(fixed).item()
    policy.sample(100)
    assert policy.log_prob(fixed).item() == before


def test_bandit_concentrates():
    torch.manual_seed(0)
    policy = Controller([2])
    trainer = PPOTrainer(policy, PPOConfig(lr=1e-2))
    gen = torch.Generator().manual_seed(0)
    for update in range(200):
        actions, logp = policy.sample(8, gen)
        ppo_update(trainer, actions, logp, (actions[:, 0] == 1).float())
        if policy.node_probs(actions[:1])[0][0, 1] > 0.95:
            break
    assert float(policy.node_probs(torch.zeros(1, 1, dtype=torch.long))[0][0, 1]) > 0.95


def test_lr_halves_on_stalled_mean_reward():
    policy = Controller([2])
    trainer = PPOTrainer(policy, PPOConfig(patience=2, lr=1e-3))
    actions = torch.zeros(4, 1, dtype=torch.long)
    logp = policy.log_prob(actions).detach()
    for _ in range(3):
        trainer.update(actions, logp, [1.0] * 4)
    assert trainer.lr == pytest.approx(5e-4)


# ----- search -----

def test_brute_force_toy_optimum():
    space = toy_space()
    ev = ToyEvaluator(space)
    best = brute_force(space, ev)
    rewards = [evaluate_candidate(a, ev).reward for a in space.all_actions()]
    assert best.reward == max(rewards)


def test_brute_force_singleton_and_ties():
    space = SearchSpace(types=("XDWS",), strides=(1,), groups=(1,), channels=(16,), kernels=((1, 5),), n_blocks=1)
    only = brute_force(space, ToyEvaluator(space))
    assert only.actions == (0, 0, 0, 0, 0)
    tied = SearchSpace(types=("XDWS",), strides=(1,), groups=(1,), channels=(16, 20), kernels=((1, 5), (3, 3)),
                       n_blocks=1)
    flat = lambda actions, seed: (2.0, 1e6 * (1 + actions[3]))
    assert brute_force(tied, flat).actions == (0, 0, 0, 0, 0)
    same_macs = lambda actions, seed: (2.0, 1e6)
    assert brute_force(tied, same_macs).actions == (0, 0, 0, 0, 0)
    reversed_macs = lambda actions, seed: (2.0, 1e6 * (2 - actions[4]))
    assert brute_force(tied, reversed_macs).actions == (0, 0, 0, 0, 1)


def test_brute_force_refuses_large_space():
    with pytest.raises(InvalidInputError, match=str(SPACE.size)):
        brute_force(SPACE, ToyEvaluator(SPACE))


def test_search_trackers_nondecreasing():
    space = toy_space()
    result = search(SearchConfig(space=space, episodes=15, batch_size=8, seed=1), ToyEvaluator(space))
    for k in ("top1", "top5", "top25"):
        vals = [row[k] for row in result.trend if row[k] is not None]
        assert vals and all(b >= a for a, b in zip(vals, vals[1:]))
    assert [row["models_seen"] for row in result.trend] == [8 * (i + 1) for i in range(15)]
    assert result.ranked == sorted(result.ranked, key=lambda c: c.rank_key())


def test_large_penalty_keeps_budget():
    space = toy_space()
    cfg = RewardConfig(target_macs=15e6, omega_plus=-1e3)
    result = search(SearchConfig(space=space, reward=cfg, episodes=30, batch_size=8, seed=0), ToyEvaluator(space))
    assert result.best.macs <= cfg.target_macs


def test_search_seeded_and_worker_independent():
    space = toy_space()
    ev = ToyEvaluator(space)
    a = search(SearchConfig(space=space, episodes=4, batch_size=8, seed=2), ev)
    b = search(SearchConfig(space=space, episodes=4, batch_size=8, seed=2, workers=2), ev)
    assert a.ranked == b.ranked and a.trend == b.trend


def test_ranked_and_trend_files(tmp_path):
    space = toy_space()
    result = search(SearchConfig(space=space, episodes=3, batch_size=8), ToyEvaluator(space))
    write_ranked(tmp_path / "r.cfg", result.ranked, space)
    archs = load_ranked(tmp_path / "r.cfg")
    assert archs[0] == space.decode(result.best.actions) and len(archs) == len(result.ranked)
    write_trend(tmp_path / "t.csv", result.trend)
    rows = read_trend(tmp_path / "t.csv")
    assert [r["top1"] for r in rows] == [t["top1"] for t in result.trend]


def test_search_config_file(tmp_path):
    from ulunas.cli import packaged_config

    cfg, ev = load_search_config(packaged_config("toy_search.ini"), seed=4)
    assert cfg.space.size == 324 and cfg.seed == 4 and cfg.batch_size == 8 and isinstance(ev, ToyEvaluator)
    cfg, ev = load_search_config(packaged_config("search.ini"))
    assert cfg.space == SearchSpace() and isinstance(ev, ProxyEvaluator) and cfg.batch_size == 40
    (tmp_path / "bad.ini").write_text("[reward]\nq0 = 1\nbogus = 2\n")
    with pytest.raises(ConfigError) as info:
        load_search_config(tmp_path / "bad.ini")
    assert info.value.key == "bogus"
    (tmp_path / "bad2.ini").write_text("[space]\nchannels = 12, x\n")
    with pytest.raises(ConfigError) as info:
        load_search_config(tmp_path / "bad2.ini")
    assert info.value.key == "channels"
