"""Search loop: sample, evaluate, reward, update; plus exhaustive enumeration as a reference."""

import configparser
import csv
import math
import multiprocessing
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigError, InvalidInputError
from ..network import ArchitectureSpec
from .controller import Controller
from .evaluate import EVALUATORS, evaluate_candidate
from .ppo import PPOConfig, PPOTrainer
from .reward import RewardConfig
from .space import SearchSpace
from .toy import ToyEvaluator

BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass
class SearchConfig:
    """Search settings.

    Attributes:
        space: Search space.
        reward: Reward constants.
        ppo: Controller update settings.
        episodes: Episode budget.
        batch_size: Candidates per episode.
        seed: Seeds controller initialization, sampling and per-candidate seeds.
        workers: Evaluation processes (1 = in-process).
        patience: Stop after this many episodes without a new top-1 reward (None = never).
        top_k: Tracker sizes.
    """

    space: SearchSpace = field(default_factory=SearchSpace)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    episodes: int = 50
    batch_size: int = 40
    seed: int = 0
    workers: int = 1
    patience: int = None
    top_k: tuple = (1, 5, 25)


@dataclass
class SearchResult:
    ranked: list
    trend: list
    episodes_run: int

    @property
    def best(self):
        return self.ranked[0]


def candidate_seed(seed, actions):
    """Seed of one candidate's evaluation; depends only on the search seed and the actions."""
    return int(np.random.SeedSequence([seed, *[int(a) for a in actions]]).generate_state(1)[0])


def _job(args):
    actions, evaluator, reward_cfg, seed = args
    return evaluate_candidate(actions, evaluator, reward_cfg, seed)


def top_k_mean(rewards, k):
    """Mean of the ``k`` largest values, or None when fewer than ``k`` are available."""
    if len(rewards) < k:
        return None
    return float(np.mean(sorted(rewards, reverse=True)[:k]))


def search(cfg, evaluator, on_episode=None):
    """Run the controller-driven search.

    Distinct architectures are evaluated once; repeats reuse the cached result.
    Evaluations of one episode run in parallel when ``cfg.workers > 1`` and
    are all collected before the policy update.

    Args:
        cfg: :class:`SearchConfig`.
        evaluator: Picklable ``evaluator(actions, seed) -> (q, macs)``.
        on_episode: Optional callback receiving each trend record.

    Returns:
        :class:`SearchResult` with every evaluated candidate ranked by
        reward (then lower MACS, then actions) and one trend record per episode.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        policy = Controller(cfg.space.option_counts)
    trainer = PPOTrainer(policy, cfg.ppo)
    gen = torch.Generator().manual_seed(cfg.seed)
    cache = {}
    trend = []
    best, since_best = -math.inf, 0
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, mp_context=multiprocessing.get_context("spawn"))
    try:
        episode = 0
        for episode in range(1, cfg.episodes + 1):
            actions, logp = policy.sample(cfg.batch_size, gen)
            keys = [tuple(a) for a in actions.tolist()]
            todo = list(dict.fromkeys(k for k in keys if k not in cache))
            jobs = [(k, evaluator, cfg.reward, candidate_seed(cfg.seed, k)) for k in todo]
            results = list(pool.map(_job, jobs)) if pool else [_job(j) for j in jobs]
            cache.update(zip(todo, results))
            rewards = [cache[k].reward for k in keys]
            stats = trainer.update(actions, logp, rewards)
            pool_rewards = [c.reward for c in cache.values()]
            record = {"episode": episode, "models_seen": episode * cfg.batch_size,
                      "distinct": len(cache), "mean_reward": float(np.mean(rewards)), "lr": stats["lr"],
                      "failures": sum(not cache[k].ok for k in todo)}
            for k in cfg.top_k:
                record[f"top{k}"] = top_k_mean(pool_rewards, k)
            trend.append(record)
            if on_episode:
                on_episode(record)
            top1 = max(pool_rewards)
            if top1 > best:
                best, since_best = top1, 0
            else:
                since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                break
    finally:
        if pool:
            pool.shutdown()
    ranked = sorted(cache.values(), key=lambda c: c.rank_key())
    return SearchResult(ranked, trend, episode)


def brute_force(space, evaluator, reward_cfg=RewardConfig(), limit=BRUTE_FORCE_LIMIT, seed=0):
    """Evaluate every configuration and return the best :class:`Candidate`.

    Ties are broken by lower MACS, then lexicographic action order.

    Raises:
        InvalidInputError: If the space has more than ``limit`` configurations.
    """
    if space.size > limit:
        raise InvalidInputError(f"space has {space.size} configurations; brute force is limited to {limit}")
    best = None
    for actions in space.all_actions():
        cand = evaluate_candidate(actions, evaluator, reward_cfg, candidate_seed(seed, actions))
        if best is None or cand.rank_key() < best.rank_key():
            best = cand
    return best


TREND_FIELDS = ("episode", "models_seen", "distinct", "top1", "top5", "top25", "mean_reward", "lr", "failures")


def write_ranked(path, ranked, space, limit=None):
    """Write candidates as ``[rank N]`` sections in the architecture config format.

    Failed candidates are skipped. Each section carries the reward, quality
    and MACS as comments so the file stays loadable.
    """
    lines = []
    rank = 0
    for cand in ranked:
        if not cand.ok:
            continue
        rank += 1
        if limit and rank > limit:
            break
        arch = space.decode(cand.actions)
        lines.append(f"[rank {rank}]")
        lines.append(f"# reward = {cand.reward:.10g}  q = {cand.q:.10g}  macs = {cand.macs:.10g}")
        lines.append(f"# actions = {' '.join(map(str, cand.actions))}")
        lines.append(arch.to_text())
    with open(path, "w") as f:
        f.write("\n".join(lines))


def load_ranked(path):
    """Architectures of a ranked-spec file, best first."""
    with open(path) as f:
        text = f.read()
    parts = re.split(r"^\[rank \d+\]\s*$", text, flags=re.M)
    return [ArchitectureSpec.from_text(p) for p in parts[1:]]


def write_trend(path, trend):
    """Write the per-episode trend as CSV (empty cells for unavailable top-k values)."""
    keys = list(TREND_FIELDS)
    for row in trend:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in trend:
            w.writerow({k: "" if row.get(k) is None else row.get(k) for k in keys})


def read_trend(path):
    """Read a trend CSV back into dicts of floats (None for empty cells)."""
    with open(path, newline="") as f:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(f)]


def _names(raw):
    return tuple(re.findall(r"[A-Za-z]\w*", raw))


def _ints(raw):
    return tuple(int(v) for v in raw.strip("[] ").split(",") if v.strip())


def _kernels(raw):
    pairs = re.findall(r"\(\s*(\d+)\s*,\s*(\d+)\s*\)", raw)
    if not pairs:
        raise ValueError("expected kernel pairs like (1,5)")
    return tuple((int(a), int(b)) for a, b in pairs)


def _number(raw):
    return None if raw.lower() == "none" else (int(raw) if re.fullmatch(r"-?\d+", raw) else float(raw))


def _ini_value(raw, key, kind):
    try:
        return kind(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot parse {raw!r}", key=key) from exc


def load_search_config(path, seed=None, workers=None):
    """Read an INI search config.

    Sections: ``[space]`` (types, strides, groups, channels, kernels,
    n_blocks), ``[reward]`` (q0, target_macs, omega_plus, omega_minus),
    ``[search]`` (episodes, batch_size, seed, workers, patience),
    ``[ppo]`` (clip, epochs, lr, baseline_decay, patience, lr_factor,
    entropy_coef) and ``[evaluator]`` (``kind`` = toy | proxy | pesq plus
    keyword arguments of that evaluator). Missing keys keep their defaults.

    Returns:
        ``(SearchConfig, evaluator)``.

    Raises:
        ConfigError: Unreadable file, unknown section/key or bad value.
    """
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise ConfigError(f"cannot read search config {path}", key="path")
    except configparser.Error as exc:
        raise ConfigError(f"malformed search config: {exc}", key="file") from exc
    known = {
        "space": {"types": _names, "strides": _ints, "groups": _ints, "channels": _ints, "kernels": _kernels,
                  "n_blocks": int},
        "reward": {"q0": float, "target_macs": float, "omega_plus": float, "omega_minus": float},
        "search": {"episodes": int, "batch_size": int, "seed": int, "workers": int, "patience": _number},
        "ppo": {"clip": float, "epochs": int, "lr": float, "baseline_decay": float, "patience": int,
                "lr_factor": float, "entropy_coef": float},
    }
    for name in parser.sections():
        if name not in known and name != "evaluator":
            raise ConfigError(f"unknown section [{name}]", key=name)
        for key in parser[name]:
            if name in known and key not in known[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]", key=key)

    def section(name):
        sec = parser[name] if parser.has_section(name) else {}
        return {k: _ini_value(sec[k], k, kind) for k, kind in known[name].items() if k in sec}

    try:
        space = SearchSpace(**section("space"))
        rewards = RewardConfig(**section("reward"))
        ppo = PPOConfig(**section("ppo"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=getattr(exc, "key", "space")) from exc
    cfg = SearchConfig(space=space, reward=rewards, ppo=ppo, **section("search"))
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers

    ev_sec = dict(parser["evaluator"]) if parser.has_section("evaluator") else {}
    kind = ev_sec.pop("kind", "proxy")
    if kind == "toy":
        if ev_sec:
            raise ConfigError(f"toy evaluator takes no options, got {sorted(ev_sec)}", key=sorted(ev_sec)[0])
        evaluator = ToyEvaluator(space)
    elif kind in EVALUATORS:
        kwargs = {k: _ini_value(v, k, _number) for k, v in ev_sec.items()}
        try:
            evaluator = EVALUATORS[kind](space, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad evaluator option: {exc}", key="evaluator") from exc
    else:
        raise ConfigError(f"unknown evaluator kind {kind!r}", key="kind")
    return cfg, evaluator
