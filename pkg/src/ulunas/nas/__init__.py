"""Reinforcement-learning architecture search over the block zoo."""

from .controller import Controller, sample
from .evaluate import EVALUATORS, Candidate, PesqEvaluator, ProxyEvaluator, evaluate_candidate
from .ppo import PPOConfig, PPOTrainer, ppo_update
from .reward import RewardConfig, reward
from .search import (SearchConfig, SearchResult, brute_force, load_ranked, load_search_config, read_trend,
                     search, write_ranked, write_trend)
from .space import SearchSpace, decode, encode
from .toy import ToyEvaluator, toy_space

__all__ = [
    "Controller", "sample", "EVALUATORS", "Candidate", "PesqEvaluator", "ProxyEvaluator", "evaluate_candidate",
    "PPOConfig", "PPOTrainer", "ppo_update", "RewardConfig", "reward", "SearchConfig", "SearchResult",
    "brute_force", "load_ranked", "load_search_config", "read_trend", "search", "write_ranked", "write_trend",
    "SearchSpace", "decode", "encode", "ToyEvaluator", "toy_space",
]
