"""Candidate evaluators returning ``(quality, MACS/s)`` for an action sequence.

Evaluators are picklable callables ``evaluator(actions, seed) -> (q, macs)`` so
they can run in worker processes. :func:`evaluate_candidate` wraps any of them,
computes the reward and turns failures into zero-reward flagged results.
"""

import math
from dataclasses import dataclass

from ..complexity import count_macs
from ..data import SyntheticPairs
from ..errors import InvalidInputError
from ..network import assemble, enhance
from ..schedule import ScheduleConfig
from ..train import TrainConfig, train
from .reward import RewardConfig, reward


@dataclass
class Candidate:
    actions: tuple
    q: float
    macs: float
    reward: float
    ok: bool = True
    error: str = ""

    def rank_key(self):
        """Higher reward first, then lower MACS, then lexicographic actions."""
        macs = self.macs if self.ok and math.isfinite(self.macs) else math.inf
        return (-self.reward, macs, tuple(self.actions))


class ProxyEvaluator:
    """Short training on the synthetic corpus; quality from held-out SI-SNR gain.

    The run is split into ``epochs`` equal parts with a validation round after
    each; the mean SI-SNR improvement over the last ``val_rounds`` rounds is
    mapped to ``q = min(3, 1 + max(0, gain_db) / 10)``.
    """

    def __init__(self, space, train_steps=60, epochs=5, val_rounds=3, batch_size=4, seconds=1.0,
                 train_items=64, val_items=8, lr=3e-3, corpus_seed=0):
        if val_rounds > epochs:
            raise InvalidInputError("val_rounds cannot exceed epochs")
        self.space = space
        self.train_steps = train_steps
        self.epochs = epochs
        self.val_rounds = val_rounds
        self.batch_size = batch_size
        self.seconds = seconds
        self.train_items = train_items
        self.val_items = val_items
        self.lr = lr
        self.corpus_seed = corpus_seed

    def fit(self, actions, seed):
        """Build and briefly train the candidate.

        Returns:
            ``(model, macs, train_result)``.
        """
        arch = self.space.decode(actions)
        model = assemble(arch, seed=seed)
        macs = count_macs(model)
        per_epoch = max(1, self.train_steps // self.epochs)
        steps = per_epoch * self.epochs
        cfg = TrainConfig(steps=steps, batch_size=self.batch_size, validate_every=per_epoch, seed=seed,
                          schedule=ScheduleConfig(warmup_steps=max(1, steps // 10), total_steps=steps + 1,
                                                  lr_start=self.lr / 100, lr_peak=self.lr))
        ds = SyntheticPairs(self.train_items, self.seconds, seed=self.corpus_seed)
        val = SyntheticPairs(self.val_items, self.seconds, seed=self.corpus_seed + 1)
        result = train(model, ds, cfg, val)
        return model, macs, result

    def __call__(self, actions, seed):
        _, macs, result = self.fit(actions, seed)
        gains = [v["improvement_db"] for v in result.validations[-self.val_rounds:]]
        gain = sum(gains) / len(gains)
        return min(3.0, 1.0 + max(0.0, gain) / 10.0), macs


class PesqEvaluator(ProxyEvaluator):
    """Like :class:`ProxyEvaluator` but scoring mean wide-band PESQ; needs the ``pesq`` package."""

    def __init__(self, space, **kwargs):
        try:
            import pesq  # noqa: F401
        except ImportError as exc:
            raise InvalidInputError("PESQ evaluator requested but the 'pesq' package is not installed") from exc
        super().__init__(space, **kwargs)

    def __call__(self, actions, seed):
        import numpy as np
        from pesq import pesq

        model, macs, _ = self.fit(actions, seed)
        model.eval()
        val = SyntheticPairs(self.val_items, self.seconds, seed=self.corpus_seed + 1)
        scores = []
        for i in range(len(val)):
            noisy, clean = val[i]
            scores.append(pesq(16000, clean.numpy(), enhance(noisy, model).numpy(), "wb"))
        return float(np.mean(scores)), macs


EVALUATORS = {"proxy": ProxyEvaluator, "pesq": PesqEvaluator}


def evaluate_candidate(actions, evaluator, reward_cfg=RewardConfig(), seed=0):
    """Score one candidate; any failure yields ``q = q0``, zero reward and ``ok = False``."""
    actions = tuple(int(a) for a in actions)
    try:
        q, macs = evaluator(actions, seed)
        r = reward(q, macs, reward_cfg)
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward for q={q}, macs={macs}")
        return Candidate(actions, float(q), float(macs), float(r))
    except Exception as exc:  # failures are per candidate by design
        return Candidate(actions, reward_cfg.q0, math.nan, 0.0, ok=False, error=f"{type(exc).__name__}: {exc}")
