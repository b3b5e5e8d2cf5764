"""Clipped-surrogate policy updates for the controller."""

import logging
import math
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    """Policy-optimization settings.

    Attributes:
        clip: Ratio clipping half-width.
        epochs: Surrogate optimization passes per episode.
        lr: Initial Adam learning rate.
        baseline_decay: Decay of the moving-average reward baseline.
        patience: Episodes without a new best mean reward before the lr is cut.
        lr_factor: Multiplier applied at each cut.
        entropy_coef: Optional entropy bonus (off by default).
    """

    clip: float = 0.2
    epochs: int = 4
    lr: float = 1e-3
    baseline_decay: float = 0.9
    patience: int = 5
    lr_factor: float = 0.5
    entropy_coef: float = 0.0


class PPOTrainer:
    """Owns the optimizer, reward baseline and lr schedule of one controller."""

    def __init__(self, policy, cfg=PPOConfig()):
        self.policy = policy
        self.cfg = cfg
        self.opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
        self.baseline = None
        self.best_mean = -math.inf
        self.stalled = 0
        self.skipped = 0

    @property
    def lr(self):
        return self.opt.param_groups[0]["lr"]

    def advantages(self, rewards):
        """``rewards - baseline`` using the baseline from previous episodes, then refresh it."""
        mean = float(rewards.mean())
        if self.baseline is None:
            self.baseline = mean
        adv = rewards - self.baseline
        d = self.cfg.baseline_decay
        self.baseline = d * self.baseline + (1 - d) * mean
        return adv

    def update(self, actions, old_logp, rewards, advantages=None):
        """One episode's update.

        Args:
            actions: ``[n, nodes]`` sampled actions.
            old_logp: ``[n]`` log-probabilities at sampling time.
            rewards: ``[n]`` rewards.
            advantages: Optional explicit advantages (bypasses the baseline).

        Returns:
            Dict of diagnostics.
        """
        actions = torch.as_tensor(actions, dtype=torch.long)
        old_logp = torch.as_tensor(old_logp, dtype=torch.float32).detach()
        rewards = torch.as_tensor(rewards, dtype=torch.float32)
        adv = self.advantages(rewards) if advantages is None else torch.as_tensor(advantages, dtype=torch.float32)
        c = self.cfg.clip
        applied = 0
        for _ in range(self.cfg.epochs):
            _, logp, entropy = self.policy._run(actions.shape[0], actions=actions)
            ratio = torch.exp(logp - old_logp)
            surrogate = torch.minimum(ratio * adv, ratio.clamp(1 - c, 1 + c) * adv)
            loss = -surrogate.mean() - self.cfg.entropy_coef * entropy.mean()
            self.opt.zero_grad()
            loss.backward()
            grads = [p.grad for p in self.policy.parameters() if p.grad is not None]
            if not all(torch.isfinite(g).all() for g in grads):
                self.skipped += 1
                log.warning("non-finite controller gradient; update skipped")
                continue
            self.opt.step()
            applied += 1
        mean = float(rewards.mean())
        if mean > self.best_mean:
            self.best_mean = mean
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.cfg.patience:
                for group in self.opt.param_groups:
                    group["lr"] *= self.cfg.lr_factor
                self.stalled = 0
        return {"mean_reward": mean, "baseline": self.baseline, "lr": self.lr, "applied_epochs": applied}


def ppo_update(trainer, actions, old_logp, rewards):
    """Functional alias of :meth:`PPOTrainer.update`."""
    return trainer.update(actions, old_logp, rewards)
