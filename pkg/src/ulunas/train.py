"""Training loop: Adam on the hybrid loss with scheduled learning rate and periodic validation."""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import torch

from .errors import TrainingDivergedError
from .losses import LossWeights, hybrid_loss, sisnr_db
from .network import enhance_batch, save_checkpoint
from .schedule import ScheduleConfig, lr_at


@dataclass
class TrainConfig:
    """Training-loop settings.

    Attributes:
        steps: Optimizer steps.
        batch_size: Pairs per step.
        schedule: Learning-rate schedule. With ``plateau_halving`` one
            validation round counts as an epoch.
        validate_every: Steps between validation rounds (0 disables).
        seed: Seeds initialization-independent randomness (batch order).
        grad_clip: Max gradient norm, or None.
        weights: Loss weights.
        log_path: Append-only JSON-lines metric log.
        checkpoint_path: Where to save the final model.
        time_budget: Stop early after this many seconds (None = no limit).
    """

    steps: int = 1000
    batch_size: int = 8
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(warmup_steps=100, total_steps=1000))
    validate_every: int = 100
    seed: int = 0
    grad_clip: float = None
    weights: LossWeights = field(default_factory=LossWeights)
    log_path: str = None
    checkpoint_path: str = None
    time_budget: float = None


@dataclass
class TrainResult:
    log: list
    validations: list
    steps_done: int
    seconds: float

    @property
    def losses(self):
        return [r["loss"] for r in self.log]


def _stack(dataset, indices):
    pairs = [dataset[int(i)] for i in indices]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def evaluate_sisnr(model, pairs, batch_size=8):
    """Mean SI-SNR (dB) of enhanced and of unprocessed inputs over ``pairs``.

    Returns:
        ``(enhanced_db, noisy_db)``.
    """
    was_training = model.training
    model.eval()
    enhanced, noisy_scores = [], []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            noisy, clean = _stack(pairs, range(start, min(start + batch_size, len(pairs))))
            est = enhance_batch(noisy, model)[0]
            for e, x, c in zip(est, noisy, clean):
                enhanced.append(float(sisnr_db(e.double(), c.double())))
                noisy_scores.append(float(sisnr_db(x.double(), c.double())))
    model.train(was_training)
    return sum(enhanced) / len(enhanced), sum(noisy_scores) / len(noisy_scores)


def train(model, dataset, cfg=TrainConfig(), val_set=None):
    """Optimize ``model`` on ``dataset`` pairs.

    Deterministic for a fixed model initialization, dataset and ``cfg.seed``
    when run single-threaded.

    Returns:
        :class:`TrainResult` with per-step losses and validation records.

    Raises:
        TrainingDivergedError: If the loss becomes non-finite.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr_at(0, cfg.schedule))
    model.train()
    log, validations, history = [], [], []
    start = time.monotonic()
    logfile = open(cfg.log_path, "a") if cfg.log_path else None
    step = 0
    try:
        for step in range(cfg.steps):
            if cfg.time_budget is not None and time.monotonic() - start > cfg.time_budget:
                break
            lr = lr_at(step, cfg.schedule, history)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.randint(len(dataset), (cfg.batch_size,), generator=gen)
            noisy, clean = _stack(dataset, idx)
            est = enhance_batch(noisy, model)[0]
            if not torch.isfinite(est.detach()).all():
                raise TrainingDivergedError(f"non-finite model output at step {step} (lr {lr:.3g})")
            loss = hybrid_loss(est, clean, w=cfg.weights)
            if not torch.isfinite(loss.detach()):
                raise TrainingDivergedError(f"non-finite loss {loss.item()} at step {step} (lr {lr:.3g})")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            record = {"step": step, "loss": loss.item(), "lr": lr}
            log.append(record)
            if logfile:
                logfile.write(json.dumps(record) + "\n")
            if val_set is not None and cfg.validate_every and (step + 1) % cfg.validate_every == 0:
                enh, base = evaluate_sisnr(model, val_set)
                history.append(-enh)
                v = {"step": step, "val_sisnr_db": enh, "noisy_sisnr_db": base, "improvement_db": enh - base}
                validations.append(v)
                if logfile:
                    logfile.write(json.dumps(v) + "\n")
                    logfile.flush()
        steps_done = len(log)
    finally:
        if logfile:
            logfile.close()
    result = TrainResult(log, validations, steps_done, time.monotonic() - start)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model,
                        extra={"train_config": _plain(asdict(cfg)), "validations": validations,
                               "final_loss": log[-1]["loss"] if log else math.nan})
    return result


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
