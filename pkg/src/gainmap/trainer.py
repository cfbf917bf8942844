"""Episodic cross-environment training.

Each step samples a batch of environments (with replacement), resamples a
fresh context/target split per environment, accumulates episode-loss
gradients, and applies one adaptive-moment update.  Deterministic for a fixed
seed in single-threaded execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import Episode, MeasurementSet, split_episode
from .model import ModelConfig, ModelParams, episode_features, loss_from_features

__all__ = ["TrainConfig", "TrainingDiverged", "Adam", "train", "validate", "standardize_from"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_episodes: int = 4
    learning_rate: float = 3e-4
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    context_min: int = 4
    context_max: int = 256
    target_cap: int = 8
    lr_decay: str = "none"  # "none" or "cosine" (to 10% of peak by the last step)
    val_every: int = 0  # 0 disables validation during training
    val_context: int = 100
    resample_episodes: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_episodes < 1:
            raise ValueError("steps must be >= 0 and batch_episodes >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if not 1 <= self.context_min <= self.context_max:
            raise ValueError("need 1 <= context_min <= context_max")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")


class Adam:
    """Adaptive-moment optimizer with linear warmup and global-norm clipping."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(t.value) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.value) for name, t in params.items()}

    def _lr(self) -> float:
        cfg = self.config
        warm = min(1.0, self.step_count / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
        decay = 1.0
        if cfg.lr_decay == "cosine" and cfg.steps > cfg.warmup_steps:
            progress = (self.step_count - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
            progress = min(max(progress, 0.0), 1.0)
            decay = 0.1 + 0.45 * (1.0 + math.cos(math.pi * progress))
        return cfg.learning_rate * warm * decay

    def apply(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        self.step_count += 1
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = cfg.grad_clip / norm if (cfg.grad_clip > 0 and norm > cfg.grad_clip) else 1.0
        lr = self._lr()
        b1, b2 = cfg.beta1, cfg.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, tensor in self.params.items():
            g = grads[name] * scale
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            tensor.value = tensor.value - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def standardize_from(env_sets: list[MeasurementSet]) -> tuple[float, float]:
    """Mean and standard deviation of all gains in the training corpus."""
    gains = np.concatenate([s.gains for s in env_sets])
    std = float(gains.std())
    return float(gains.mean()), std if std > 0 else 1.0


def _episode_grads(
    params: ModelParams, episode: Episode, config: ModelConfig
) -> tuple[float, dict[str, np.ndarray]]:
    params.zero_grads()
    feats, targets_std = episode_features(episode, params)
    with ad.Tape() as tape:
        loss = loss_from_features(params, feats, targets_std, config)
    ad.backward(tape, loss)
    return float(loss.value), {name: t.grad_or_zeros().copy() for name, t in params.items()}


def _sample_episode(
    mset: MeasurementSet, rng: np.random.Generator, cfg: TrainConfig, fixed_seed: int | None = None
) -> Episode:
    hi = min(cfg.context_max, len(mset) - 1)
    lo = min(cfg.context_min, hi)
    if fixed_seed is not None:
        context_size = lo + (hi - lo) // 2
        return split_episode(mset, fixed_seed, context_size, target_cap=cfg.target_cap)
    context_size = int(rng.integers(lo, hi + 1))
    return split_episode(mset, int(rng.integers(0, 2**31 - 1)), context_size, target_cap=cfg.target_cap)


def train(
    params: ModelParams,
    env_provider: list[MeasurementSet],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    val_sets: list[MeasurementSet] | None = None,
    on_step=None,
) -> tuple[ModelParams, list[dict]]:
    """Optimize ``params`` in place; returns it plus a per-step loss trace.

    ``env_provider`` is the training corpus, one measurement set per
    environment (distinct env ids).  Gain standardization constants are set
    from the corpus before the first step unless already non-default.
    """
    model_config = model_config or params.config
    if not env_provider:
        raise ValueError("env_provider is empty")
    ids = [s.env_id for s in env_provider]
    if len(set(ids)) != len(ids):
        raise ValueError("env_provider must have distinct env ids")
    if params.gain_mean == 0.0 and params.gain_std == 1.0:
        params.set_standardization(*standardize_from(env_provider))

    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x7A11]))
    optimizer = Adam(params, config)
    trace: list[dict] = []
    for step in range(config.steps):
        total = {name: np.zeros_like(t.value) for name, t in params.items()}
        batch_loss = 0.0
        for _ in range(config.batch_episodes):
            mset = env_provider[int(rng.integers(0, len(env_provider)))]
            episode = _sample_episode(
                mset, rng, config, fixed_seed=None if config.resample_episodes else config.seed
            )
            loss_value, grads = _episode_grads(params, episode, model_config)
            if not math.isfinite(loss_value):
                raise TrainingDiverged(step, loss_value)
            batch_loss += loss_value
            for name in total:
                total[name] += grads[name]
        mean_grads = {name: g / config.batch_episodes for name, g in total.items()}
        optimizer.apply(mean_grads)
        row = {"step": step, "train_loss": batch_loss / config.batch_episodes, "val_loss": ""}
        if val_sets and config.val_every and (step + 1) % config.val_every == 0:
            row["val_loss"] = validate(params, val_sets, config, model_config)
        trace.append(row)
        if on_step is not None:
            on_step(row, params)
    return params, trace


def validate(
    params: ModelParams,
    held_out: list[MeasurementSet],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
) -> float:
    """Mean episode loss over held-out environments with per-environment fixed
    splits; never mutates parameters."""
    if not held_out:
        raise ValueError("held_out environment list is empty")
    model_config = model_config or params.config
    losses = []
    for mset in held_out:
        context_size = min(config.val_context, len(mset) - 1)
        split_seed = (int(config.seed) * 1_000_003 + mset.env_id) % 2**31
        episode = split_episode(mset, split_seed, context_size, target_cap=config.target_cap)
        feats, targets_std = episode_features(episode, params)
        loss = loss_from_features(params, feats, targets_std, model_config)
        losses.append(float(loss.value))
    return float(np.mean(losses))
