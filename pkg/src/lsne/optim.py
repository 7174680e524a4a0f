"""Training configuration and the gradient-dropout momentum update."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MOMENTUM_RULES = ("paper", "conventional")


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for low-shot expansion training.

    ``momentum_rule="paper"`` accumulates ``g <- g + momentum * grad`` (no decay);
    ``"conventional"`` uses ``g <- momentum * g + grad``.
    """

    lr: float = 0.01
    momentum: float = 0.9
    grad_dropout_p: float = 0.5
    batch_per_class: int = 16
    iters: int = 2000
    aug_per_sample: int = 100
    aug_scale: float = 0.1
    seed: int = 0
    momentum_rule: str = "paper"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.grad_dropout_p <= 1:
            raise ValueError("grad_dropout_p must be in (0, 1]")
        if self.batch_per_class < 1:
            raise ValueError("batch_per_class must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.aug_per_sample < 0 or self.aug_scale < 0:
            raise ValueError("augmentation settings must be non-negative")
        if self.momentum_rule not in MOMENTUM_RULES:
            raise ValueError(f"momentum_rule must be one of {MOMENTUM_RULES}")

    def with_(self, **changes):
        return replace(self, **changes)


def base_train_config(**changes):
    """Defaults for from-scratch base training: conventional momentum, no dropout."""
    cfg = TrainConfig(lr=0.01, momentum=0.9, grad_dropout_p=1.0, batch_per_class=16,
                      iters=1500, aug_per_sample=0, aug_scale=0.0, momentum_rule="conventional")
    return cfg.with_(**changes)


@dataclass
class OptimizerState:
    g: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def draw_masks(params, p, rng):
    """Per-scalar Bernoulli(p) keep-masks, drawn in sorted parameter order."""
    return {k: rng.random(params[k].shape) < p for k in sorted(params)}


def sgd_step(params, state, grads, cfg, rng=None, *, trainable=None, masks=None, masked=True):
    """One gradient-dropout momentum update, applied in place.

    The accumulator follows ``cfg.momentum_rule``; a fresh Bernoulli mask is
    drawn from ``rng`` unless ``masks`` is given or ``masked`` is False.
    Entries outside ``trainable`` are never written.
    Returns ``(params, state)``.
    """
    mu = cfg.momentum
    for k, grad in grads.items():
        if cfg.momentum_rule == "paper":
            state.g[k] += mu * grad
        else:
            state.g[k] *= mu
            state.g[k] += grad
    if masked and masks is None:
        masks = draw_masks(params, cfg.grad_dropout_p, rng)
    for k in grads:
        update = cfg.lr * state.g[k]
        if masked:
            update = update * masks[k]
        where = True if trainable is None else trainable[k]
        np.subtract(params[k], update, out=params[k], where=where)
    state.step += 1
    return params, state


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)

    def record(self, it, loss, verbose):
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {it}")
        self.losses.append(loss)
        if verbose and (it + 1) % 100 == 0:
            window = self.losses[-100:]
            print(f"iter {it + 1} loss {sum(window) / len(window):.6f}", flush=True)
