"""SGD with Nesterov momentum, gradient-norm clipping and LR schedules."""

from __future__ import annotations

import numpy as np

from .pooling import project_constraints


def clip_total_norm(grads: list, max_norm: float):
    """Scale all grads by max_norm/||g|| when the global L2 norm exceeds it.

    Returns (grads, global_norm_before_clipping).  Direction is preserved.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for g in grads:
        sq += float(np.vdot(g, g))
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class NesterovSGD:
    """v <- mu*v - lr*g ; theta <- theta + mu*v - lr*g (lookahead form).

    With mu=0 this reduces to vanilla SGD.  If `constrained_units` is given,
    their positivity constraints are re-projected after every step.
    """

    def __init__(self, params: list, lr: float, momentum: float = 0.9,
                 clip_norm: float | None = 10.0, constrained_units=()):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.constrained_units = list(constrained_units)
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.last_grad_norm = float("nan")

    def step(self):
        grads = []
        for p in self.params:
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad)
        if self.clip_norm is not None:
            grads, self.last_grad_norm = clip_total_norm(grads, self.clip_norm)
        mu, lr = self.momentum, self.lr
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= mu
            v -= (lr * g).astype(v.dtype)
            p.data += mu * v - (lr * g).astype(v.dtype)
        for unit in self.constrained_units:
            project_constraints(unit)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class StepSchedule:
    """Multiply lr by `factor` at each milestone iteration (cumulative counts)."""

    def __init__(self, lr0: float, milestones: list, factor: float = 0.1):
        if not 0 < factor < 1:
            raise ValueError("factor must be in (0,1)")
        if list(milestones) != sorted(set(milestones)):
            raise ValueError("milestones must be strictly increasing")
        self.lr0 = lr0
        self.milestones = list(milestones)
        self.factor = factor

    def lr_at(self, iteration: int) -> float:
        drops = sum(1 for m in self.milestones if iteration >= m)
        return self.lr0 * self.factor ** drops


class PlateauSchedule:
    """Drop lr by `factor` when the validation metric stops improving.

    "Stopped improving" means no new strict best for `patience` validation
    rounds.  mode='max' treats larger as better (accuracy), mode='min'
    smaller (error/MAE).  lr never drops below min_lr.
    """

    def __init__(self, lr0: float, patience: int = 1, factor: float = 0.1,
                 min_lr: float = 1e-6, mode: str = "max"):
        if not 0 < factor < 1:
            raise ValueError("factor must be in (0,1)")
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.mode = mode
        self.best = None
        self.stale = 0

    def update(self, metric: float) -> float:
        better = (self.best is None
                  or (self.mode == "max" and metric > self.best)
                  or (self.mode == "min" and metric < self.best))
        if better:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr
