"""Adadelta and SGD-with-momentum over dicts of numpy parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdadeltaState:
    eg2: np.ndarray  # running average of squared gradients
    edx2: np.ndarray  # running average of squared updates


def adadelta_step(param, grad, state: AdadeltaState, rho=0.95, eps=1e-6, lr=1.0):
    """One in-place Adadelta update of ``param``; returns the applied step.

    ``state`` starts at zeros.  The accumulated update statistic uses the
    unscaled step, the parameter moves by ``lr`` times it.
    """
    if param.shape != grad.shape:
        raise ValueError(f"param {param.shape} and grad {grad.shape} differ")
    dtype = param.dtype
    state.eg2 *= rho
    state.eg2 += (1 - rho) * grad * grad
    step = -(np.sqrt(state.edx2 + eps) / np.sqrt(state.eg2 + eps)) * grad
    state.edx2 *= rho
    state.edx2 += (1 - rho) * step * step
    param += (lr * step).astype(dtype, copy=False)
    return step


class Adadelta:
    def __init__(self, rho: float = 0.95, eps: float = 1e-6):
        self.rho = rho
        self.eps = eps
        self.state: dict[str, AdadeltaState] = {}

    def step(self, params: dict, grads: dict, lr: float = 1.0):
        for name in sorted(grads):
            p = params[name]
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdadeltaState(np.zeros_like(p), np.zeros_like(p))
            adadelta_step(p, grads[name].astype(p.dtype, copy=False), st, self.rho, self.eps, lr)


class SGD:
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float = 0.01):
        for name in sorted(grads):
            p = params[name]
            v = self.velocity.setdefault(name, np.zeros_like(p))
            v *= self.momentum
            v -= lr * grads[name]
            p += v


def make_optimizer(name: str, rho: float = 0.95, eps: float = 1e-6, momentum: float = 0.9):
    if name == "adadelta":
        return Adadelta(rho, eps)
    if name == "sgd":
        return SGD(momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def staged_lr(iteration: int, total: int, schedule) -> float:
    """Learning rate for ``iteration`` under ``((fraction, lr), ...)`` stages.

    Stage boundaries are at ``round(total * cumulative_fraction)``.
    """
    edge = 0.0
    for fraction, lr in schedule:
        edge += fraction
        if iteration < round(total * edge):
            return lr
    return schedule[-1][1]


def stage_boundaries(total: int, schedule) -> list[int]:
    out, edge = [], 0.0
    for fraction, _ in schedule[:-1]:
        edge += fraction
        out.append(round(total * edge))
    return out
