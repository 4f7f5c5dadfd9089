"""Server-side aggregation: weighted mean, server momentum, gradient averaging, server Adam.

FedProx differs from FedAvg only on the client (proximal term), so its server
step is plain weighted averaging. FedLEx variants reuse these unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fedlex.nn import Layout, ParamVector, ShapeError


class AggregatorMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    payload: ParamVector
    num_samples: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass
class AggregatorState:
    kind: str
    server_lr: float = 1.0
    beta_momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prox_mu: float = 0.01
    momentum: Optional[np.ndarray] = None
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None
    adam_t: int = 0

    @classmethod
    def from_config(cls, cfg, layout: Layout) -> "AggregatorState":
        n = sum(int(np.prod(s)) for _, _, s in layout)
        state = cls(
            kind=cfg.aggregator,
            server_lr=cfg.resolved_server_lr,
            beta_momentum=cfg.beta_momentum,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            adam_eps=cfg.adam_eps,
            prox_mu=cfg.prox_mu,
        )
        if state.kind == "avgm":
            state.momentum = np.zeros(n)
        if state.kind == "opt":
            state.adam_m = np.zeros(n)
            state.adam_v = np.zeros(n)
        return state

    def hyper(self) -> dict:
        return {
            "server_lr": self.server_lr,
            "beta_momentum": self.beta_momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "prox_mu": self.prox_mu,
        }


def weighted_mean(updates: Sequence[ClientUpdate]) -> ParamVector:
    """Sample-count weighted average of the payloads."""
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty list of updates")
    layout = updates[0].payload.layout
    if any(u.payload.layout != layout for u in updates):
        raise ShapeError("client payload layouts differ")
    counts = np.array([u.num_samples for u in updates], dtype=np.float64)
    if np.all(counts == counts[0]):
        return ParamVector(np.mean(np.stack([u.payload.values for u in updates]), axis=0), layout)
    weights = counts / counts.sum()
    total = np.zeros(len(updates[0].payload))
    for w, u in zip(weights, updates):
        total += w * u.payload.values
    return ParamVector(total, layout)


def _expect(state: AggregatorState, *kinds: str) -> None:
    if state.kind not in kinds:
        raise AggregatorMismatch(f"aggregator state is {state.kind!r}, expected one of {kinds}")


def apply_avg(state: AggregatorState, weights: ParamVector, updates) -> ParamVector:
    _expect(state, "avg", "prox")
    delta = weighted_mean(updates)
    return ParamVector(weights.values + delta.values, weights.layout)


def apply_avgm(state: AggregatorState, weights: ParamVector, updates) -> ParamVector:
    _expect(state, "avgm")
    delta = weighted_mean(updates)
    state.momentum = state.beta_momentum * state.momentum + delta.values
    return ParamVector(weights.values + state.server_lr * state.momentum, weights.layout)


def apply_sgd(state: AggregatorState, weights: ParamVector, updates) -> ParamVector:
    _expect(state, "sgd")
    grad = weighted_mean(updates)
    return ParamVector(weights.values - state.server_lr * grad.values, weights.layout)


def apply_opt(state: AggregatorState, weights: ParamVector, updates) -> ParamVector:
    """Adam on the server, with the mean client delta as the (ascent) pseudo-gradient."""
    _expect(state, "opt")
    delta = weighted_mean(updates).values
    state.adam_t += 1
    t = state.adam_t
    state.adam_m = state.beta1 * state.adam_m + (1.0 - state.beta1) * delta
    state.adam_v = state.beta2 * state.adam_v + (1.0 - state.beta2) * delta**2
    m_hat = state.adam_m / (1.0 - state.beta1**t)
    v_hat = state.adam_v / (1.0 - state.beta2**t)
    step = state.server_lr * m_hat / (np.sqrt(v_hat) + state.adam_eps)
    return ParamVector(weights.values + step, weights.layout)


_APPLY = {"avg": apply_avg, "prox": apply_avg, "avgm": apply_avgm, "sgd": apply_sgd, "opt": apply_opt}


def apply(state: AggregatorState, weights: ParamVector, updates: Sequence[ClientUpdate]) -> ParamVector:
    """Dispatch on ``state.kind``; updates are sorted by client id first."""
    ordered = sorted(updates, key=lambda u: u.client_id)
    return _APPLY[state.kind](state, weights, ordered)


def prox_gradient(local_grad, w_local, w_global, mu: float):
    """Gradient of the local loss plus ``mu/2 * ||w_local - w_global||^2``.

    Works on ParamVectors or on raw arrays (the local training loop uses arrays).
    """
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if isinstance(local_grad, ParamVector):
        if not (local_grad.layout == w_local.layout == w_global.layout):
            raise ShapeError("layouts differ")
        return ParamVector(prox_gradient(local_grad.values, w_local.values, w_global.values, mu), local_grad.layout)
    if mu == 0:
        return local_grad
    return local_grad + mu * (w_local - w_global)
