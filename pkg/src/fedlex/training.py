"""Local mini-batch SGD shared by exploration and client rounds."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from fedlex.nn import Batch, MlpModel, ParamVector, backward, forward_loss

# receives (raw gradient values, current weight values) and returns the step direction
GradTransform = Callable[[np.ndarray, np.ndarray], np.ndarray]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def run_sgd(
    model: MlpModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    transform: Optional[GradTransform] = None,
) -> tuple[ParamVector, float]:
    """Run ``epochs`` shuffled passes of SGD; return final weights and the last epoch's mean loss.

    Raises TrainingDiverged (1-based epoch) on a non-finite loss.
    """
    w = model.params.values.copy()
    layout = model.params.layout
    last = float("nan")
    # overflow on the way to divergence is expected; the loss check reports it
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            total, seen = 0.0, 0
            for idx in minibatches(labels.shape[0], batch_size, rng):
                current = model.with_params(ParamVector(w, layout))
                loss, cache = forward_loss(current, Batch(inputs[idx], labels[idx]))
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, loss)
                g = backward(current, cache).values
                if transform is not None:
                    g = transform(g, w)
                w = w - lr * g
                total += loss * idx.size
                seen += idx.size
            last = total / seen
    if not np.all(np.isfinite(w)):
        raise TrainingDiverged(epochs, float("nan"))
    return ParamVector(w, layout), last
