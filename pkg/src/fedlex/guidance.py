"""Loss exploration, guidance matrices and gradient modulation.

Explorer clients train from the broadcast initialization for a fixed number of
epochs and report how far each parameter travelled, ``(w_init - w_final)**2``.
Each report is min-max scaled to [0, 1] and the server averages the scaled
reports into the global guidance matrix. During training rounds every local
gradient is multiplied elementwise by that matrix, so parameters that barely
moved during exploration are damped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedlex.data import ClientShard
from fedlex.nn import Layout, MlpModel, ParamVector, ShapeError
from fedlex.training import TrainingDiverged, run_sgd


class ExplorationDiverged(FloatingPointError):
    def __init__(self, client_id: int, epoch: int):
        super().__init__(f"exploration on client {client_id} diverged in epoch {epoch}")
        self.client_id = client_id
        self.epoch = epoch


class GuidanceContractError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GuidanceMatrix(ParamVector):
    normalized: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.normalized and (np.any(self.values < 0) or np.any(self.values > 1)):
            raise GuidanceContractError("normalized guidance must lie in [0, 1]")

    @classmethod
    def ones(cls, layout: Layout) -> "GuidanceMatrix":
        n = sum(int(np.prod(s)) for _, _, s in layout)
        return cls(np.ones(n), layout, normalized=True)


@dataclass(frozen=True)
class ExplorationReport:
    client_id: int
    g_local: GuidanceMatrix
    epochs_run: int
    final_train_loss: float


def exploration_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 101, client_id])


def explore(initial_weights: ParamVector, shard: ClientShard, cfg, model: MlpModel | None = None) -> ExplorationReport:
    """Train ``cfg.E_exp`` epochs of SGD from ``initial_weights`` and report squared displacement.

    ``cfg`` needs ``E_exp``, ``B``, ``eta``, ``weight_decay`` and ``seed``; the
    architecture comes from ``model`` (or ``cfg.layer_sizes``/``cfg.activation``).
    """
    if cfg.E_exp < 1:
        raise ValueError("E_exp must be >= 1")
    if len(shard.train) == 0:
        raise ValueError(f"client {shard.client_id} has no training data")
    if model is None:
        model = MlpModel(tuple(cfg.layer_sizes), cfg.activation, initial_weights)
    else:
        model = model.with_params(initial_weights)
    wd = cfg.weight_decay

    def decay(g, w):
        return g + wd * w if wd else g

    try:
        final, loss = run_sgd(
            model,
            shard.train.inputs,
            shard.train.labels,
            epochs=cfg.E_exp,
            batch_size=cfg.B,
            lr=cfg.eta,
            rng=exploration_rng(cfg.seed, shard.client_id),
            transform=decay,
        )
    except TrainingDiverged as err:
        raise ExplorationDiverged(shard.client_id, err.epoch) from err
    return ExplorationReport(
        shard.client_id,
        deviation(initial_weights, final),
        cfg.E_exp,
        loss,
    )


def deviation(initial: ParamVector, final: ParamVector) -> GuidanceMatrix:
    """Squared per-parameter displacement, unnormalized."""
    if initial.layout != final.layout:
        raise ShapeError("initial and final layouts differ")
    return GuidanceMatrix((initial.values - final.values) ** 2, initial.layout, normalized=False)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def normalize_local(raw: GuidanceMatrix, per_layer: bool = False) -> GuidanceMatrix:
    """Min-max scale a client's raw deviations to [0, 1].

    One min and one max over the whole vector unless ``per_layer`` is set. A
    constant input maps to all ones so modulation becomes a no-op.
    """
    if raw.normalized:
        raise GuidanceContractError("guidance matrix is already normalized")
    v = raw.values
    if np.any(v < 0):
        raise GuidanceContractError("raw deviations must be non-negative")
    if per_layer:
        out = np.empty_like(v)
        for _, offset, shape in raw.layout:
            sl = slice(offset, offset + int(np.prod(shape)))
            out[sl] = _minmax(v[sl])
    else:
        out = _minmax(v)
    # guard against 1 + ulp from the division
    return GuidanceMatrix(np.clip(out, 0.0, 1.0), raw.layout, normalized=True)


def aggregate_global(locals_: Sequence[GuidanceMatrix]) -> GuidanceMatrix:
    """Elementwise mean of normalized local matrices."""
    if len(locals_) == 0:
        raise ValueError("need at least one local guidance matrix")
    layout = locals_[0].layout
    for g in locals_:
        if not g.normalized:
            raise GuidanceContractError("aggregate_global expects normalized matrices")
        if g.layout != layout:
            raise ShapeError("guidance layouts differ")
    mean = np.mean(np.stack([g.values for g in locals_]), axis=0)
    return GuidanceMatrix(np.clip(mean, 0.0, 1.0), layout, normalized=True)


def refresh_global(server, participating: Iterable[int]) -> GuidanceMatrix:
    """Re-aggregate from the stored matrices of participating explorers.

    ``server`` must expose ``registry`` (client id -> normalized matrix) and
    ``g_global``. With no explorer among the participants the previous matrix
    is returned as is.
    """
    ids = sorted(set(participating) & set(server.registry))
    if not ids:
        return server.g_global
    return aggregate_global([server.registry[i] for i in ids])


def modulate(gradient: ParamVector, g: GuidanceMatrix, floor: float = 0.0) -> ParamVector:
    """Elementwise ``gradient * max(g, floor)``."""
    if not g.normalized:
        raise GuidanceContractError("modulation needs a normalized guidance matrix")
    if gradient.layout != g.layout:
        raise ShapeError("gradient and guidance layouts differ")
    if not 0 <= floor < 1:
        raise ValueError("floor must lie in [0, 1)")
    factors = np.maximum(g.values, floor) if floor > 0 else g.values
    return ParamVector(gradient.values * factors, gradient.layout)


def save_guidance(g: GuidanceMatrix, path) -> tuple[Path, Path]:
    """Write ``<path>.f64`` (little-endian float64) and a ``<path>.json`` layout sidecar."""
    path = Path(path)
    data_path = path.with_suffix(".f64")
    meta_path = path.with_suffix(".json")
    data_path.write_bytes(g.values.astype("<f8").tobytes())
    meta = {
        "dtype": "<f8",
        "length": len(g),
        "normalized": g.normalized,
        "layout": [{"name": n, "offset": o, "shape": list(s)} for n, o, s in g.layout],
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return data_path, meta_path


def load_guidance(path) -> GuidanceMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8")
    if values.size != meta["length"]:
        raise ShapeError(f"expected {meta['length']} values, found {values.size}")
    layout = tuple((e["name"], e["offset"], tuple(e["shape"])) for e in meta["layout"])
    return GuidanceMatrix(values.astype(np.float64), layout, normalized=meta["normalized"])
