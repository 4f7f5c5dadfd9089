"""Round-by-round federated training with optional loss exploration and guided updates."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fedlex import __version__
from fedlex.aggregation import AggregatorState, ClientUpdate, apply
from fedlex.config import ConfigError, RoundConfig
from fedlex.data import ClientShard, Dataset, PartitionSpec, gen_synthetic, load_idx, partition
from fedlex.guidance import (
    ExplorationDiverged,
    GuidanceMatrix,
    aggregate_global,
    explore,
    modulate,
    normalize_local,
    refresh_global,
)
from fedlex.nn import MlpModel, ParamVector, accuracy, init_params, loss_and_grad, Batch, variance_across
from fedlex.training import TrainingDiverged, run_sgd

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "mean_acc", "std_acc", "pooled_acc", "sigma2_dw", "bytes_up", "bytes_down")


class FatalConfigError(RuntimeError):
    pass


class RoundFailed(RuntimeError):
    pass


@dataclass
class ServerState:
    weights: ParamVector
    aggregator: AggregatorState
    g_global: Optional[GuidanceMatrix] = None
    registry: dict[int, GuidanceMatrix] = field(default_factory=dict)
    round: int = 0
    explored: bool = False


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    mean_acc: float
    std_acc: float
    pooled_acc: float
    sigma2_dw: float
    bytes_up: int
    bytes_down: int
    train_loss: dict = field(default_factory=dict, compare=False)
    participants: tuple = ()

    def row(self) -> list[str]:
        return [
            str(self.round),
            repr(float(self.mean_acc)),
            repr(float(self.std_acc)),
            repr(float(self.pooled_acc)),
            repr(float(self.sigma2_dw)),
            str(self.bytes_up),
            str(self.bytes_down),
        ]


@dataclass
class Federation:
    """Everything a run needs besides the server: model shape, client shards, pooled test set."""

    cfg: RoundConfig
    model: MlpModel
    clients: list[ClientShard]
    pooled_test: Dataset


# --- setup ------------------------------------------------------------------


def load_dataset(cfg: RoundConfig) -> Dataset:
    if cfg.dataset == "idx":
        ds = load_idx(cfg.idx_images, cfg.idx_labels, classes=cfg.classes)
        if ds.dim != cfg.dim:
            raise ConfigError("dim", f"IDX images have {ds.dim} features, config says {cfg.dim}")
        return ds
    return gen_synthetic(cfg.classes, cfg.dim, cfg.per_class, cfg.separation, seed=[cfg.seed, 1])


def build_federation(cfg: RoundConfig, dataset: Dataset | None = None) -> Federation:
    ds = dataset if dataset is not None else load_dataset(cfg)
    spec = PartitionSpec(
        cfg.partition, cfg.C, seed=cfg.seed, classes_per_client=cfg.classes_per_client, alpha=cfg.alpha
    )
    clients = partition(ds, spec)
    pooled_idx = np.sort(np.concatenate([c.test_indices for c in clients]))
    model = MlpModel(cfg.layer_sizes, cfg.activation, init_params(cfg.layer_sizes, seed=[cfg.seed, 3]))
    return Federation(cfg, model, clients, ds.subset(pooled_idx))


def init_server(fed: Federation) -> ServerState:
    cfg = fed.cfg
    weights = fed.model.params
    server = ServerState(weights, AggregatorState.from_config(cfg, weights.layout))
    if cfg.fedlex and cfg.force_ones_guidance:
        server.g_global = GuidanceMatrix.ones(weights.layout)
    return server


def client_rng(cfg: RoundConfig, rnd: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 303, rnd, client_id])


def sample_clients(cfg: RoundConfig, rnd: int) -> list[int]:
    """K distinct client ids, uniform without replacement, a pure function of (seed, round)."""
    rng = np.random.default_rng([cfg.seed, 202, rnd])
    return sorted(int(i) for i in rng.choice(cfg.C, size=cfg.K, replace=False))


def select_explorers(cfg: RoundConfig) -> list[int]:
    rng = np.random.default_rng([cfg.seed, 404])
    return sorted(int(i) for i in rng.choice(cfg.C, size=cfg.explorers, replace=False))


# --- evaluation -------------------------------------------------------------


def evaluate(fed: Federation, weights: ParamVector) -> tuple[float, float, float]:
    """Mean and std of per-client test accuracy, and accuracy on the pooled test set."""
    model = fed.model.with_params(weights)
    accs = np.array([accuracy(model, c.test.inputs, c.test.labels) for c in fed.clients])
    pooled = accuracy(model, fed.pooled_test.inputs, fed.pooled_test.labels)
    return float(accs.mean()), float(accs.std()), pooled


# --- protocol ---------------------------------------------------------------


def run_exploration_round(server: ServerState, fed: Federation) -> tuple[ServerState, RoundMetrics]:
    """Explorers train from the broadcast weights and upload raw deviations once."""
    cfg = fed.cfg
    if server.round != 0:
        raise RuntimeError("exploration happens before the first training round")
    reports = []
    for cid in select_explorers(cfg):
        try:
            reports.append(explore(server.weights, fed.clients[cid], cfg, model=fed.model))
        except ExplorationDiverged as err:
            log.warning("dropping explorer %d: %s", cid, err)
    if not reports:
        raise FatalConfigError("every explorer diverged during exploration; lower eta or E_exp")
    for rep in reports:
        server.registry[rep.client_id] = normalize_local(rep.g_local, per_layer=cfg.per_layer_norm)
    server.g_global = aggregate_global([server.registry[i] for i in sorted(server.registry)])
    server.explored = True
    mean_acc, std_acc, pooled = evaluate(fed, server.weights)
    metrics = RoundMetrics(
        0, mean_acc, std_acc, pooled, 0.0,
        bytes_up=len(reports) * server.weights.nbytes,
        bytes_down=0,
        train_loss={r.client_id: r.final_train_loss for r in reports},
        participants=tuple(r.client_id for r in reports),
    )
    return server, metrics


def local_update(
    cfg: RoundConfig,
    model: MlpModel,
    shard: ClientShard,
    global_weights: ParamVector,
    g: Optional[GuidanceMatrix],
    rnd: int,
) -> tuple[ClientUpdate, float]:
    """One client's work for a round: the payload it transmits and its training loss."""
    w0 = global_weights.values
    factors = None
    if g is not None:
        factors = np.maximum(g.values, cfg.guidance_floor) if cfg.guidance_floor > 0 else g.values
    n = len(shard.train)

    if cfg.aggregator == "sgd":
        loss, grad = loss_and_grad(model.with_params(global_weights), Batch(shard.train.inputs, shard.train.labels))
        if not np.isfinite(loss):
            raise TrainingDiverged(1, loss)
        gv = grad.values + cfg.weight_decay * w0 if cfg.weight_decay else grad.values
        payload = ParamVector(gv, grad.layout)
        if g is not None:
            payload = modulate(payload, g, cfg.guidance_floor)
        return ClientUpdate(shard.client_id, payload, n), loss

    wd = cfg.weight_decay
    mu = cfg.prox_mu if cfg.aggregator == "prox" else 0.0
    per_step = factors is not None and not cfg.delta_mode

    def transform(grad, w):
        if wd:
            grad = grad + wd * w
        if mu:
            grad = grad + mu * (w - w0)
        if per_step:
            grad = grad * factors
        return grad

    final, loss = run_sgd(
        model.with_params(global_weights),
        shard.train.inputs,
        shard.train.labels,
        epochs=cfg.E,
        batch_size=cfg.B,
        lr=cfg.eta,
        rng=client_rng(cfg, rnd, shard.client_id),
        transform=transform,
    )
    delta = ParamVector(final.values - w0, global_weights.layout)
    if factors is not None and cfg.delta_mode:
        delta = modulate(delta, g, cfg.guidance_floor)
    return ClientUpdate(shard.client_id, delta, n), loss


def run_round(server: ServerState, fed: Federation) -> tuple[ServerState, RoundMetrics]:
    cfg = fed.cfg
    if cfg.fedlex and server.g_global is None:
        raise RuntimeError("FedLEx rounds need a guidance matrix; run the exploration round first")
    server.round += 1
    rnd = server.round
    participants = sample_clients(cfg, rnd)
    guided = cfg.fedlex
    if guided and server.explored:
        server.g_global = refresh_global(server, participants)
    g = server.g_global if guided else None

    updates, losses = [], {}
    for cid in participants:
        try:
            upd, loss = local_update(cfg, fed.model, fed.clients[cid], server.weights, g, rnd)
        except TrainingDiverged as err:
            log.warning("round %d: dropping client %d (%s)", rnd, cid, err)
            continue
        updates.append(upd)
        losses[cid] = loss
    if not updates:
        raise RoundFailed(f"round {rnd}: every participating client diverged")

    server.weights = apply(server.aggregator, server.weights, updates)
    mean_acc, std_acc, pooled = evaluate(fed, server.weights)
    size = server.weights.nbytes
    # a forced all-ones matrix is known to every client and never transmitted
    sends_g = guided and not cfg.force_ones_guidance
    metrics = RoundMetrics(
        rnd,
        mean_acc,
        std_acc,
        pooled,
        variance_across([u.payload for u in updates]),
        bytes_up=len(updates) * size,
        bytes_down=len(participants) * size * (2 if sends_g else 1),
        train_loss=losses,
        participants=tuple(participants),
    )
    return server, metrics


# --- whole runs -------------------------------------------------------------


def config_hash(cfg: RoundConfig) -> str:
    """Git blob hash of the canonical JSON rendering of the config."""
    body = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def manifest(cfg: RoundConfig, fed: Federation | None = None) -> dict:
    resolved = {"server_lr": cfg.resolved_server_lr}
    if cfg.fedlex and not cfg.force_ones_guidance:
        resolved["C_exp"] = cfg.explorers
        resolved["C_exp_form"] = "fraction" if isinstance(cfg.C_exp, float) and cfg.C_exp <= 1.0 else "count"
    m = {
        "fedlex_version": __version__,
        "variant": cfg.variant,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "resolved": resolved,
    }
    if fed is not None:
        m["resolved"]["num_params"] = len(fed.model.params)
    return m


def write_manifest(path, cfg: RoundConfig, fed: Federation | None = None, extra: dict | None = None) -> None:
    m = manifest(cfg, fed)
    if extra:
        m.update(extra)
    Path(path).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def metrics_csv(rows: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in rows:
        w.writerow(m.row())
    return buf.getvalue()


def _plateaued(history: list[float], patience: int, tol: float) -> bool:
    if len(history) <= patience:
        return False
    best_before = max(history[:-patience])
    return max(history[-patience:]) - best_before < tol


def run_experiment(
    cfg: RoundConfig,
    out_dir=None,
    dataset: Dataset | None = None,
    save_guidance_matrix: bool = False,
) -> list[RoundMetrics]:
    """Run exploration (FedLEx only) plus ``cfg.R`` rounds; stream metrics to ``out_dir`` if given."""
    fed = build_federation(cfg, dataset)
    server = init_server(fed)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.json", cfg, fed)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

    history: list[RoundMetrics] = []

    def record(m: RoundMetrics):
        history.append(m)
        if writer is not None:
            writer.writerow(m.row())
            fh.flush()

    try:
        if cfg.fedlex and not cfg.force_ones_guidance:
            server, m0 = run_exploration_round(server, fed)
            record(m0)
            if out is not None and save_guidance_matrix:
                from fedlex.guidance import save_guidance

                save_guidance(server.g_global, out / "g_global_initial")
        pooled: list[float] = []
        for _ in range(cfg.R):
            server, m = run_round(server, fed)
            record(m)
            pooled.append(m.pooled_acc)
            if cfg.early_stop and _plateaued(pooled, cfg.early_stop_patience, cfg.early_stop_tol):
                log.info("early stop after round %d", m.round)
                break
    finally:
        if writer is not None:
            fh.close()
    return history
